use loradrop_core::tensor::{check_gradients, GradCheckConfig};
use loradrop_core::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const INSTANCES: u64 = 100;

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let v = (0..n).map(|_| rng.random_range(-1.5..1.5)).collect();
    Tensor::param(v, shape).unwrap()
}

fn dims(rng: &mut ChaCha8Rng) -> usize {
    rng.random_range(1..5)
}

/// Random projection weights make the scalar objective depend on every
/// output entry with distinct sensitivities.
fn project(y: &Tensor, seed: u64) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
    let w: Vec<f64> = (0..y.numel()).map(|_| rng.random_range(-1.0..1.0)).collect();
    Ok(y.mul(&Tensor::new(w, y.shape())?)?.sum())
}

fn certify(op: &str, build: impl Fn(&mut ChaCha8Rng) -> (Vec<Tensor>, Box<dyn Fn(&[Tensor]) -> Result<Tensor>>)) {
    let cfg = GradCheckConfig::default();
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (inputs, f) = build(&mut rng);
        let named: Vec<(String, Tensor)> =
            inputs.iter().enumerate().map(|(i, t)| (format!("{op}.x{i}"), t.clone())).collect();
        let reports = check_gradients(&named, || project(&f(&inputs)?, seed), &cfg).unwrap();
        for r in reports {
            assert!(r.passed, "{op} seed {seed}: {r:?}");
        }
    }
}

#[test]
fn matmul_matches_finite_differences() {
    certify("matmul", |rng| {
        let (m, k, n) = (dims(rng), dims(rng), dims(rng));
        (vec![randn(rng, &[m, k]), randn(rng, &[k, n])], Box::new(|x| x[0].matmul(&x[1])))
    });
}

#[test]
fn batched_matmul_nt_matches_finite_differences() {
    certify("matmul_nt", |rng| {
        let (b, m, k, n) = (dims(rng), dims(rng), dims(rng), dims(rng));
        (vec![randn(rng, &[b, m, k]), randn(rng, &[b, n, k])], Box::new(|x| x[0].matmul_nt(&x[1])))
    });
}

#[test]
fn shared_rhs_matmul_matches_finite_differences() {
    certify("matmul_shared", |rng| {
        let (b, m, k, n) = (dims(rng), dims(rng), dims(rng), dims(rng));
        (vec![randn(rng, &[b, m, k]), randn(rng, &[n, k])], Box::new(|x| x[0].matmul_nt(&x[1])))
    });
}

#[test]
fn softmax_matches_finite_differences() {
    certify("softmax", |rng| {
        let (r, l) = (dims(rng), dims(rng) + 1);
        (vec![randn(rng, &[r, l])], Box::new(|x| x[0].scale(2.0).softmax_last()))
    });
}

#[test]
fn masked_softmax_matches_finite_differences() {
    certify("masked_softmax", |rng| {
        let (r, l) = (dims(rng), dims(rng) + 1);
        let mut keep: Vec<bool> = (0..r * l).map(|_| rng.random_bool(0.6)).collect();
        for row in keep.chunks_mut(l) {
            row[0] = true;
        }
        (
            vec![randn(rng, &[r, l])],
            Box::new(move |x| x[0].masked_fill(&keep, f64::NEG_INFINITY)?.softmax_last()),
        )
    });
}

#[test]
fn elementwise_ops_match_finite_differences() {
    certify("elementwise", |rng| {
        let shape = [dims(rng), dims(rng)];
        (
            vec![randn(rng, &shape), randn(rng, &shape)],
            Box::new(|x| {
                let a = x[0].tanh().mul(&x[1].exp())?;
                let b = x[0].gelu().add(&x[1].mul(&x[1])?.add_scalar(1.0).log())?;
                a.sub(&b)?.div(&x[1].mul(&x[1])?.add_scalar(0.5))
            }),
        )
    });
}

#[test]
fn broadcasting_matches_finite_differences() {
    certify("broadcast", |rng| {
        let (b, r, c) = (dims(rng), dims(rng), dims(rng));
        (
            vec![randn(rng, &[b, r, c]), randn(rng, &[c]), randn(rng, &[b, r, 1])],
            Box::new(|x| x[0].add(&x[1])?.mul(&x[2])),
        )
    });
}

#[test]
fn reductions_match_finite_differences() {
    certify("reductions", |rng| {
        let shape = [dims(rng), dims(rng), dims(rng)];
        (
            vec![randn(rng, &shape)],
            Box::new(|x| {
                let s = x[0].mul(&x[0])?.sum_last();
                s.add(&x[0].mean().reshape(&[1])?)
            }),
        )
    });
}

#[test]
fn layer_norm_matches_finite_differences() {
    certify("layer_norm", |rng| {
        let (r, d) = (dims(rng), dims(rng) + 1);
        (
            vec![randn(rng, &[r, d]), randn(rng, &[d]), randn(rng, &[d])],
            Box::new(|x| x[0].layer_norm(&x[1], &x[2], 1e-5)),
        )
    });
}

#[test]
fn shape_ops_match_finite_differences() {
    certify("shape_ops", |rng| {
        let (a, b, c) = (dims(rng), dims(rng), dims(rng));
        let idx = rng.random_range(0..b);
        (
            vec![randn(rng, &[a, b, c])],
            Box::new(move |x| {
                let p = x[0].permute(&[2, 0, 1])?.reshape(&[c * a, b])?;
                let s = x[0].select(1, idx)?;
                p.sum().add(&s.mul(&s)?.sum())
            }),
        )
    });
}

#[test]
fn embedding_and_clamp_match_finite_differences() {
    certify("embedding", |rng| {
        let (v, d) = (dims(rng) + 1, dims(rng));
        let ids: Vec<usize> = (0..6).map(|_| rng.random_range(0..v)).collect();
        (
            vec![randn(rng, &[v, d])],
            Box::new(move |x| Ok(Tensor::embedding(&x[0], &ids)?.clamp_min(-0.75).relu())),
        )
    });
}

#[test]
fn backward_visits_shared_nodes_once() {
    // y = x*x used three times; d/dx sum(3 y) = 6x
    let x = Tensor::param(vec![1.0, -2.0], &[2]).unwrap();
    let y = x.mul(&x).unwrap();
    let z = y.add(&y).unwrap().add(&y).unwrap().sum();
    z.backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![6.0, -12.0]);
}

#[test]
fn shape_mismatch_names_both_shapes() {
    let a = Tensor::zeros(&[2, 3]);
    let b = Tensor::zeros(&[2, 3]);
    let msg = a.matmul(&b).unwrap_err().to_string();
    assert!(msg.contains("[2, 3]"), "{msg}");
}
