use loradrop_core::dropout::{self, DropoutSpec, Mode, Position};
use loradrop_core::mask::{sample_mask, AxisSemantics, MaskPlan, StructuralPattern};
use loradrop_core::Tensor;
use proptest::prelude::*;

fn hidden() -> Tensor {
    Tensor::new(vec![0.5, -1.0, 2.0, 3.0, -0.25, 1.5, 0.75, -2.0], &[2, 4]).unwrap()
}

#[test]
fn hidden_cut_is_unbiased() {
    let h = hidden();
    let draws = 100_000;
    let mut acc = vec![0.0; 8];
    for s in 0..draws {
        let m = sample_mask(2, 4, StructuralPattern::Element, 0.3, s, AxisSemantics::Hidden).unwrap();
        let y = dropout::hidden_cut(&h, &[m], 0.3).unwrap();
        acc.iter_mut().zip(y.data().iter()).for_each(|(a, v)| *a += v);
    }
    for (a, x) in acc.iter().zip(h.to_vec()) {
        let mean = a / draws as f64;
        assert!((mean - x).abs() <= 0.01 * x.abs(), "{mean} vs {x}");
    }
}

#[test]
fn output_dropout_is_unbiased() {
    let h = hidden();
    let draws = 100_000;
    let mut acc = vec![0.0; 8];
    for s in 0..draws {
        let y = dropout::output_dropout(&h, 0.3, s).unwrap();
        acc.iter_mut().zip(y.data().iter()).for_each(|(a, v)| *a += v);
    }
    for (a, x) in acc.iter().zip(h.to_vec()) {
        let mean = a / draws as f64;
        assert!((mean - x).abs() <= 0.01 * x.abs(), "{mean} vs {x}");
    }
}

#[test]
fn input_cutoff_keeps_mean_abs_norm() {
    let (b, l, d) = (4, 10, 6);
    let e: Vec<f64> = (0..b * l * d).map(|i| ((i * 37 % 11) as f64 - 5.0) / 3.0).collect();
    let emb = Tensor::new(e.clone(), &[b, l, d]).unwrap();
    let norm = |v: &[f64]| v.iter().map(|x| x.abs()).sum::<f64>() / v.len() as f64;
    let base = norm(&e);
    let draws = 1000;
    let mut total = 0.0;
    for s in 0..draws {
        let masks: Vec<MaskPlan> = (0..b)
            .map(|i| sample_mask(l, d, StructuralPattern::Element, 0.1, s * 16 + i as u64, AxisSemantics::Hidden).unwrap())
            .collect();
        total += norm(&dropout::input_cutoff(&emb, &masks, 0.1).unwrap().to_vec());
    }
    let mean = total / draws as f64;
    assert!((mean - base).abs() <= 0.05 * base, "{mean} vs {base}");
}

#[test]
fn input_cutoff_span_zeroes_token_rows() {
    let emb = Tensor::full(&[1, 10, 3], 1.0);
    let m = sample_mask(10, 3, StructuralPattern::Span, 0.2, 4, AxisSemantics::Hidden).unwrap();
    let y = dropout::input_cutoff(&emb, &[m], 0.2).unwrap().to_vec();
    let zero_rows = y.chunks(3).filter(|r| r.iter().all(|v| *v == 0.0)).count();
    assert_eq!(zero_rows, 2);
    assert!(y.iter().all(|v| *v == 0.0 || (*v - 1.25).abs() < 1e-15));
}

#[test]
fn every_position_is_inactive_at_rate_zero_or_inference() {
    use StructuralPattern::*;
    let specs = [
        DropoutSpec::drop_key(Column, 0.2),
        DropoutSpec::drop_attention(Element, 0.2, true),
        DropoutSpec::hidden_cut(Span, 0.2),
        DropoutSpec::input_cutoff(Element, 0.2),
        DropoutSpec::output_dropout(0.2),
    ];
    for s in specs {
        assert!(s.validate().is_ok());
        assert!(s.is_active(Mode::Train));
        assert!(!s.is_active(Mode::Infer));
        assert!(!DropoutSpec { rate: 0.0, ..s }.is_active(Mode::Train));
    }
    let none = DropoutSpec { position: Position::None, ..specs[0] };
    assert!(!none.is_active(Mode::Train));
}

#[test]
fn spec_json_uses_snake_case_names() {
    let s = DropoutSpec::drop_attention(StructuralPattern::Column, 0.1, true);
    let text = serde_json::to_string(&s).unwrap();
    assert!(text.contains("\"attn_weights\"") && text.contains("\"column\"") && text.contains("\"normalized\""), "{text}");
    let back: DropoutSpec = serde_json::from_str(&text).unwrap();
    assert_eq!(back, s);
}

fn logits_and_mask() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    (2usize..33).prop_flat_map(|l| {
        (
            prop::collection::vec(-6.0f64..6.0, l),
            prop::collection::vec(any::<bool>(), l),
            0..l,
        )
            .prop_map(|(g, mut keep, anchor)| {
                keep[anchor] = true;
                (g, keep)
            })
    })
}

proptest! {
    #[test]
    fn softmax_drop_key_equals_renormalized_drop_attention((g, keep) in logits_and_mask()) {
        let l = g.len();
        let mask = MaskPlan::from_grid(1, l, keep, StructuralPattern::Element, AxisSemantics::Attention).unwrap();
        let logits = Tensor::new(g, &[1, l]).unwrap();
        let dk = dropout::drop_key(&logits, std::slice::from_ref(&mask)).unwrap().softmax_last().unwrap();
        let w = logits.softmax_last().unwrap();
        for grad_stop in [false, true] {
            let da = dropout::drop_attention(&w, std::slice::from_ref(&mask), grad_stop).unwrap();
            for (a, b) in dk.to_vec().iter().zip(da.to_vec()) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
            let s: f64 = da.to_vec().iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn drop_key_blocks_masked_gradients((g, keep) in logits_and_mask()) {
        let l = g.len();
        let mask = MaskPlan::from_grid(1, l, keep.clone(), StructuralPattern::Element, AxisSemantics::Attention).unwrap();
        let logits = Tensor::param(g, &[1, l]).unwrap();
        let w = dropout::drop_key(&logits, &[mask]).unwrap().softmax_last().unwrap();
        let probe = Tensor::new((0..l).map(|i| i as f64 + 1.0).collect(), &[1, l]).unwrap();
        w.mul(&probe).unwrap().sum().backward().unwrap();
        let grad = logits.grad().unwrap();
        for (gi, k) in grad.iter().zip(&keep) {
            if !k {
                prop_assert_eq!(*gi, 0.0);
            }
        }
    }
}
