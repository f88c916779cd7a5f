use super::gemm::{gemm, Mat};
use super::{numel, Tensor};
use crate::error::{Error, Result};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// How the right operand of a binary op maps onto the left operand's layout.
/// Only right-aligned broadcasting of `rhs` into the shape of `lhs` is
/// supported; the result always has `lhs`'s shape.
enum Bcast {
    Same,
    /// rhs equals a suffix of lhs's shape
    Repeat(usize),
    /// rhs is lhs with the last extent collapsed to 1
    Rows(usize),
    General(Vec<usize>),
}

impl Bcast {
    fn plan(op: &'static str, a: &[usize], b: &[usize]) -> Result<Bcast> {
        let err = || Error::Shape {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        };
        if a == b {
            return Ok(Bcast::Same);
        }
        if b.len() > a.len() {
            return Err(err());
        }
        let off = a.len() - b.len();
        for (i, &bd) in b.iter().enumerate() {
            if bd != a[off + i] && bd != 1 {
                return Err(err());
            }
        }
        if b.iter().zip(&a[off..]).all(|(x, y)| x == y) {
            return Ok(Bcast::Repeat(numel(b).max(1)));
        }
        if b.len() == a.len()
            && b[b.len() - 1] == 1
            && b[..b.len() - 1] == a[..a.len() - 1]
        {
            return Ok(Bcast::Rows(a[a.len() - 1]));
        }
        // general right-aligned broadcast: materialize the index map
        let mut strides = vec![0usize; a.len()];
        let mut s = 1;
        for i in (0..b.len()).rev() {
            if b[i] != 1 {
                strides[off + i] = s;
            }
            s *= b[i];
        }
        let n = numel(a);
        let mut map = Vec::with_capacity(n);
        let mut idx = vec![0usize; a.len()];
        for _ in 0..n {
            map.push(idx.iter().zip(&strides).map(|(i, s)| i * s).sum());
            for d in (0..a.len()).rev() {
                idx[d] += 1;
                if idx[d] < a[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        Ok(Bcast::General(map))
    }

    #[inline]
    fn at(&self, i: usize) -> usize {
        match self {
            Bcast::Same => i,
            Bcast::Repeat(nb) => i % nb,
            Bcast::Rows(last) => i / last,
            Bcast::General(map) => map[i],
        }
    }
}

fn binary(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
    // (grad_out, a, b) -> (da, db)
    df: impl Fn(f64, f64, f64) -> (f64, f64) + 'static,
) -> Result<Tensor> {
    let plan = Bcast::plan(op, a.shape(), b.shape())?;
    let data: Vec<f64> = {
        let ad = a.data();
        let bd = b.data();
        ad.iter()
            .enumerate()
            .map(|(i, &x)| f(x, bd[plan.at(i)]))
            .collect()
    };
    let (ac, bc) = (a.clone(), b.clone());
    let b_len = b.numel();
    Ok(Tensor::from_op(
        data,
        a.shape().to_vec(),
        op,
        vec![a.clone(), b.clone()],
        move |g| {
            let ad = ac.data();
            let bd = bc.data();
            let want_a = ac.requires_grad();
            let want_b = bc.requires_grad();
            let mut ga = if want_a { vec![0.0; ad.len()] } else { Vec::new() };
            let mut gb = if want_b { vec![0.0; b_len] } else { Vec::new() };
            for (i, &gi) in g.iter().enumerate() {
                let j = plan.at(i);
                let (da, db) = df(gi, ad[i], bd[j]);
                if want_a {
                    ga[i] = da;
                }
                if want_b {
                    gb[j] += db;
                }
            }
            vec![want_a.then_some(ga), want_b.then_some(gb)]
        },
    ))
}

fn unary(
    op: &'static str,
    x: &Tensor,
    f: impl Fn(f64) -> f64,
    // (grad_out, input, output) -> grad_in
    df: impl Fn(f64, f64, f64) -> f64 + 'static,
) -> Tensor {
    let data: Vec<f64> = x.data().iter().map(|&v| f(v)).collect();
    let xc = x.clone();
    let out = data.clone();
    Tensor::from_op(data, x.shape().to_vec(), op, vec![x.clone()], move |g| {
        let xd = xc.data();
        let gx = g
            .iter()
            .zip(xd.iter())
            .zip(&out)
            .map(|((&gi, &xi), &yi)| df(gi, xi, yi))
            .collect();
        vec![Some(gx)]
    })
}

fn gelu_value(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_slope(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Splits a shape `[.., r, c]` into (batch, r, c).
fn split_matrix(op: &'static str, s: &[usize], other: &[usize]) -> Result<(usize, usize, usize)> {
    if s.len() < 2 {
        return Err(Error::Shape {
            op,
            lhs: s.to_vec(),
            rhs: other.to_vec(),
        });
    }
    let r = s[s.len() - 2];
    let c = s[s.len() - 1];
    Ok((numel(&s[..s.len() - 2]), r, c))
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        binary("add", self, other, |a, b| a + b, |g, _, _| (g, g))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        binary("sub", self, other, |a, b| a - b, |g, _, _| (g, -g))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        binary("mul", self, other, |a, b| a * b, |g, a, b| (g * b, g * a))
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        if other.data().contains(&0.0) {
            return Err(Error::Numeric("division by zero".into()));
        }
        binary(
            "div",
            self,
            other,
            |a, b| a / b,
            |g, a, b| (g / b, -g * a / (b * b)),
        )
    }

    pub fn scale(&self, c: f64) -> Tensor {
        unary("scale", self, |x| c * x, move |g, _, _| c * g)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        unary("add_scalar", self, |x| x + c, |g, _, _| g)
    }

    pub fn exp(&self) -> Tensor {
        unary("exp", self, f64::exp, |g, _, y| g * y)
    }

    pub fn log(&self) -> Tensor {
        unary("log", self, f64::ln, |g, x, _| g / x)
    }

    pub fn tanh(&self) -> Tensor {
        unary("tanh", self, f64::tanh, |g, _, y| g * (1.0 - y * y))
    }

    pub fn relu(&self) -> Tensor {
        unary(
            "relu",
            self,
            |x| x.max(0.0),
            |g, x, _| if x > 0.0 { g } else { 0.0 },
        )
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&self) -> Tensor {
        unary("gelu", self, gelu_value, |g, x, _| g * gelu_slope(x))
    }

    /// `max(x, floor)`; the gradient is zero where the floor is active.
    pub fn clamp_min(&self, floor: f64) -> Tensor {
        unary(
            "clamp_min",
            self,
            move |x| if x < floor { floor } else { x },
            move |g, x, _| if x > floor { g } else { 0.0 },
        )
    }

    pub fn sum(&self) -> Tensor {
        let s: f64 = self.data().iter().sum();
        let n = self.numel();
        Tensor::from_op(vec![s], Vec::new(), "sum", vec![self.clone()], move |g| {
            vec![Some(vec![g[0]; n])]
        })
    }

    pub fn mean(&self) -> Tensor {
        let n = self.numel().max(1);
        self.sum().scale(1.0 / n as f64)
    }

    /// Sum over the last axis, keeping it with extent 1.
    pub fn sum_last(&self) -> Tensor {
        let shape = self.shape().to_vec();
        let l = *shape.last().unwrap_or(&1);
        let data: Vec<f64> = self.data().chunks(l.max(1)).map(|r| r.iter().sum()).collect();
        let mut out_shape = shape.clone();
        if let Some(last) = out_shape.last_mut() {
            *last = 1;
        }
        Tensor::from_op(data, out_shape, "sum_last", vec![self.clone()], move |g| {
            let gx = g.iter().flat_map(|&gi| std::iter::repeat_n(gi, l)).collect();
            vec![Some(gx)]
        })
    }

    /// Row-wise softmax over the last axis. `-inf` entries map to exactly 0.
    pub fn softmax_last(&self) -> Result<Tensor> {
        let l = *self.shape().last().unwrap_or(&1);
        if l == 0 {
            return Err(Error::Contract("softmax over an empty axis".into()));
        }
        let mut out = self.to_vec();
        for (r, row) in out.chunks_mut(l).enumerate() {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if row.iter().any(|v| v.is_nan()) {
                row.fill(f64::NAN);
                continue;
            }
            if m == f64::NEG_INFINITY {
                return Err(Error::DegenerateRow(format!("softmax row {r} is entirely -inf")));
            }
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        let y = out.clone();
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            "softmax",
            vec![self.clone()],
            move |g| {
                let mut gx = vec![0.0; g.len()];
                for ((gr, yr), dr) in g.chunks(l).zip(y.chunks(l)).zip(gx.chunks_mut(l)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((d, &gi), &yi) in dr.iter_mut().zip(gr).zip(yr) {
                        *d = yi * (gi - dot);
                    }
                }
                vec![Some(gx)]
            },
        ))
    }

    /// Writes `value` wherever `keep` is false; filled positions pass no
    /// gradient.
    pub fn masked_fill(&self, keep: &[bool], value: f64) -> Result<Tensor> {
        if keep.len() != self.numel() {
            return Err(Error::Shape {
                op: "masked_fill",
                lhs: self.shape().to_vec(),
                rhs: vec![keep.len()],
            });
        }
        let data = self
            .data()
            .iter()
            .zip(keep)
            .map(|(&x, &k)| if k { x } else { value })
            .collect();
        let keep = keep.to_vec();
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            "masked_fill",
            vec![self.clone()],
            move |g| {
                let gx = g.iter().zip(&keep).map(|(&gi, &k)| if k { gi } else { 0.0 }).collect();
                vec![Some(gx)]
            },
        ))
    }

    /// Matrix product over the last two axes. `other` is either a single
    /// `[k, n]` matrix shared across all leading axes of `self`, or carries
    /// the same leading axes.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        self.matmul_impl(other, false)
    }

    /// `self · otherᵀ` over the last two axes (`other` is `[.., n, k]`).
    pub fn matmul_nt(&self, other: &Tensor) -> Result<Tensor> {
        self.matmul_impl(other, true)
    }

    fn matmul_impl(&self, other: &Tensor, nt: bool) -> Result<Tensor> {
        let op = if nt { "matmul_nt" } else { "matmul" };
        let mismatch = || Error::Shape {
            op,
            lhs: self.shape().to_vec(),
            rhs: other.shape().to_vec(),
        };
        let (batch, m, k) = split_matrix(op, self.shape(), other.shape())?;
        let (b_batch, br, bc) = split_matrix(op, other.shape(), self.shape())?;
        let (kb, n) = if nt { (bc, br) } else { (br, bc) };
        if kb != k {
            return Err(mismatch());
        }
        let shared = other.ndim() == 2;
        if !shared && other.shape()[..other.ndim() - 2] != self.shape()[..self.ndim() - 2] {
            return Err(mismatch());
        }
        debug_assert!(shared || b_batch == batch);

        let mut out_shape = self.shape().to_vec();
        *out_shape.last_mut().unwrap() = n;
        let mut out = vec![0.0; batch * m * n];
        {
            let ad = self.data();
            let bd = other.data();
            let bmat = |d| operand(d, br, bc, nt);
            if shared {
                gemm(Mat::new(&ad, batch * m, k), bmat(&bd), &mut out, false);
            } else {
                for i in 0..batch {
                    gemm(
                        Mat::new(&ad[i * m * k..(i + 1) * m * k], m, k),
                        bmat(&bd[i * br * bc..(i + 1) * br * bc]),
                        &mut out[i * m * n..(i + 1) * m * n],
                        false,
                    );
                }
            }
        }

        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            out,
            out_shape,
            op,
            vec![self.clone(), other.clone()],
            move |g| {
                let ad = a.data();
                let bd = b.data();
                let ga = a.requires_grad().then(|| {
                    let mut ga = vec![0.0; ad.len()];
                    // dA = dC·B (nt) or dC·Bᵀ
                    let bm = |d| operand(d, br, bc, !nt);
                    if shared {
                        gemm(Mat::new(g, batch * m, n), bm(&bd), &mut ga, false);
                    } else {
                        for i in 0..batch {
                            gemm(
                                Mat::new(&g[i * m * n..(i + 1) * m * n], m, n),
                                bm(&bd[i * br * bc..(i + 1) * br * bc]),
                                &mut ga[i * m * k..(i + 1) * m * k],
                                false,
                            );
                        }
                    }
                    ga
                });
                let gb = b.requires_grad().then(|| {
                    let mut gb = vec![0.0; bd.len()];
                    // dB = Aᵀ·dC, or dCᵀ·A for the transposed operand
                    let step = |a_blk: &[f64], g_blk: &[f64], rows: usize, out: &mut [f64], acc| {
                        if nt {
                            gemm(Mat::new(g_blk, rows, n).t(), Mat::new(a_blk, rows, k), out, acc);
                        } else {
                            gemm(Mat::new(a_blk, rows, k).t(), Mat::new(g_blk, rows, n), out, acc);
                        }
                    };
                    if shared {
                        step(&ad, g, batch * m, &mut gb, false);
                    } else {
                        for i in 0..batch {
                            step(
                                &ad[i * m * k..(i + 1) * m * k],
                                &g[i * m * n..(i + 1) * m * n],
                                m,
                                &mut gb[i * br * bc..(i + 1) * br * bc],
                                false,
                            );
                        }
                    }
                    gb
                });
                vec![ga, gb]
            },
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Tensor::from_op(
            self.to_vec(),
            shape.to_vec(),
            "reshape",
            vec![self.clone()],
            |g| vec![Some(g.to_vec())],
        ))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Tensor> {
        let shape = self.shape().to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::Shape {
                op: "permute",
                lhs: shape,
                rhs: axes.to_vec(),
            });
        }
        let (data, out_shape) = permute_data(&self.data(), &shape, axes);
        let mut inverse = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        let os = out_shape.clone();
        Ok(Tensor::from_op(data, out_shape, "permute", vec![self.clone()], move |g| {
            vec![Some(permute_data(g, &os, &inverse).0)]
        }))
    }

    /// Picks `index` along `axis`, dropping that axis.
    pub fn select(&self, axis: usize, index: usize) -> Result<Tensor> {
        let shape = self.shape().to_vec();
        if axis >= shape.len() || index >= shape[axis] {
            return Err(Error::Contract(format!(
                "select({axis}, {index}) out of range for shape {shape:?}"
            )));
        }
        let outer = numel(&shape[..axis]);
        let extent = shape[axis];
        let inner = numel(&shape[axis + 1..]);
        let mut data = Vec::with_capacity(outer * inner);
        {
            let d = self.data();
            for o in 0..outer {
                let start = (o * extent + index) * inner;
                data.extend_from_slice(&d[start..start + inner]);
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let total = self.numel();
        Ok(Tensor::from_op(data, out_shape, "select", vec![self.clone()], move |g| {
            let mut gx = vec![0.0; total];
            for o in 0..outer {
                let start = (o * extent + index) * inner;
                gx[start..start + inner].copy_from_slice(&g[o * inner..(o + 1) * inner]);
            }
            vec![Some(gx)]
        }))
    }

    /// Row lookup `table[ids]`, giving shape `[ids.len(), d]`.
    pub fn embedding(table: &Tensor, ids: &[usize]) -> Result<Tensor> {
        if table.ndim() != 2 {
            return Err(Error::Shape {
                op: "embedding",
                lhs: table.shape().to_vec(),
                rhs: vec![ids.len()],
            });
        }
        let (v, d) = (table.shape()[0], table.shape()[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Contract(format!("token id {bad} >= vocab size {v}")));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        {
            let t = table.data();
            for &i in ids {
                data.extend_from_slice(&t[i * d..(i + 1) * d]);
            }
        }
        let ids = ids.to_vec();
        Ok(Tensor::from_op(
            data,
            vec![ids.len(), d],
            "embedding",
            vec![table.clone()],
            move |g| {
                let mut gt = vec![0.0; v * d];
                for (r, &i) in ids.iter().enumerate() {
                    for (a, b) in gt[i * d..(i + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]) {
                        *a += b;
                    }
                }
                vec![Some(gt)]
            },
        ))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        let d = *self.shape().last().unwrap_or(&0);
        if gamma.shape() != [d] || beta.shape() != [d] {
            return Err(Error::Shape {
                op: "layer_norm",
                lhs: self.shape().to_vec(),
                rhs: gamma.shape().to_vec(),
            });
        }
        let rows = self.numel() / d.max(1);
        let mut xhat = vec![0.0; self.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; self.numel()];
        {
            let x = self.data();
            let gm = gamma.data();
            let bt = beta.data();
            for r in 0..rows {
                let row = &x[r * d..(r + 1) * d];
                let mu = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
                let is = 1.0 / (var + eps).sqrt();
                inv_std[r] = is;
                for j in 0..d {
                    let h = (row[j] - mu) * is;
                    xhat[r * d + j] = h;
                    out[r * d + j] = h * gm[j] + bt[j];
                }
            }
        }
        let (gc, bc) = (gamma.clone(), beta.clone());
        let x_needs = self.requires_grad();
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            "layer_norm",
            vec![self.clone(), gamma.clone(), beta.clone()],
            move |g| {
                let gm = gc.data();
                let gx = x_needs.then(|| {
                    let mut gx = vec![0.0; g.len()];
                    for r in 0..rows {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..d {
                            let dh = gr[j] * gm[j];
                            m1 += dh;
                            m2 += dh * hr[j];
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        for j in 0..d {
                            let dh = gr[j] * gm[j];
                            gx[r * d + j] = inv_std[r] * (dh - m1 - hr[j] * m2);
                        }
                    }
                    gx
                });
                let ggamma = gc.requires_grad().then(|| {
                    let mut v = vec![0.0; d];
                    for r in 0..rows {
                        for j in 0..d {
                            v[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                    v
                });
                let gbeta = bc.requires_grad().then(|| {
                    let mut v = vec![0.0; d];
                    for r in 0..rows {
                        for j in 0..d {
                            v[j] += g[r * d + j];
                        }
                    }
                    v
                });
                vec![gx, ggamma, gbeta]
            },
        ))
    }
}

fn operand(d: &[f64], rows: usize, cols: usize, trans: bool) -> Mat<'_> {
    let m = Mat::new(d, rows, cols);
    if trans {
        m.t()
    } else {
        m
    }
}

fn permute_data(data: &[f64], shape: &[usize], axes: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let nd = shape.len();
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let mut in_strides = vec![1usize; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    if n == 0 {
        return (out, out_shape);
    }
    let mut idx = vec![0usize; nd];
    let mut off = 0usize;
    for _ in 0..n {
        out.push(data[off]);
        for d in (0..nd).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out, out_shape)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(data: &[f64], shape: &[usize]) -> Tensor {
        Tensor::new(data.to_vec(), shape).unwrap()
    }

    fn close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn identity_matmul() {
        let i = t(&[1.0, 0.0, 0.0, 1.0], &[2, 2]);
        let m = t(&[1.0, 2.0, 3.0, 4.0], &[2, 2]);
        assert_eq!(i.matmul(&m).unwrap().to_vec(), vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn inner_product_matmul() {
        let a = t(&[1.0, 2.0], &[1, 2]);
        let b = t(&[3.0, 4.0], &[2, 1]);
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[1, 1]);
        assert_eq!(c.to_vec(), vec![11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let err = a.matmul(&b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
        assert!(matches!(a.matmul(&b), Err(Error::Shape { .. })));
    }

    #[test]
    fn matmul_nt_matches_explicit_transpose() {
        let a = t(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]);
        let b = t(&[1.0, 0.0, -1.0, 2.0, 1.0, 0.5], &[2, 3]);
        let bt = b.permute(&[1, 0]).unwrap();
        close(&a.matmul_nt(&b).unwrap().to_vec(), &a.matmul(&bt).unwrap().to_vec(), 1e-14);
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(t(&[0.0, 0.0], &[2]).softmax_last().unwrap().to_vec(), vec![0.5, 0.5]);
        let s = t(&[1.0, 2.0, 3.0], &[3]).softmax_last().unwrap().to_vec();
        close(&s, &[0.090031, 0.244728, 0.665241], 5e-7);
        let s = t(&[1.0, 2.0, f64::NEG_INFINITY], &[3]).softmax_last().unwrap().to_vec();
        close(&s, &[0.268941, 0.731059, 0.0], 5e-7);
        assert_eq!(s[2], 0.0);
    }

    #[test]
    fn softmax_all_neg_inf_row_is_degenerate() {
        let x = t(&[0.0, 1.0, f64::NEG_INFINITY, f64::NEG_INFINITY], &[2, 2]);
        assert!(matches!(x.softmax_last(), Err(Error::DegenerateRow(_))));
    }

    #[test]
    fn masked_fill_example_and_gradient() {
        let x = Tensor::param(vec![1.0, 2.0, 3.0], &[3]).unwrap();
        let y = x.masked_fill(&[true, true, false], f64::NEG_INFINITY).unwrap();
        assert_eq!(y.to_vec(), vec![1.0, 2.0, f64::NEG_INFINITY]);
        x.masked_fill(&[true, true, false], 0.0).unwrap().sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0, 0.0]);
    }

    #[test]
    fn exp_log_inverse() {
        let x = t(&[0.1, 1.0, 7.5, 123.0], &[4]);
        close(&x.log().exp().to_vec(), &x.to_vec(), 1e-12 * 123.0);
    }

    #[test]
    fn div_by_zero_is_numeric_error() {
        let a = t(&[1.0, 2.0], &[2]);
        let b = t(&[1.0, 0.0], &[2]);
        assert!(matches!(a.div(&b), Err(Error::Numeric(_))));
    }

    #[test]
    fn broadcasting_rules() {
        let x = t(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]);
        let bias = t(&[10.0, 20.0, 30.0], &[3]);
        assert_eq!(x.add(&bias).unwrap().to_vec(), vec![11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
        let rows = t(&[1.0, 2.0], &[2, 1]);
        assert_eq!(x.div(&rows).unwrap().to_vec(), vec![1.0, 2.0, 3.0, 2.0, 2.5, 3.0]);
        let col = t(&[1.0, 2.0, 3.0], &[1, 3]);
        assert_eq!(x.mul(&col).unwrap().to_vec(), vec![1.0, 4.0, 9.0, 4.0, 10.0, 18.0]);
        // lhs never broadcasts
        assert!(bias.add(&x).is_err());
        assert!(x.add(&t(&[1.0, 2.0], &[2])).is_err());
    }

    #[test]
    fn general_broadcast_reduces_gradient() {
        let x = Tensor::param(vec![1.0; 12], &[2, 2, 3]).unwrap();
        let b = Tensor::param(vec![1.0, 2.0], &[2, 1, 1]).unwrap();
        let y = x.mul(&b).unwrap();
        assert_eq!(&y.to_vec()[..6], &[1.0; 6]);
        assert_eq!(&y.to_vec()[6..], &[2.0; 6]);
        y.sum().backward().unwrap();
        assert_eq!(b.grad().unwrap(), vec![6.0, 6.0]);
    }

    #[test]
    fn permute_round_trip() {
        let data: Vec<f64> = (0..24).map(f64::from).collect();
        let x = t(&data, &[2, 3, 4]);
        let p = x.permute(&[1, 0, 2]).unwrap();
        assert_eq!(p.shape(), &[3, 2, 4]);
        // element [i, j, k] of x lands at [j, i, k]
        assert_eq!(p.data()[(2 * 2 + 1) * 4 + 3], x.data()[(3 + 2) * 4 + 3]);
        let back = p.permute(&[1, 0, 2]).unwrap();
        assert_eq!(back.to_vec(), data);
        assert!(x.permute(&[0, 0, 1]).is_err());
    }

    #[test]
    fn select_and_embedding() {
        let x = t(&(0..12).map(f64::from).collect::<Vec<_>>(), &[2, 3, 2]);
        assert_eq!(x.select(1, 0).unwrap().to_vec(), vec![0.0, 1.0, 6.0, 7.0]);
        let table = Tensor::param((0..6).map(f64::from).collect(), &[3, 2]).unwrap();
        let e = Tensor::embedding(&table, &[2, 0, 2]).unwrap();
        assert_eq!(e.to_vec(), vec![4.0, 5.0, 0.0, 1.0, 4.0, 5.0]);
        e.sum().backward().unwrap();
        assert_eq!(table.grad().unwrap(), vec![1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
        assert!(Tensor::embedding(&table, &[3]).is_err());
    }

    #[test]
    fn layer_norm_normalizes() {
        let x = t(&[1.0, 2.0, 3.0, 4.0, -1.0, 0.0, 1.0, 8.0], &[2, 4]);
        let y = x
            .layer_norm(&Tensor::full(&[4], 1.0), &Tensor::zeros(&[4]), 0.0)
            .unwrap()
            .to_vec();
        for row in y.chunks(4) {
            let mu: f64 = row.iter().sum::<f64>() / 4.0;
            let var: f64 = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / 4.0;
            assert!(mu.abs() < 1e-12 && (var - 1.0).abs() < 1e-12);
        }
    }
}
