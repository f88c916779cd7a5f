use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::tensor::Tensor;

pub(crate) fn normal_vec(rng: &mut impl Rng, n: usize, std: f64) -> Vec<f64> {
    let dist = Normal::new(0.0, std).expect("finite std");
    (0..n).map(|_| dist.sample(rng)).collect()
}

/// Affine map `x·Wᵀ + b` with `W` stored `[d_out, d_in]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub(crate) fn frozen(rng: &mut impl Rng, d_in: usize, d_out: usize) -> Result<Linear> {
        let w = normal_vec(rng, d_out * d_in, 1.0 / (d_in as f64).sqrt());
        let b = normal_vec(rng, d_out, 0.02);
        Ok(Linear {
            weight: Tensor::new(w, &[d_out, d_in])?,
            bias: Tensor::new(b, &[d_out])?,
        })
    }

    pub fn d_in(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn d_out(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.matmul_nt(&self.weight)?.add(&self.bias)
    }
}

/// Frozen base layer plus a trainable `(alpha/r)·B·A` delta.
#[derive(Debug, Clone)]
pub struct LoraLinear {
    pub base: Linear,
    /// `[r, d_in]`
    pub a: Tensor,
    /// `[d_out, r]`, zero at initialization
    pub b: Tensor,
    pub rank: usize,
    pub alpha: f64,
}

impl LoraLinear {
    pub fn new(base: Linear, rank: usize, alpha: f64, rng: &mut impl Rng) -> Result<LoraLinear> {
        let (d_in, d_out) = (base.d_in(), base.d_out());
        Ok(LoraLinear {
            a: Tensor::param(normal_vec(rng, rank * d_in, 0.02), &[rank, d_in])?,
            b: Tensor::param(vec![0.0; d_out * rank], &[d_out, rank])?,
            base,
            rank,
            alpha,
        })
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let delta = x.matmul_nt(&self.a)?.matmul_nt(&self.b)?.scale(self.scaling());
        self.base.forward(x)?.add(&delta)
    }
}
