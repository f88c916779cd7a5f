//! Central finite differences, used as an independent oracle for `backward`.

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{contract, Result};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// Finite-difference step.
    pub step: f64,
    /// Maximum accepted relative error.
    pub rel_tol: f64,
    /// Lower bound on the relative-error denominator. Entries whose true
    /// gradient is below this are judged on absolute error scaled by it.
    pub denom_floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            rel_tol: 1e-6,
            denom_floor: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub parameter_name: String,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn compare(name: &str, analytic: &[f64], numeric: &[f64], cfg: &GradCheckConfig) -> Self {
        assert_eq!(analytic.len(), numeric.len());
        let mut max_rel: f64 = 0.0;
        let mut max_abs: f64 = 0.0;
        for (&a, &n) in analytic.iter().zip(numeric) {
            let abs = (a - n).abs();
            let rel = abs / a.abs().max(n.abs()).max(cfg.denom_floor);
            // NaN must fail the check, so propagate it explicitly
            max_abs = if abs.is_nan() { f64::NAN } else { max_abs.max(abs) };
            max_rel = if rel.is_nan() || max_rel.is_nan() { f64::NAN } else { max_rel.max(rel) };
        }
        GradCheckReport {
            parameter_name: name.to_string(),
            max_rel_error: max_rel,
            max_abs_error: max_abs,
            passed: max_rel <= cfg.rel_tol,
        }
    }
}

/// Central differences `(f(x + h e_i) - f(x - h e_i)) / 2h` for every
/// coordinate of `x`. `x` is perturbed in place and restored afterwards.
pub fn finite_diff_grad(
    x: &Tensor,
    step: f64,
    mut f: impl FnMut(&Tensor) -> Result<f64>,
) -> Result<Tensor> {
    if step <= 0.0 {
        return contract("finite-difference step must be positive");
    }
    let n = x.numel();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let orig = x.data()[i];
        x.data_mut()[i] = orig + step;
        let plus = f(x);
        x.data_mut()[i] = orig - step;
        let minus = f(x);
        x.data_mut()[i] = orig;
        out.push((plus? - minus?) / (2.0 * step));
    }
    Tensor::new(out, x.shape())
}

/// Compares `backward` against central differences for every named
/// parameter. `loss` rebuilds the scalar objective from the current
/// parameter values; it must be deterministic.
pub fn check_gradients(
    params: &[(String, Tensor)],
    mut loss: impl FnMut() -> Result<Tensor>,
    cfg: &GradCheckConfig,
) -> Result<Vec<GradCheckReport>> {
    for (_, p) in params {
        p.zero_grad();
    }
    loss()?.backward()?;
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|(_, p)| p.grad().unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();
    let mut reports = Vec::with_capacity(params.len());
    for ((name, p), a) in params.iter().zip(&analytic) {
        let numeric = finite_diff_grad(p, cfg.step, |_| Ok(loss()?.item()))?;
        reports.push(GradCheckReport::compare(name, a, &numeric.data(), cfg));
    }
    Ok(reports)
}
