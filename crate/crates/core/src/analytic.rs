//! Closed-form attention-weight derivatives under DropKey and DropAttention,
//! and a suite that checks them against the autodiff engine.
//!
//! Notation: `u` is a surviving (probe) logit, `m` a masked one. `S` is the
//! sum of exp over all logits, `S_keep` over survivors and `S_not_u` over all
//! logits except `u`. All exponentials are taken after subtracting the
//! maximum surviving logit, which leaves every ratio unchanged.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dropout::{drop_attention, drop_key};
use crate::error::{contract, Result};
use crate::mask::{AxisSemantics, MaskPlan, StructuralPattern};
use crate::tensor::Tensor;

/// ∂w'_u/∂g_m under DropKey: the masked logit is replaced by -inf, so it is
/// disconnected from every output.
pub const DWU_DGM_DROPKEY: f64 = 0.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitInstance {
    pub logits: Vec<f64>,
    /// Masked indices; the first one is the probed `m`.
    pub masked: Vec<usize>,
    pub probe: usize,
}

impl LogitInstance {
    pub fn new(logits: Vec<f64>, masked_index: usize, probe: usize) -> Result<Self> {
        Self::with_masks(logits, vec![masked_index], probe)
    }

    pub fn with_masks(logits: Vec<f64>, masked: Vec<usize>, probe: usize) -> Result<Self> {
        let inst = LogitInstance { logits, masked, probe };
        inst.validate()?;
        Ok(inst)
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.logits.len();
        if l < 2 {
            return contract("logit instance needs at least two logits");
        }
        if self.masked.is_empty() || self.masked.iter().any(|&m| m >= l) || self.probe >= l {
            return contract("masked/probe index out of range");
        }
        if self.masked.contains(&self.probe) {
            return contract("probe index must survive the mask");
        }
        let mut sorted = self.masked.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.masked.len() {
            return contract("duplicate masked index");
        }
        if self.logits.iter().any(|g| !g.is_finite()) {
            return contract("logits must be finite");
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logits.is_empty()
    }

    pub fn masked_index(&self) -> usize {
        self.masked[0]
    }

    pub fn keep(&self) -> Vec<bool> {
        (0..self.len()).map(|i| !self.masked.contains(&i)).collect()
    }

    pub fn survivors(&self) -> usize {
        self.len() - self.masked.len()
    }

    fn sums(&self) -> Sums {
        let keep = self.keep();
        let shift = self
            .logits
            .iter()
            .zip(&keep)
            .filter(|(_, k)| **k)
            .map(|(g, _)| *g)
            .fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = self.logits.iter().map(|g| (g - shift).exp()).collect();
        let all: f64 = e.iter().sum();
        let keep_sum: f64 = e.iter().zip(&keep).filter(|(_, k)| **k).map(|(v, _)| v).sum();
        let not_u: f64 = e.iter().enumerate().filter(|(i, _)| *i != self.probe).map(|(_, v)| v).sum();
        let others_kept: f64 = e
            .iter()
            .enumerate()
            .filter(|(i, _)| keep[*i] && *i != self.probe)
            .map(|(_, v)| v)
            .sum();
        Sums {
            eu: e[self.probe],
            em: e[self.masked_index()],
            all,
            keep: keep_sum,
            not_u,
            others_kept,
            masked_mass: all - keep_sum,
        }
    }

    fn as_mask(&self) -> MaskPlan {
        MaskPlan::from_grid(1, self.len(), self.keep(), StructuralPattern::Element, AxisSemantics::Attention)
            .expect("grid sized from instance")
    }
}

struct Sums {
    eu: f64,
    em: f64,
    all: f64,
    keep: f64,
    not_u: f64,
    others_kept: f64,
    masked_mass: f64,
}

/// w'_u under DropKey: exp(g_u) / S_keep.
pub fn wu_dropkey(inst: &LogitInstance) -> f64 {
    let s = inst.sums();
    s.eu / s.keep
}

/// w'_u under DropAttention: the softmax weight of `u` divided by the
/// surviving weight mass.
pub fn wu_dropattention(inst: &LogitInstance) -> f64 {
    let s = inst.sums();
    let w_u = s.eu / s.all;
    let kept_mass = s.keep / s.all;
    w_u / kept_mass
}

/// ∂w'_u/∂g_u under DropKey: exp(g_u)(S_keep - exp(g_u)) / S_keep².
pub fn dwu_dgu_dropkey(inst: &LogitInstance) -> f64 {
    let s = inst.sums();
    s.eu * s.others_kept / (s.keep * s.keep)
}

/// ∂w'_u/∂g_u under DropAttention with a gradient-stopped denominator:
/// exp(g_u) S_not_u / (S · S_keep).
pub fn dwu_dgu_dropattention_ng(inst: &LogitInstance) -> f64 {
    let s = inst.sums();
    s.eu * s.not_u / (s.all * s.keep)
}

/// ∂w'_u/∂g_m under DropAttention with a gradient-stopped denominator:
/// -exp(g_u) exp(g_m) / (S · S_keep).
pub fn dwu_dgm_dropattention_ng(inst: &LogitInstance) -> f64 {
    let s = inst.sums();
    -s.eu * s.em / (s.all * s.keep)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KRatio {
    pub k: f64,
    /// 1 - k, evaluated without cancellation.
    pub one_minus_k: f64,
    /// `u` is the only survivor, so the DropKey derivative vanishes.
    pub degenerate: bool,
}

/// k = (1 - exp(g_u)/S_keep) / (1 - exp(g_u)/S), the factor relating the
/// DropKey derivative of w'_u to the DropAttention+NoGrad one.
pub fn ratio_k(inst: &LogitInstance) -> KRatio {
    let s = inst.sums();
    if inst.survivors() == 1 {
        return KRatio { k: 0.0, one_minus_k: 1.0, degenerate: true };
    }
    // with A = other survivors, M = masked mass, e = exp(g_u):
    // k = A/(A+e) · (A+M+e)/(A+M),  1-k = eM / ((A+e)(A+M))
    let a = s.others_kept;
    let k = (a / s.keep) * (1.0 + s.eu / s.not_u);
    let one_minus_k = s.eu * s.masked_mass / ((a + s.eu) * (a + s.masked_mass));
    KRatio { k, one_minus_k, degenerate: false }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    /// max |softmax∘drop_key − drop_attention∘softmax| over the row, both
    /// gradient-stop settings
    pub max_forward_diff: f64,
    /// max |∇w'_u| difference between DropKey and DropAttention without
    /// gradient stop
    pub max_backward_diff_no_gradstop: f64,
    /// max difference between autodiff partials and the closed forms
    pub max_closed_form_diff: f64,
    pub k_closed_form: f64,
    pub k_empirical: f64,
    pub one_minus_k: f64,
    pub degenerate: bool,
    pub gm_grad_dropkey: f64,
    pub gm_grad_dropattention: f64,
}

enum Path {
    DropKey,
    DropAttention { grad_stop: bool },
}

/// Builds one path in the autodiff engine and returns (row values, ∇_g w'_u).
fn autodiff_row(inst: &LogitInstance, path: Path) -> Result<(Vec<f64>, Vec<f64>)> {
    let g = Tensor::param(inst.logits.clone(), &[1, inst.len()])?;
    let mask = [inst.as_mask()];
    let w = match path {
        Path::DropKey => drop_key(&g, &mask)?.softmax_last()?,
        Path::DropAttention { grad_stop } => drop_attention(&g.softmax_last()?, &mask, grad_stop)?,
    };
    w.select(1, inst.probe)?.sum().backward()?;
    Ok((w.to_vec(), g.grad().unwrap_or_else(|| vec![0.0; inst.len()])))
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Compares both computation paths and the closed forms on one instance.
pub fn verify_instance(inst: &LogitInstance) -> Result<EquivalenceReport> {
    inst.validate()?;
    let (w_dk, grad_dk) = autodiff_row(inst, Path::DropKey)?;
    let (w_da, grad_da) = autodiff_row(inst, Path::DropAttention { grad_stop: false })?;
    let (w_ng, grad_ng) = autodiff_row(inst, Path::DropAttention { grad_stop: true })?;
    let (u, m) = (inst.probe, inst.masked_index());

    let k = ratio_k(inst);
    let k_empirical = if k.degenerate { 0.0 } else { grad_dk[u] / grad_ng[u] };
    let closed = [
        (grad_dk[u], dwu_dgu_dropkey(inst)),
        (grad_dk[m], DWU_DGM_DROPKEY),
        (grad_ng[u], dwu_dgu_dropattention_ng(inst)),
        (grad_ng[m], dwu_dgm_dropattention_ng(inst)),
        (w_dk[u], wu_dropkey(inst)),
    ];
    Ok(EquivalenceReport {
        max_forward_diff: max_abs_diff(&w_dk, &w_da).max(max_abs_diff(&w_dk, &w_ng)),
        max_backward_diff_no_gradstop: max_abs_diff(&grad_dk, &grad_da),
        max_closed_form_diff: closed.iter().map(|(a, b)| (a - b).abs()).fold(0.0, f64::max),
        k_closed_form: k.k,
        k_empirical,
        one_minus_k: k.one_minus_k,
        degenerate: k.degenerate,
        gm_grad_dropkey: grad_dk[m],
        gm_grad_dropattention: grad_ng[m],
    })
}

/// ∂L/∂g_m for L = Σ_j c_j w'_j, under DropKey and DropAttention+NoGrad.
pub fn loss_grad_wrt_masked(inst: &LogitInstance, weights: &[f64]) -> Result<(f64, f64)> {
    let c = Tensor::new(weights.to_vec(), &[1, inst.len()])?;
    let mask = [inst.as_mask()];
    let mut out = [0.0; 2];
    for (slot, stop) in out.iter_mut().zip([None, Some(true)]) {
        let g = Tensor::param(inst.logits.clone(), &[1, inst.len()])?;
        let w = match stop {
            None => drop_key(&g, &mask)?.softmax_last()?,
            Some(s) => drop_attention(&g.softmax_last()?, &mask, s)?,
        };
        w.mul(&c)?.sum().backward()?;
        *slot = g.grad().map_or(0.0, |gr| gr[inst.masked_index()]);
    }
    Ok((out[0], out[1]))
}

pub const INSTANCE_LENGTHS: [usize; 6] = [2, 3, 4, 8, 16, 32];

/// Random instances: lengths from [`INSTANCE_LENGTHS`], logits ~ N(0, 2²),
/// and for about half of them (when l ≥ 3) several masked indices.
pub fn random_instances(count: usize, seed: u64) -> Vec<LogitInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 2.0).expect("valid normal");
    (0..count)
        .map(|_| {
            let l = INSTANCE_LENGTHS[rng.random_range(0..INSTANCE_LENGTHS.len())];
            let logits: Vec<f64> = (0..l).map(|_| normal.sample(&mut rng)).collect();
            let mut order: Vec<usize> = (0..l).collect();
            for i in (1..l).rev() {
                order.swap(i, rng.random_range(0..=i));
            }
            let n_masked = if l >= 3 && rng.random_bool(0.5) { rng.random_range(2..l) } else { 1 };
            let masked = order[..n_masked].to_vec();
            let probe = order[n_masked + rng.random_range(0..l - n_masked)];
            LogitInstance { logits, masked, probe }
        })
        .collect()
}

/// Sweep `g_m` over `points` values spanning ±`half_width` around its
/// current value and return k at each point.
pub fn k_sweep(inst: &LogitInstance, points: usize, half_width: f64) -> Vec<f64> {
    let m = inst.masked_index();
    let center = inst.logits[m];
    let mut probe = inst.clone();
    (0..points)
        .map(|i| {
            let t = if points > 1 { i as f64 / (points - 1) as f64 } else { 0.0 };
            probe.logits[m] = center - half_width + 2.0 * half_width * t;
            ratio_k(&probe).k
        })
        .collect()
}

/// Smallest softmax weight of the probed masked logit for which an instance
/// counts as generic in the gradient-noise check.
pub const GENERIC_MASKED_WEIGHT: f64 = 1e-6;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SuiteConfig {
    pub instances: usize,
    pub seed: u64,
    pub sweep_points: usize,
    pub sweep_half_width: f64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig { instances: 1000, seed: 20240601, sweep_points: 100, sweep_half_width: 10.0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub observed: f64,
    pub threshold: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SuiteReport {
    pub instances: usize,
    pub multi_mask_instances: usize,
    pub degenerate_instances: usize,
    pub generic_instances: usize,
    pub checks: Vec<CheckResult>,
    pub passed: bool,
}

/// Runs the full equivalence / gradient-ratio / gradient-noise suite.
pub fn run_suite(cfg: &SuiteConfig) -> Result<SuiteReport> {
    let instances = random_instances(cfg.instances, cfg.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);

    let mut fwd: f64 = 0.0;
    let mut bwd: f64 = 0.0;
    let mut closed: f64 = 0.0;
    let mut k_gap: f64 = 0.0;
    let mut k_min = f64::INFINITY;
    let mut k_max = f64::NEG_INFINITY;
    let mut min_one_minus_k = f64::INFINITY;
    let mut monotone_violation: f64 = 0.0;
    let mut dk_gm: f64 = 0.0;
    let mut da_gm_min = f64::INFINITY;
    let mut forward_identity: f64 = 0.0;
    let (mut degenerate, mut generic) = (0, 0);

    for inst in &instances {
        let r = verify_instance(inst)?;
        fwd = fwd.max(r.max_forward_diff);
        bwd = bwd.max(r.max_backward_diff_no_gradstop);
        closed = closed.max(r.max_closed_form_diff);
        forward_identity = forward_identity.max((wu_dropkey(inst) - wu_dropattention(inst)).abs());
        k_min = k_min.min(r.k_closed_form);
        k_max = k_max.max(r.k_closed_form);
        if r.degenerate {
            degenerate += 1;
        } else {
            k_gap = k_gap.max((r.k_empirical - r.k_closed_form).abs());
            min_one_minus_k = min_one_minus_k.min(r.one_minus_k);
        }
        let sweep = k_sweep(inst, cfg.sweep_points, cfg.sweep_half_width);
        for w in sweep.windows(2) {
            monotone_violation = monotone_violation.max(w[1] - w[0]);
        }

        let c: Vec<f64> = (0..inst.len()).map(|_| rng.random_range(0.5..1.5)).collect();
        let (g_dk, g_da) = loss_grad_wrt_masked(inst, &c)?;
        dk_gm = dk_gm.max(g_dk.abs());
        let s = inst.sums();
        if s.em / s.all >= GENERIC_MASKED_WEIGHT {
            generic += 1;
            da_gm_min = da_gm_min.min(g_da.abs());
        }
    }

    let check = |name: &str, passed: bool, observed: f64, threshold: f64| CheckResult {
        name: name.to_string(),
        passed,
        observed,
        threshold,
    };
    let checks = vec![
        check("forward_equivalence_max_abs", fwd <= 1e-12, fwd, 1e-12),
        check("closed_form_wu_identity", forward_identity <= 1e-12, forward_identity, 1e-12),
        check("k_empirical_vs_closed_form", k_gap <= 1e-10, k_gap, 1e-10),
        check("k_min_nonnegative", k_min >= 0.0, k_min, 0.0),
        check("k_max_below_one", k_max < 1.0 && min_one_minus_k > 0.0, k_max, 1.0),
        check("k_non_increasing_in_gm", monotone_violation <= 0.0, monotone_violation, 0.0),
        check("closed_forms_vs_autodiff", closed <= 1e-10, closed, 1e-10),
        check("dropkey_masked_grad_zero", dk_gm == 0.0, dk_gm, 0.0),
        check("dropattention_masked_grad_nonzero", da_gm_min > 1e-8, da_gm_min, 1e-8),
        check("backward_equivalence_no_gradstop", bwd <= 1e-10, bwd, 1e-10),
    ];
    let passed = checks.iter().all(|c| c.passed);
    Ok(SuiteReport {
        instances: instances.len(),
        multi_mask_instances: instances.iter().filter(|i| i.masked.len() > 1).count(),
        degenerate_instances: degenerate,
        generic_instances: generic,
        checks,
        passed,
    })
}
