//! Task losses, consistency measures and the twin-pass step.

use serde::{Deserialize, Serialize};

use crate::dropout::Mode;
use crate::error::{Error, Result};
use crate::mask::derive_seed;
use crate::model::{ForwardOptions, HeadKind, Model, TokenBatch};
use crate::tensor::{NoGradGuard, Tensor};

/// Probability floor applied before every logarithm.
pub const PROB_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompensationKind {
    #[default]
    None,
    KlBidirectional,
    JsToInference,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompensationSpec {
    pub kind: CompensationKind,
    #[serde(default)]
    pub weight: f64,
}

impl CompensationSpec {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn kl(weight: f64) -> Self {
        CompensationSpec { kind: CompensationKind::KlBidirectional, weight }
    }

    pub fn js(weight: f64) -> Self {
        CompensationSpec { kind: CompensationKind::JsToInference, weight }
    }

    /// Whether a second forward pass is needed.
    pub fn is_active(&self) -> bool {
        self.kind != CompensationKind::None && self.weight != 0.0
    }

    pub fn validate(&self) -> Result<()> {
        if !self.weight.is_finite() || self.weight < 0.0 {
            return Err(Error::Config(format!("compensation weight {} must be finite and >= 0", self.weight)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Classes(Vec<usize>),
    Values(Vec<f64>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Classes(c) => c.len(),
            Targets::Values(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn check_distributions(p: &Tensor, q: &Tensor) -> Result<()> {
    if p.shape() != q.shape() || p.ndim() == 0 {
        return Err(Error::Contract(format!(
            "distribution shapes differ: {:?} vs {:?}",
            p.shape(),
            q.shape()
        )));
    }
    let c = *p.shape().last().unwrap();
    for t in [p, q] {
        for row in t.data().chunks(c) {
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-9 || row.iter().any(|v| v.is_nan() || *v < 0.0) {
                return Err(Error::Contract(format!("row {row:?} is not a distribution")));
            }
        }
    }
    Ok(())
}

/// Row-wise `D_KL(p‖q)` averaged over leading axes.
fn kl_rows(p: &Tensor, q: &Tensor) -> Result<Tensor> {
    let lp = p.clamp_min(PROB_EPS).log();
    let lq = q.clamp_min(PROB_EPS).log();
    let rows = (p.numel() / p.shape().last().unwrap()).max(1);
    Ok(p.mul(&lp.sub(&lq)?)?.sum().scale(1.0 / rows as f64))
}

/// `½(D_KL(P1‖P2) + D_KL(P2‖P1))`, averaged over rows.
pub fn kl_bidirectional(p1: &Tensor, p2: &Tensor) -> Result<Tensor> {
    check_distributions(p1, p2)?;
    Ok(kl_rows(p1, p2)?.add(&kl_rows(p2, p1)?)?.scale(0.5))
}

/// `D_KL(P_train‖P̄)` with the inference distribution detached.
pub fn js_to_inference(p_train: &Tensor, p_infer: &Tensor) -> Result<Tensor> {
    check_distributions(p_train, p_infer)?;
    kl_rows(p_train, &p_infer.detach())
}

/// Mean squared distance, the regression stand-in for the KL terms.
pub fn mse(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::Contract(format!("mse shapes differ: {:?} vs {:?}", a.shape(), b.shape())));
    }
    let d = a.sub(b)?;
    Ok(d.mul(&d)?.mean())
}

/// Cross-entropy on `[B, C]` probabilities or MSE on `[B]` predictions.
pub fn task_loss(output: &Tensor, targets: &Targets) -> Result<Tensor> {
    match targets {
        Targets::Classes(ys) => {
            if output.ndim() != 2 || output.shape()[0] != ys.len() {
                return Err(Error::Contract(format!(
                    "{} class targets for output {:?}",
                    ys.len(),
                    output.shape()
                )));
            }
            let c = output.shape()[1];
            if let Some(&y) = ys.iter().find(|&&y| y >= c) {
                return Err(Error::Contract(format!("class {y} out of range for {c} classes")));
            }
            let mut onehot = vec![0.0; ys.len() * c];
            for (i, &y) in ys.iter().enumerate() {
                onehot[i * c + y] = 1.0;
            }
            let picked = output.mul(&Tensor::new(onehot, output.shape())?)?.sum_last();
            Ok(picked.clamp_min(PROB_EPS).log().mean().scale(-1.0))
        }
        Targets::Values(ys) => {
            if output.shape() != [ys.len()] {
                return Err(Error::Contract(format!(
                    "{} regression targets for output {:?}",
                    ys.len(),
                    output.shape()
                )));
            }
            mse(output, &Tensor::new(ys.clone(), &[ys.len()])?)
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct TwinPassOptions {
    /// Reuse branch 1's mask seed for branch 2.
    pub share_masks: bool,
    /// Skip the backward pass (evaluation of the objective only).
    pub skip_backward: bool,
}

#[derive(Debug, Clone)]
pub struct TwinPassResult {
    pub task_loss: f64,
    pub consistency_loss: f64,
    pub total_loss: f64,
    /// Branch-1 distribution (classification) or pooled representation.
    pub p1: Vec<f64>,
    /// Branch-2 counterpart, absent for single-pass steps.
    pub p2: Option<Vec<f64>>,
    /// Branch-1 head output, for training metrics.
    pub output: Vec<f64>,
    pub forward_passes: usize,
}

/// One training objective evaluation: branch 1 in train mode carries the
/// task loss; branch 2 (train mode for KL, inference mode for JS) runs
/// without a graph. Gradients are accumulated into the model's trainable
/// parameters unless `skip_backward`.
pub fn twin_pass_step(
    model: &Model,
    batch: &TokenBatch,
    targets: &Targets,
    compensation: &CompensationSpec,
    step_seed: u64,
    opts: TwinPassOptions,
) -> Result<TwinPassResult> {
    compensation.validate()?;
    let seed1 = derive_seed(&[step_seed, 1]);
    let seed2 = if opts.share_masks { seed1 } else { derive_seed(&[step_seed, 2]) };
    let regression = model.config().head == HeadKind::Regressor;

    let b1 = model.forward(batch, Mode::Train, seed1, ForwardOptions::default())?;
    let task = task_loss(&b1.output, targets)?;
    let rep1 = if regression { &b1.pooled } else { &b1.output };

    let mut forward_passes = 1;
    let (total, consistency, p2) = if compensation.is_active() {
        let mode2 = match compensation.kind {
            CompensationKind::JsToInference => Mode::Infer,
            _ => Mode::Train,
        };
        let b2 = {
            let _guard = NoGradGuard::new();
            model.forward(batch, mode2, seed2, ForwardOptions::default())?
        };
        forward_passes += 1;
        let rep2 = if regression { b2.pooled } else { b2.output }.detach();
        let cons = match (regression, compensation.kind) {
            (true, _) => mse(rep1, &rep2)?,
            (false, CompensationKind::KlBidirectional) => kl_bidirectional(rep1, &rep2)?,
            (false, _) => js_to_inference(rep1, &rep2)?,
        };
        let total = task.add(&cons.scale(compensation.weight))?;
        (total, cons.item(), Some(rep2.to_vec()))
    } else {
        (task.clone(), 0.0, None)
    };

    if !opts.skip_backward && total.requires_grad() {
        total.backward()?;
    }
    Ok(TwinPassResult {
        task_loss: task.item(),
        consistency_loss: consistency,
        total_loss: total.item(),
        p1: rep1.to_vec(),
        p2,
        output: b1.output.to_vec(),
        forward_passes,
    })
}
