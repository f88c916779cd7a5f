//! Dropout at the five framework positions.
//!
//! Every op takes explicit masks. Mask lists hold
//! either one plan shared by every leading index or one plan per `[rows, cols]`
//! grid of the input, in row-major order of the leading axes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{check_rate, sample_mask, AxisSemantics, MaskPlan, StructuralPattern};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Position {
    /// DropKey: additive -inf mask before softmax
    AttnLogits,
    /// DropAttention: zero weights after softmax, renormalize rows
    AttnWeights,
    /// HiddenCut on the FFN intermediate activation
    FfnHidden,
    /// Cutoff on input embeddings
    InputEmbed,
    /// Standard dropout on the pooled representation
    OutputRepr,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rescale {
    Normalized,
    InvertedRate,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerScope {
    #[default]
    AllLayers,
    LatterHalf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Train,
    Infer,
}

/// One point of the design space: position × pattern × rate × rescale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DropoutSpec {
    pub position: Position,
    pub pattern: StructuralPattern,
    pub rate: f64,
    pub rescale: Rescale,
    #[serde(default)]
    pub grad_stop_denominator: bool,
    #[serde(default)]
    pub layer_scope: LayerScope,
}

impl DropoutSpec {
    pub fn drop_key(pattern: StructuralPattern, rate: f64) -> Self {
        DropoutSpec {
            position: Position::AttnLogits,
            pattern,
            rate,
            rescale: Rescale::None,
            grad_stop_denominator: false,
            layer_scope: LayerScope::AllLayers,
        }
    }

    pub fn drop_attention(pattern: StructuralPattern, rate: f64, grad_stop: bool) -> Self {
        DropoutSpec {
            position: Position::AttnWeights,
            rescale: Rescale::Normalized,
            grad_stop_denominator: grad_stop,
            ..Self::drop_key(pattern, rate)
        }
    }

    pub fn hidden_cut(pattern: StructuralPattern, rate: f64) -> Self {
        DropoutSpec {
            position: Position::FfnHidden,
            rescale: Rescale::InvertedRate,
            ..Self::drop_key(pattern, rate)
        }
    }

    pub fn input_cutoff(pattern: StructuralPattern, rate: f64) -> Self {
        DropoutSpec {
            position: Position::InputEmbed,
            ..Self::hidden_cut(pattern, rate)
        }
    }

    pub fn output_dropout(rate: f64) -> Self {
        DropoutSpec {
            position: Position::OutputRepr,
            ..Self::hidden_cut(StructuralPattern::Element, rate)
        }
    }

    pub fn with_scope(mut self, scope: LayerScope) -> Self {
        self.layer_scope = scope;
        self
    }

    pub fn validate(&self) -> Result<()> {
        check_rate(self.rate)?;
        let expected = match self.position {
            Position::AttnLogits => Some(Rescale::None),
            Position::AttnWeights => Some(Rescale::Normalized),
            Position::FfnHidden | Position::InputEmbed | Position::OutputRepr => {
                Some(Rescale::InvertedRate)
            }
            Position::None => None,
        };
        if let Some(r) = expected {
            if r != self.rescale {
                return Err(Error::Config(format!(
                    "{:?} requires rescale {:?}, got {:?}",
                    self.position, r, self.rescale
                )));
            }
        }
        if self.grad_stop_denominator && self.rescale != Rescale::Normalized {
            return Err(Error::Config(
                "grad_stop_denominator only applies to normalized rescaling".into(),
            ));
        }
        if self.position == Position::OutputRepr && self.pattern != StructuralPattern::Element {
            return Err(Error::Config("output dropout is element-wise only".into()));
        }
        Ok(())
    }

    /// Whether a per-layer position fires in `layer` of `num_layers`.
    pub fn applies_to_layer(&self, layer: usize, num_layers: usize) -> bool {
        match self.layer_scope {
            LayerScope::AllLayers => true,
            LayerScope::LatterHalf => layer >= num_layers.div_ceil(2),
        }
    }

    pub fn is_active(&self, mode: Mode) -> bool {
        mode == Mode::Train && self.rate > 0.0 && self.position != Position::None
    }
}

/// Flattens masks to a keep vector matching `shape = [.., rows, cols]`.
pub fn expand_masks(shape: &[usize], masks: &[MaskPlan]) -> Result<Vec<bool>> {
    let mismatch = |rhs: Vec<usize>| Error::Shape {
        op: "mask",
        lhs: shape.to_vec(),
        rhs,
    };
    if shape.len() < 2 || masks.is_empty() {
        return Err(mismatch(vec![masks.len()]));
    }
    let rows = shape[shape.len() - 2];
    let cols = shape[shape.len() - 1];
    let grids: usize = shape[..shape.len() - 2].iter().product();
    if masks.len() != 1 && masks.len() != grids {
        return Err(mismatch(vec![masks.len(), rows, cols]));
    }
    if let Some(m) = masks.iter().find(|m| m.rows() != rows || m.cols() != cols) {
        return Err(mismatch(vec![m.rows(), m.cols()]));
    }
    let mut keep = Vec::with_capacity(grids * rows * cols);
    for g in 0..grids {
        let m = if masks.len() == 1 { &masks[0] } else { &masks[g] };
        keep.extend_from_slice(m.keep());
    }
    Ok(keep)
}

fn keep_tensor(shape: &[usize], keep: &[bool], kept_value: f64) -> Result<Tensor> {
    Tensor::new(
        keep.iter().map(|&k| if k { kept_value } else { 0.0 }).collect(),
        shape,
    )
}

/// DropKey: dropped logits become `-inf`, so the following softmax gives
/// them exactly zero weight and no gradient reaches them.
pub fn drop_key(logits: &Tensor, masks: &[MaskPlan]) -> Result<Tensor> {
    let keep = expand_masks(logits.shape(), masks)?;
    let cols = *logits.shape().last().unwrap();
    if let Some(r) = keep.chunks(cols).position(|row| row.iter().all(|k| !*k)) {
        return Err(Error::DegenerateRow(format!("drop_key row {r} drops every key")));
    }
    logits.masked_fill(&keep, f64::NEG_INFINITY)
}

/// DropAttention: zero dropped weights and divide each row by its surviving
/// mass. With `grad_stop` the denominator is treated as a constant.
pub fn drop_attention(weights: &Tensor, masks: &[MaskPlan], grad_stop: bool) -> Result<Tensor> {
    let keep = expand_masks(weights.shape(), masks)?;
    let masked = weights.mul(&keep_tensor(weights.shape(), &keep, 1.0)?)?;
    let denom = masked.sum_last();
    if let Some(r) = denom.data().iter().position(|&s| s.is_nan() || s < 1e-300) {
        return Err(Error::DegenerateRow(format!(
            "drop_attention row {r} keeps no attention mass"
        )));
    }
    let denom = if grad_stop { denom.detach() } else { denom };
    masked.div(&denom)
}

fn inverted_rate(x: &Tensor, masks: &[MaskPlan], rate: f64) -> Result<Tensor> {
    check_rate(rate)?;
    if rate == 0.0 {
        return Ok(x.clone());
    }
    let keep = expand_masks(x.shape(), masks)?;
    x.mul(&keep_tensor(x.shape(), &keep, 1.0 / (1.0 - rate))?)
}

/// HiddenCut: zero dropped hidden entries and scale survivors by 1/(1-rate).
pub fn hidden_cut(h: &Tensor, masks: &[MaskPlan], rate: f64) -> Result<Tensor> {
    inverted_rate(h, masks, rate)
}

/// Cutoff on the embedding sequence; same contract as [`hidden_cut`].
pub fn input_cutoff(embeddings: &Tensor, masks: &[MaskPlan], rate: f64) -> Result<Tensor> {
    inverted_rate(embeddings, masks, rate)
}

/// Element dropout over a `[.., D]` representation with 1/(1-rate) rescale.
pub fn output_dropout(repr: &Tensor, rate: f64, seed: u64) -> Result<Tensor> {
    check_rate(rate)?;
    if rate == 0.0 {
        return Ok(repr.clone());
    }
    let d = *repr.shape().last().ok_or_else(|| {
        Error::Contract("output_dropout needs at least one axis".into())
    })?;
    let rows = repr.numel() / d.max(1);
    let mask = sample_mask(rows, d, StructuralPattern::Element, rate, seed, AxisSemantics::Hidden)?;
    repr.mul(&keep_tensor(repr.shape(), mask.keep(), 1.0 / (1.0 - rate))?)
}
