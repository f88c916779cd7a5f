use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::dropout::{DropoutSpec, Position};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Classifier { num_classes: usize },
    Regressor,
}

impl HeadKind {
    pub fn outputs(&self) -> usize {
        match self {
            HeadKind::Classifier { num_classes } => *num_classes,
            HeadKind::Regressor => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub d_model: usize,
    pub num_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub head: HeadKind,
    /// Seed of the frozen random backbone (shared across run seeds).
    #[serde(default)]
    pub backbone_seed: u64,
    /// Supplied by the experiment config's top-level `dropout_specs`.
    #[serde(skip)]
    pub dropout_specs: Vec<DropoutSpec>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_layers: 2,
            d_model: 32,
            num_heads: 4,
            d_ff: 64,
            vocab_size: 16,
            max_len: 16,
            lora_rank: 2,
            lora_alpha: 4.0,
            head: HeadKind::Classifier { num_classes: 2 },
            backbone_seed: 7,
            dropout_specs: Vec::new(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_layers == 0 || self.d_model == 0 || self.num_heads == 0 || self.d_ff == 0 {
            return bad("model extents must be positive".into());
        }
        if self.vocab_size == 0 || self.max_len == 0 {
            return bad("vocab_size and max_len must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.num_heads) {
            return bad(format!(
                "d_model {} not divisible by num_heads {}",
                self.d_model, self.num_heads
            ));
        }
        if self.lora_rank == 0 {
            return Err(Error::Contract("LoRA rank must be at least 1".into()));
        }
        if !self.lora_alpha.is_finite() {
            return bad("lora_alpha must be finite".into());
        }
        if let HeadKind::Classifier { num_classes } = self.head {
            if num_classes < 2 {
                return bad("a classifier needs at least two classes".into());
            }
        }
        let mut seen = HashSet::new();
        for spec in &self.dropout_specs {
            spec.validate()?;
            if spec.position != Position::None && !seen.insert(spec.position) {
                return bad(format!("duplicate dropout spec for {:?}", spec.position));
            }
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.num_heads
    }

    pub fn spec_for(&self, position: Position) -> Option<&DropoutSpec> {
        self.dropout_specs.iter().find(|s| s.position == position)
    }

    /// LoRA adapter parameters: A (r×d_in) and B (d_out×r) on the key and
    /// value projections of every layer.
    pub fn adapter_parameter_count(&self) -> usize {
        let r = self.lora_rank;
        let d = self.d_model;
        2 * self.num_layers * (r * d + d * r)
    }

    pub fn head_parameter_count(&self) -> usize {
        let c = self.head.outputs();
        c * self.d_model + c
    }

    pub fn trainable_parameter_count(&self) -> usize {
        self.adapter_parameter_count() + self.head_parameter_count()
    }

    /// Frozen backbone parameters (embeddings, projections, FFN, norms).
    pub fn frozen_parameter_count(&self) -> usize {
        let d = self.d_model;
        let f = self.d_ff;
        let embed = self.vocab_size * d + self.max_len * d + 2 * d;
        let attn = 4 * (d * d + d);
        let ffn = d * f + f + f * d + d;
        let norms = 4 * d;
        embed + self.num_layers * (attn + ffn + norms)
    }
}
