use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::optim::OptimizerConfig;
use super::task::SyntheticTask;
use crate::dropout::DropoutSpec;
use crate::error::{Error, Result};
use crate::loss::CompensationSpec;
use crate::model::{HeadKind, ModelConfig};

/// Rates used by `compare` to build the named method bundles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MethodRates {
    pub attn_rate: f64,
    pub ffn_rate: f64,
    pub kl_weight: f64,
}

impl Default for MethodRates {
    fn default() -> Self {
        MethodRates {
            attn_rate: 0.2,
            ffn_rate: 0.2,
            kl_weight: 1.0,
        }
    }
}

/// One JSON document describing a run (or the base of a sweep).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub model: ModelConfig,
    pub task: SyntheticTask,
    #[serde(default)]
    pub dropout_specs: Vec<DropoutSpec>,
    #[serde(default)]
    pub compensation: CompensationSpec,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub methods: MethodRates,
    /// Wall-clock seconds in records.
    #[serde(default)]
    pub record_wall_time: bool,
}

fn default_name() -> String {
    "run".into()
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2, 3, 4]
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            name: default_name(),
            model: ModelConfig::default(),
            task: SyntheticTask::default(),
            dropout_specs: Vec::new(),
            compensation: CompensationSpec::default(),
            optimizer: OptimizerConfig::default(),
            seeds: default_seeds(),
            methods: MethodRates::default(),
            record_wall_time: false,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<ExperimentConfig> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Model config with the top-level dropout specs attached.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            dropout_specs: self.dropout_specs.clone(),
            ..self.model.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        self.task.validate()?;
        self.compensation.validate()?;
        self.optimizer.validate()?;
        let m = &self.model;
        if self.task.vocab_size > m.vocab_size || self.task.seq_len > m.max_len {
            return Err(Error::Config("task vocabulary or length exceeds the model's".into()));
        }
        let head_ok = match m.head {
            HeadKind::Classifier { num_classes } => {
                !self.task.is_regression() && num_classes == self.task.num_classes
            }
            HeadKind::Regressor => self.task.is_regression(),
        };
        if !head_ok {
            return Err(Error::Config("model head does not match the task".into()));
        }
        Ok(())
    }

    /// Hex SHA-256 prefix of the canonical JSON, ignoring the seed list.
    pub fn config_hash(&self) -> String {
        let mut c = self.clone();
        c.seeds.clear();
        let bytes = serde_json::to_vec(&c).expect("config serializes");
        let digest = Sha256::digest(&bytes);
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn run_id(&self, seed: u64) -> String {
        format!("{}-{}-s{seed}", self.name, self.config_hash())
    }
}
