use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, MethodRates};
use super::stats::{mad, median, sign_flip_test};
use super::task::TaskData;
use super::train::train_on;
use crate::dropout::{DropoutSpec, Position};
use crate::error::{Error, Result};
use crate::loss::{CompensationKind, CompensationSpec};
use crate::mask::StructuralPattern;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    DropoutRate,
    LoraRank,
    KlWeight,
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rate" | "dropout_rate" => Ok(SweepAxis::DropoutRate),
            "rank" | "lora_rank" => Ok(SweepAxis::LoraRank),
            "kl_weight" => Ok(SweepAxis::KlWeight),
            _ => Err(Error::Config(format!("unknown sweep axis {s:?}"))),
        }
    }
}

impl SweepAxis {
    /// Copy of `base` with this axis set to `value`.
    pub fn apply(&self, base: &ExperimentConfig, value: f64) -> Result<ExperimentConfig> {
        let mut cfg = base.clone();
        match self {
            SweepAxis::DropoutRate => {
                let mut touched = false;
                for s in cfg.dropout_specs.iter_mut().filter(|s| s.position != Position::None) {
                    s.rate = value;
                    touched = true;
                }
                if !touched {
                    return Err(Error::Config("a rate sweep needs at least one dropout spec".into()));
                }
            }
            SweepAxis::LoraRank => {
                if value < 1.0 || value.fract() != 0.0 {
                    return Err(Error::Config(format!("rank {value} is not a positive integer")));
                }
                cfg.model.lora_rank = value as usize;
            }
            SweepAxis::KlWeight => {
                if cfg.compensation.kind == CompensationKind::None {
                    cfg.compensation.kind = CompensationKind::KlBidirectional;
                }
                cfg.compensation.weight = value;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub label: String,
    pub seed: u64,
    pub best_eval: f64,
    pub best_step: usize,
    pub final_eval: f64,
    pub final_train: f64,
    pub peak_eval_drop: f64,
}

/// Trains every `(config, seed)` job on shared task data with up to
/// `workers` threads. Results come back in job order.
pub fn run_cells(
    jobs: &[(String, ExperimentConfig, u64)],
    data: &TaskData,
    out: Option<&Path>,
    workers: usize,
) -> Result<Vec<CellResult>> {
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<CellResult>>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    let work = || loop {
        let i = next.fetch_add(1, Ordering::SeqCst);
        let Some((label, cfg, seed)) = jobs.get(i) else { break };
        let r = train_on(cfg, data, *seed, out).map(|o| CellResult {
            label: label.clone(),
            seed: *seed,
            best_eval: o.best_eval,
            best_step: o.best_step,
            final_eval: o.final_eval(),
            final_train: o.final_record().train_metric,
            peak_eval_drop: o.best_eval - o.final_eval(),
        });
        results.lock().unwrap()[i] = Some(r);
    };
    let workers = workers.clamp(1, jobs.len().max(1));
    if workers == 1 {
        work();
    } else {
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(work);
            }
        });
    }
    results.into_inner().unwrap().into_iter().map(|r| r.expect("every job ran")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub value: f64,
    pub median_best_eval: f64,
    pub mad_best_eval: f64,
    pub median_final_eval: f64,
    pub median_final_train: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub axis: SweepAxis,
    pub cells: Vec<CellResult>,
    pub summary: Vec<SweepSummary>,
}

pub fn sweep(
    base: &ExperimentConfig,
    axis: SweepAxis,
    values: &[f64],
    seeds: &[u64],
    out: Option<&Path>,
    workers: usize,
) -> Result<SweepReport> {
    if values.is_empty() || seeds.is_empty() {
        return Err(Error::Config("a sweep needs values and seeds".into()));
    }
    let data = base.task.generate()?;
    let mut jobs = Vec::new();
    for &v in values {
        let mut cfg = axis.apply(base, v)?;
        cfg.name = format!("{}-{}", base.name, v);
        for &s in seeds {
            jobs.push((v.to_string(), cfg.clone(), s));
        }
    }
    let cells = run_cells(&jobs, &data, out, workers)?;
    let summary = values
        .iter()
        .enumerate()
        .map(|(i, &value)| {
            let group = &cells[i * seeds.len()..(i + 1) * seeds.len()];
            let col = |f: fn(&CellResult) -> f64| group.iter().map(f).collect::<Vec<_>>();
            SweepSummary {
                value,
                median_best_eval: median(&col(|c| c.best_eval)),
                mad_best_eval: mad(&col(|c| c.best_eval)),
                median_final_eval: median(&col(|c| c.final_eval)),
                median_final_train: median(&col(|c| c.final_train)),
            }
        })
        .collect();
    Ok(SweepReport { axis, cells, summary })
}

/// Named method bundles understood by `compare`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    Baseline,
    DropKey,
    HiddenCut,
    DropAttention,
    HiddenKeyMinus,
    HiddenKey,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Baseline,
        Method::DropKey,
        Method::HiddenCut,
        Method::DropAttention,
        Method::HiddenKeyMinus,
        Method::HiddenKey,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Method::Baseline => "baseline",
            Method::DropKey => "dropkey",
            Method::HiddenCut => "hiddencut",
            Method::DropAttention => "dropattention",
            Method::HiddenKeyMinus => "hiddenkey-",
            Method::HiddenKey => "hiddenkey",
        }
    }

    /// Dropout specs and compensation for this method at the given rates.
    /// DropKey and DropAttention both use the column pattern, so the two
    /// differ only in where the mask enters.
    pub fn bundle(&self, r: &MethodRates) -> (Vec<DropoutSpec>, CompensationSpec) {
        use StructuralPattern::*;
        match self {
            Method::Baseline => (Vec::new(), CompensationSpec::none()),
            Method::DropKey => (vec![DropoutSpec::drop_key(Column, r.attn_rate)], CompensationSpec::none()),
            Method::HiddenCut => (vec![DropoutSpec::hidden_cut(Element, r.ffn_rate)], CompensationSpec::none()),
            Method::DropAttention => (
                vec![DropoutSpec::drop_attention(Column, r.attn_rate, true)],
                CompensationSpec::none(),
            ),
            Method::HiddenKeyMinus => hiddenkey_bundle(r.attn_rate, r.ffn_rate, 0.0),
            Method::HiddenKey => hiddenkey_bundle(r.attn_rate, r.ffn_rate, r.kl_weight),
        }
    }

    pub fn configure(&self, base: &ExperimentConfig) -> Result<ExperimentConfig> {
        let (specs, comp) = self.bundle(&base.methods);
        let cfg = ExperimentConfig {
            name: format!("{}-{}", base.name, self.name()),
            dropout_specs: specs,
            compensation: comp,
            ..base.clone()
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

/// Column DropKey in attention plus element HiddenCut in the FFN, with
/// bidirectional KL at weight `lambda` (none when `lambda` is 0).
pub fn hiddenkey_bundle(rate_attn: f64, rate_ffn: f64, lambda: f64) -> (Vec<DropoutSpec>, CompensationSpec) {
    let specs = vec![
        DropoutSpec::drop_key(StructuralPattern::Column, rate_attn),
        DropoutSpec::hidden_cut(StructuralPattern::Element, rate_ffn),
    ];
    let comp = if lambda == 0.0 {
        CompensationSpec::none()
    } else {
        CompensationSpec::kl(lambda)
    };
    (specs, comp)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub best_evals: Vec<f64>,
    pub median: f64,
    pub mad: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairTest {
    pub a: String,
    pub b: String,
    /// Median over seeds of `best_eval(a) - best_eval(b)`.
    pub median_diff: f64,
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub seeds: Vec<u64>,
    pub methods: Vec<MethodSummary>,
    pub pairs: Vec<PairTest>,
}

impl CompareReport {
    pub fn median_of(&self, method: Method) -> Option<f64> {
        self.methods.iter().find(|m| m.method == method.name()).map(|m| m.median)
    }
}

pub fn compare(
    base: &ExperimentConfig,
    methods: &[Method],
    seeds: &[u64],
    out: Option<&Path>,
    workers: usize,
) -> Result<CompareReport> {
    if methods.len() < 2 {
        return Err(Error::Contract("compare needs at least two methods".into()));
    }
    if seeds.len() < 2 {
        return Err(Error::Contract("compare needs at least two seeds".into()));
    }
    let data = base.task.generate()?;
    let mut jobs = Vec::new();
    for m in methods {
        let cfg = m.configure(base)?;
        for &s in seeds {
            jobs.push((m.name().to_string(), cfg.clone(), s));
        }
    }
    let cells = run_cells(&jobs, &data, out, workers)?;
    let summaries: Vec<MethodSummary> = methods
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let best: Vec<f64> = cells[i * seeds.len()..(i + 1) * seeds.len()].iter().map(|c| c.best_eval).collect();
            MethodSummary {
                method: m.name().to_string(),
                median: median(&best),
                mad: mad(&best),
                best_evals: best,
            }
        })
        .collect();
    let mut pairs = Vec::new();
    for i in 0..summaries.len() {
        for j in i + 1..summaries.len() {
            let (a, b) = (&summaries[i], &summaries[j]);
            let diffs: Vec<f64> = a.best_evals.iter().zip(&b.best_evals).map(|(x, y)| x - y).collect();
            pairs.push(PairTest {
                a: a.method.clone(),
                b: b.method.clone(),
                median_diff: median(&diffs),
                p_value: sign_flip_test(&a.best_evals, &b.best_evals, 0)?,
            });
        }
    }
    Ok(CompareReport {
        seeds: seeds.to_vec(),
        methods: summaries,
        pairs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("dropout".parse::<Method>().is_err());
    }

    #[test]
    fn hiddenkey_bundle_shape() {
        let (specs, comp) = hiddenkey_bundle(0.1, 0.2, 0.0);
        assert_eq!(comp.kind, CompensationKind::None);
        assert_eq!(specs[0].position, Position::AttnLogits);
        assert_eq!(specs[0].pattern, StructuralPattern::Column);
        assert_eq!(specs[1].position, Position::FfnHidden);
        assert_eq!(specs[1].pattern, StructuralPattern::Element);
        assert_eq!(specs[1].rate, 0.2);
        let (_, comp) = hiddenkey_bundle(0.1, 0.2, 1.5);
        assert_eq!(comp, CompensationSpec::kl(1.5));
        let text = serde_json::to_string(&hiddenkey_bundle(0.1, 0.2, 1.5)).unwrap();
        let back: (Vec<DropoutSpec>, CompensationSpec) = serde_json::from_str(&text).unwrap();
        assert_eq!(back, hiddenkey_bundle(0.1, 0.2, 1.5));
    }

    #[test]
    fn axis_application() {
        let mut base = ExperimentConfig::default();
        assert!(SweepAxis::DropoutRate.apply(&base, 0.1).is_err());
        base.dropout_specs = hiddenkey_bundle(0.1, 0.1, 0.0).0;
        let c = SweepAxis::DropoutRate.apply(&base, 0.3).unwrap();
        assert!(c.dropout_specs.iter().all(|s| s.rate == 0.3));
        assert_eq!(SweepAxis::LoraRank.apply(&base, 4.0).unwrap().model.lora_rank, 4);
        assert!(SweepAxis::LoraRank.apply(&base, 0.0).is_err());
        let k = SweepAxis::KlWeight.apply(&base, 0.5).unwrap();
        assert_eq!(k.compensation, CompensationSpec::kl(0.5));
        assert_eq!("rate".parse::<SweepAxis>().unwrap(), SweepAxis::DropoutRate);
    }

    #[test]
    fn compare_contracts() {
        let base = ExperimentConfig::default();
        assert!(compare(&base, &[Method::Baseline], &[0, 1], None, 1).is_err());
        assert!(compare(&base, &[Method::Baseline, Method::DropKey], &[0], None, 1).is_err());
    }
}
