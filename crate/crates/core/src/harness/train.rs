use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::optim::{AdamW, LinearSchedule};
use super::task::{Dataset, TaskData};
use crate::dropout::Mode;
use crate::error::{Error, Result};
use crate::loss::{task_loss, twin_pass_step, Targets, TwinPassOptions};
use crate::mask::derive_seed;
use crate::model::{save_checkpoint, Checkpoint, ForwardOptions, Model};
use crate::tensor::NoGradGuard;

const TAG_INIT: u64 = 0x11;
const TAG_SHUFFLE: u64 = 0x22;
const TAG_MASK: u64 = 0x33;
const EVAL_CHUNK: usize = 256;

/// Serializes non-finite values as strings so diagnostic records stay
/// valid JSON.
mod lossy_f64 {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_str(&v.to_string())
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(v),
            Raw::Text(t) => t.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunRecord {
    pub step: usize,
    pub epoch: usize,
    /// Mean total objective over the steps since the previous record.
    #[serde(with = "lossy_f64")]
    pub train_loss: f64,
    #[serde(with = "lossy_f64")]
    pub task_loss: f64,
    #[serde(with = "lossy_f64")]
    pub consistency_loss: f64,
    /// Inference-mode metric on the (noisy) training set.
    pub train_metric: f64,
    /// Inference-mode metric on the held-out set.
    pub eval_metric: f64,
    pub lr: f64,
    pub config_hash: String,
    pub seed: u64,
    pub wall_time: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub status: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    /// Accuracy for classification, R² for regression.
    pub metric: f64,
    pub loss: f64,
    /// Concatenated head outputs.
    pub outputs: Vec<f64>,
}

/// Inference-mode pass over a dataset in chunks, without a graph.
pub fn evaluate(model: &Model, data: &Dataset) -> Result<Evaluation> {
    let _guard = NoGradGuard::new();
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut outputs = Vec::new();
    let mut loss = 0.0;
    for chunk in idx.chunks(EVAL_CHUNK) {
        let (batch, targets) = data.gather(chunk)?;
        let trace = model.forward(&batch, Mode::Infer, 0, ForwardOptions::default())?;
        loss += task_loss(&trace.output, &targets)?.item() * chunk.len() as f64;
        outputs.extend(trace.output.to_vec());
    }
    let metric = match &data.targets {
        Targets::Classes(ys) => {
            let c = outputs.len() / ys.len().max(1);
            let hits = outputs
                .chunks(c)
                .zip(ys)
                .filter(|(row, &y)| argmax(row) == y)
                .count();
            hits as f64 / ys.len().max(1) as f64
        }
        Targets::Values(ys) => {
            let n = ys.len().max(1) as f64;
            let mean = ys.iter().sum::<f64>() / n;
            let var = ys.iter().map(|y| (y - mean) * (y - mean)).sum::<f64>() / n;
            let mse = outputs.iter().zip(ys).map(|(p, y)| (p - y) * (p - y)).sum::<f64>() / n;
            1.0 - mse / var.max(1e-300)
        }
    };
    Ok(Evaluation {
        metric,
        loss: loss / data.len().max(1) as f64,
        outputs,
    })
}

fn has_non_finite(model: &Model) -> bool {
    model
        .trainable_parameters()
        .iter()
        .any(|(_, t)| t.data().iter().any(|v| !v.is_finite()))
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

pub struct TrainOutcome {
    pub run_id: String,
    pub records: Vec<RunRecord>,
    pub best_eval: f64,
    pub best_step: usize,
    /// Parameters at the best eval point.
    pub best_checkpoint: Checkpoint,
    /// Model state at the end of training.
    pub model: Model,
    /// `<out>/<run_id>` when an output directory was given.
    pub run_dir: Option<PathBuf>,
}

impl TrainOutcome {
    pub fn final_record(&self) -> &RunRecord {
        self.records.last().expect("at least the initial record")
    }

    /// Eval metric at the last record.
    pub fn final_eval(&self) -> f64 {
        self.final_record().eval_metric
    }

    /// Highest train metric over all records.
    pub fn peak_train(&self) -> f64 {
        self.records.iter().map(|r| r.train_metric).fold(f64::MIN, f64::max)
    }
}

struct MetricsSink {
    file: Option<BufWriter<File>>,
}

impl MetricsSink {
    fn write(&mut self, rec: &RunRecord) -> Result<()> {
        if let Some(f) = self.file.as_mut() {
            serde_json::to_writer(&mut *f, rec)?;
            f.write_all(b"\n")?;
            f.flush()?;
        }
        Ok(())
    }
}

/// Trains one seed. Generates the task data from the config.
pub fn train(cfg: &ExperimentConfig, seed: u64, out: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let data = cfg.task.generate()?;
    train_on(cfg, &data, seed, out)
}

/// Trains one seed on pre-generated data. Metrics go to
/// `<out>/<run_id>/metrics.jsonl` and the best parameters to `best.ckpt`.
pub fn train_on(
    cfg: &ExperimentConfig,
    data: &TaskData,
    seed: u64,
    out: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let started = Instant::now();
    let hash = cfg.config_hash();
    let run_id = cfg.run_id(seed);
    let run_dir = out.map(|o| o.join(&run_id));
    let mut sink = MetricsSink { file: None };
    if let Some(dir) = &run_dir {
        fs::create_dir_all(dir)?;
        sink.file = Some(BufWriter::new(File::create(dir.join("metrics.jsonl"))?));
    }

    let model = Model::new(cfg.model_config(), derive_seed(&[seed, TAG_INIT]))?;
    let params: Vec<_> = model.trainable_parameters().into_iter().map(|(_, t)| t).collect();
    let opt_cfg = &cfg.optimizer;
    let mut opt = AdamW::new(params, opt_cfg);
    let n = data.train.len();
    let steps_per_epoch = n.div_ceil(opt_cfg.batch_size);
    let schedule = LinearSchedule::new(opt_cfg.lr, opt_cfg.warmup_ratio, steps_per_epoch * opt_cfg.epochs);

    let wall = |s: &Instant| cfg.record_wall_time.then(|| s.elapsed().as_secs_f64());
    let record = |step, epoch, losses: (f64, f64, f64), lr, model: &Model| -> Result<RunRecord> {
        Ok(RunRecord {
            step,
            epoch,
            train_loss: losses.0,
            task_loss: losses.1,
            consistency_loss: losses.2,
            train_metric: evaluate(model, &data.train)?.metric,
            eval_metric: evaluate(model, &data.eval)?.metric,
            lr,
            config_hash: hash.clone(),
            seed,
            wall_time: wall(&started),
            status: None,
        })
    };

    let init_loss = evaluate(&model, &data.train)?.loss;
    let first = record(0, 0, (init_loss, init_loss, 0.0), 0.0, &model)?;
    sink.write(&first)?;
    let mut best_eval = first.eval_metric;
    let mut best_step = 0;
    let mut best_checkpoint = Checkpoint::from_model(&model, &hash);
    if let Some(dir) = &run_dir {
        save_checkpoint(&dir.join("best.ckpt"), &model, &hash)?;
    }
    let mut records = vec![first];

    let mut step = 0;
    let mut acc = (0.0, 0.0, 0.0);
    let mut acc_n = 0usize;
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 1..=opt_cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, TAG_SHUFFLE, epoch as u64]));
        order.shuffle(&mut rng);
        let mut lr = 0.0;
        for chunk in order.chunks(opt_cfg.batch_size) {
            let (batch, targets) = data.train.gather(chunk)?;
            let step_seed = derive_seed(&[seed, TAG_MASK, step as u64]);
            model.zero_grad();
            let r = match twin_pass_step(&model, &batch, &targets, &cfg.compensation, step_seed, TwinPassOptions::default()) {
                // overflowed parameters can surface as degenerate softmax rows
                Err(Error::DegenerateRow(_) | Error::Numeric(_)) if has_non_finite(&model) => None,
                other => Some(other?),
            };
            let losses = r
                .as_ref()
                .map_or((f64::NAN, f64::NAN, f64::NAN), |r| (r.total_loss, r.task_loss, r.consistency_loss));
            if !losses.0.is_finite() {
                let diag = RunRecord {
                    step,
                    epoch,
                    train_loss: losses.0,
                    task_loss: losses.1,
                    consistency_loss: losses.2,
                    lr,
                    wall_time: wall(&started),
                    status: Some(format!("aborted: non-finite loss {}", losses.0)),
                    ..records.last().unwrap().clone()
                };
                sink.write(&diag)?;
                return Err(Error::NonFiniteLoss { step, value: losses.0 });
            }
            let r = r.expect("finite losses come from a completed step");
            lr = schedule.lr(step);
            opt.step(lr);
            acc.0 += r.total_loss;
            acc.1 += r.task_loss;
            acc.2 += r.consistency_loss;
            acc_n += 1;
            step += 1;
        }
        if epoch % opt_cfg.eval_every == 0 || epoch == opt_cfg.epochs {
            let k = acc_n.max(1) as f64;
            let rec = record(step, epoch, (acc.0 / k, acc.1 / k, acc.2 / k), lr, &model)?;
            acc = (0.0, 0.0, 0.0);
            acc_n = 0;
            sink.write(&rec)?;
            if rec.eval_metric > best_eval {
                best_eval = rec.eval_metric;
                best_step = step;
                best_checkpoint = Checkpoint::from_model(&model, &hash);
                if let Some(dir) = &run_dir {
                    save_checkpoint(&dir.join("best.ckpt"), &model, &hash)?;
                }
            }
            records.push(rec);
        }
    }

    Ok(TrainOutcome {
        run_id,
        records,
        best_eval,
        best_step,
        best_checkpoint,
        model,
        run_dir,
    })
}

/// Parses a metrics file; every line must be a complete record.
pub fn read_metrics(path: &Path) -> Result<Vec<RunRecord>> {
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}
