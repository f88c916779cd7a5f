use std::path::Path;

use super::train::{read_metrics, RunRecord};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub run_id: String,
    pub records: Vec<RunRecord>,
}

impl RunSummary {
    pub fn best(&self) -> Option<&RunRecord> {
        self.records.iter().max_by(|a, b| a.eval_metric.total_cmp(&b.eval_metric))
    }
}

/// Loads one run directory, or every run directory directly below `dir`.
pub fn load_runs(dir: &Path) -> Result<Vec<RunSummary>> {
    let name = |p: &Path| p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    if dir.join("metrics.jsonl").is_file() {
        return Ok(vec![RunSummary {
            run_id: name(dir),
            records: read_metrics(&dir.join("metrics.jsonl"))?,
        }]);
    }
    let mut runs = Vec::new();
    let mut entries: Vec<_> = std::fs::read_dir(dir)?.collect::<std::io::Result<_>>()?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let metrics = e.path().join("metrics.jsonl");
        if metrics.is_file() {
            runs.push(RunSummary {
                run_id: name(&e.path()),
                records: read_metrics(&metrics)?,
            });
        }
    }
    if runs.is_empty() {
        return Err(Error::Config(format!("no metrics.jsonl under {}", dir.display())));
    }
    Ok(runs)
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

fn finish(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// One row per run: best/final metrics and the drop from the peak.
pub fn summary_csv(runs: &[RunSummary]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "run_id", "seed", "best_eval", "best_step", "final_eval", "final_train", "peak_drop",
    ])
    .map_err(csv_err)?;
    for r in runs {
        let (Some(best), Some(last)) = (r.best(), r.records.last()) else { continue };
        w.write_record([
            r.run_id.clone(),
            last.seed.to_string(),
            best.eval_metric.to_string(),
            best.step.to_string(),
            last.eval_metric.to_string(),
            last.train_metric.to_string(),
            (best.eval_metric - last.eval_metric).to_string(),
        ])
        .map_err(csv_err)?;
    }
    finish(w)
}

/// Long-format curve data: one row per run and record.
pub fn curves_csv(runs: &[RunSummary]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "run_id", "step", "epoch", "train_loss", "task_loss", "consistency_loss", "train_metric", "eval_metric", "lr",
    ])
    .map_err(csv_err)?;
    for r in runs {
        for rec in &r.records {
            w.write_record([
                r.run_id.clone(),
                rec.step.to_string(),
                rec.epoch.to_string(),
                rec.train_loss.to_string(),
                rec.task_loss.to_string(),
                rec.consistency_loss.to_string(),
                rec.train_metric.to_string(),
                rec.eval_metric.to_string(),
                rec.lr.to_string(),
            ])
            .map_err(csv_err)?;
        }
    }
    finish(w)
}
