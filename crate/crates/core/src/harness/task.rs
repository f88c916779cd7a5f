use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::Targets;
use crate::model::TokenBatch;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// Label = most frequent class token (ids below `num_classes`); the
    /// remaining ids are filler.
    MajorityClass,
    /// Label = parity of the number of marked tokens (ids below
    /// `vocab_size / 4`).
    NoisyParity,
    /// Regression target: centered, scaled sum of token values.
    ScalarSum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticTask {
    pub kind: TaskKind,
    pub vocab_size: usize,
    pub seq_len: usize,
    pub n_train: usize,
    pub n_eval: usize,
    #[serde(default = "default_classes")]
    pub num_classes: usize,
    pub label_noise: f64,
    pub data_seed: u64,
}

fn default_classes() -> usize {
    2
}

impl Default for SyntheticTask {
    fn default() -> Self {
        SyntheticTask {
            kind: TaskKind::MajorityClass,
            vocab_size: 16,
            seq_len: 12,
            n_train: 128,
            n_eval: 2048,
            num_classes: 2,
            label_noise: 0.15,
            data_seed: 1234,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub sequences: Vec<Vec<usize>>,
    pub targets: Targets,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    /// Batch and targets for the given example indices.
    pub fn gather(&self, idx: &[usize]) -> Result<(TokenBatch, Targets)> {
        let rows: Vec<Vec<usize>> = idx.iter().map(|&i| self.sequences[i].clone()).collect();
        let targets = match &self.targets {
            Targets::Classes(c) => Targets::Classes(idx.iter().map(|&i| c[i]).collect()),
            Targets::Values(v) => Targets::Values(idx.iter().map(|&i| v[i]).collect()),
        };
        Ok((TokenBatch::from_rows(&rows)?, targets))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    pub train: Dataset,
    pub eval: Dataset,
    /// Train indices whose label was corrupted.
    pub noisy: Vec<usize>,
}

impl SyntheticTask {
    pub fn is_regression(&self) -> bool {
        self.kind == TaskKind::ScalarSum
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.seq_len == 0 || self.n_train == 0 || self.n_eval == 0 {
            return bad("task extents must be positive".into());
        }
        if !(0.0..0.5).contains(&self.label_noise) {
            return bad(format!("label_noise {} outside [0, 0.5)", self.label_noise));
        }
        match self.kind {
            TaskKind::MajorityClass => {
                if self.num_classes < 2 || self.vocab_size <= self.num_classes {
                    return bad("majority_class needs 2 <= num_classes < vocab_size".into());
                }
            }
            TaskKind::NoisyParity => {
                if self.num_classes != 2 || self.vocab_size < 4 {
                    return bad("noisy_parity is binary and needs vocab_size >= 4".into());
                }
            }
            TaskKind::ScalarSum => {
                if self.vocab_size < 2 {
                    return bad("scalar_sum needs vocab_size >= 2".into());
                }
            }
        }
        let space = (self.vocab_size as f64).powi(self.seq_len.min(64) as i32);
        if space < 4.0 * (self.n_train + self.n_eval) as f64 {
            return bad("sequence space too small for disjoint train/eval draws".into());
        }
        Ok(())
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> Option<(Vec<usize>, f64)> {
        let (v, l) = (self.vocab_size, self.seq_len);
        match self.kind {
            TaskKind::MajorityClass => {
                let c = self.num_classes;
                let seq: Vec<usize> = (0..l)
                    .map(|_| if rng.random_bool(0.5) { rng.random_range(0..c) } else { rng.random_range(c..v) })
                    .collect();
                let mut counts = vec![0usize; c];
                seq.iter().filter(|&&t| t < c).for_each(|&t| counts[t] += 1);
                let top = *counts.iter().max().unwrap();
                // ties are rejected so every label is unambiguous
                if counts.iter().filter(|&&n| n == top).count() != 1 {
                    return None;
                }
                let label = counts.iter().position(|&n| n == top).unwrap();
                Some((seq, label as f64))
            }
            TaskKind::NoisyParity => {
                let seq: Vec<usize> = (0..l).map(|_| rng.random_range(0..v)).collect();
                let marked = seq.iter().filter(|&&t| t < v / 4).count();
                Some((seq, (marked % 2) as f64))
            }
            TaskKind::ScalarSum => {
                let seq: Vec<usize> = (0..l).map(|_| rng.random_range(0..v)).collect();
                let centered: f64 = seq.iter().map(|&t| t as f64 / (v - 1) as f64 - 0.5).sum();
                Some((seq, centered / (l as f64).sqrt()))
            }
        }
    }

    /// Draws disjoint train and eval sets; label noise hits train only.
    pub fn generate(&self) -> Result<TaskData> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.data_seed);
        let total = self.n_train + self.n_eval;
        let mut seen = HashSet::with_capacity(total);
        let mut seqs = Vec::with_capacity(total);
        let mut labels = Vec::with_capacity(total);
        let mut attempts = 0usize;
        while seqs.len() < total {
            attempts += 1;
            if attempts > 1000 * total {
                return Err(Error::Config("could not draw enough distinct sequences".into()));
            }
            if let Some((s, y)) = self.draw(&mut rng) {
                if seen.insert(s.clone()) {
                    seqs.push(s);
                    labels.push(y);
                }
            }
        }
        let eval_seqs = seqs.split_off(self.n_train);
        let eval_labels = labels.split_off(self.n_train);

        let mut order: Vec<usize> = (0..self.n_train).collect();
        order.shuffle(&mut rng);
        let mut noisy: Vec<usize> = order[..(self.label_noise * self.n_train as f64).round() as usize].to_vec();
        noisy.sort_unstable();
        let label_std = std_dev(&labels);
        for &i in &noisy {
            labels[i] = if self.is_regression() {
                labels[i] + rng.random_range(-2.0..2.0) * label_std
            } else {
                let c = self.num_classes;
                ((labels[i] as usize + rng.random_range(1..c)) % c) as f64
            };
        }

        let wrap = |s: Vec<Vec<usize>>, y: Vec<f64>| Dataset {
            targets: if self.is_regression() {
                Targets::Values(y)
            } else {
                Targets::Classes(y.into_iter().map(|v| v as usize).collect())
            },
            sequences: s,
        };
        Ok(TaskData {
            train: wrap(seqs, labels),
            eval: wrap(eval_seqs, eval_labels),
            noisy,
        })
    }
}

fn std_dev(v: &[f64]) -> f64 {
    let n = v.len().max(1) as f64;
    let mean = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn classes(d: &Dataset) -> &[usize] {
        match &d.targets {
            Targets::Classes(c) => c,
            _ => panic!("expected classes"),
        }
    }

    #[test]
    fn splits_are_disjoint_and_deterministic() {
        let t = SyntheticTask::default();
        let a = t.generate().unwrap();
        assert_eq!(a, t.generate().unwrap());
        assert_eq!(a.train.len(), t.n_train);
        assert_eq!(a.eval.len(), t.n_eval);
        let train: HashSet<_> = a.train.sequences.iter().collect();
        assert!(a.eval.sequences.iter().all(|s| !train.contains(s)));
    }

    #[test]
    fn noise_only_touches_train_labels() {
        let clean = SyntheticTask { label_noise: 0.0, ..Default::default() }.generate().unwrap();
        let noisy = SyntheticTask::default().generate().unwrap();
        assert_eq!(clean.train.sequences, noisy.train.sequences);
        assert_eq!(clean.eval, noisy.eval);
        let flipped: Vec<usize> = (0..clean.train.len())
            .filter(|&i| classes(&clean.train)[i] != classes(&noisy.train)[i])
            .collect();
        assert_eq!(flipped, noisy.noisy);
        assert_eq!(flipped.len(), (0.15f64 * 128.0).round() as usize);
    }

    #[test]
    fn labels_follow_the_rule() {
        let t = SyntheticTask { label_noise: 0.0, ..Default::default() };
        let d = t.generate().unwrap();
        for (s, &y) in d.eval.sequences.iter().zip(classes(&d.eval)) {
            let count = |c: usize| s.iter().filter(|&&x| x == c).count();
            assert!(count(y) > count(1 - y));
        }
        let p = SyntheticTask { kind: TaskKind::NoisyParity, label_noise: 0.0, ..Default::default() };
        let d = p.generate().unwrap();
        for (s, &y) in d.train.sequences.iter().zip(classes(&d.train)) {
            assert_eq!(s.iter().filter(|&&x| x < 4).count() % 2, y);
        }
    }

    #[test]
    fn invalid_tasks() {
        let bad = SyntheticTask { label_noise: 0.5, ..Default::default() };
        assert!(bad.generate().is_err());
        let tiny = SyntheticTask { vocab_size: 3, seq_len: 2, n_train: 10, ..Default::default() };
        assert!(tiny.generate().is_err());
    }
}
