//! Structural keep/drop masks over 2-D grids.
//!
//! Grids are row-major. For attention grids rows are queries and columns are
//! keys, matching the `[.., Q, K]` layout of attention logits, so a dropped
//! "column" removes one key for every query. For hidden grids rows are tokens
//! and columns are features.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StructuralPattern {
    Element,
    Column,
    Span,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AxisSemantics {
    /// rows = queries, cols = keys; no query may lose every key
    Attention,
    /// rows = tokens (L), cols = features (D)
    Hidden,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskPlan {
    rows: usize,
    cols: usize,
    keep: Vec<bool>,
    pub pattern: StructuralPattern,
    pub rate: f64,
    pub seed: u64,
    pub axis: AxisSemantics,
}

impl MaskPlan {
    pub fn all_keep(rows: usize, cols: usize, axis: AxisSemantics) -> MaskPlan {
        MaskPlan {
            rows,
            cols,
            keep: vec![true; rows * cols],
            pattern: StructuralPattern::Element,
            rate: 0.0,
            seed: 0,
            axis,
        }
    }

    /// Builds a plan from an explicit grid (1 = keep). Used to pin masks in
    /// tests and analyses.
    pub fn from_grid(
        rows: usize,
        cols: usize,
        keep: Vec<bool>,
        pattern: StructuralPattern,
        axis: AxisSemantics,
    ) -> Result<MaskPlan> {
        if keep.len() != rows * cols {
            return Err(Error::Shape {
                op: "mask_from_grid",
                lhs: vec![rows, cols],
                rhs: vec![keep.len()],
            });
        }
        let dropped = keep.iter().filter(|k| !**k).count();
        Ok(MaskPlan {
            rows,
            cols,
            keep,
            pattern,
            rate: dropped as f64 / (rows * cols).max(1) as f64,
            seed: 0,
            axis,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Row-major keep flags.
    pub fn keep(&self) -> &[bool] {
        &self.keep
    }

    pub fn is_kept(&self, row: usize, col: usize) -> bool {
        self.keep[row * self.cols + col]
    }

    pub fn kept_fraction(&self) -> f64 {
        if self.keep.is_empty() {
            return 1.0;
        }
        self.keep.iter().filter(|k| **k).count() as f64 / self.keep.len() as f64
    }
}

/// Fraction of kept entries.
pub fn kept_fraction(mask: &MaskPlan) -> f64 {
    mask.kept_fraction()
}

pub(crate) fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Contract(format!("dropout rate {rate} outside [0, 1)")));
    }
    Ok(())
}

/// Drop-span length for `rate` over an axis of `extent` cells.
pub fn span_length(rate: f64, extent: usize) -> usize {
    ((rate * extent as f64).round() as usize).max(1)
}

pub fn sample_mask(
    rows: usize,
    cols: usize,
    pattern: StructuralPattern,
    rate: f64,
    seed: u64,
    axis: AxisSemantics,
) -> Result<MaskPlan> {
    check_rate(rate)?;
    if rows == 0 || cols == 0 {
        return Err(Error::Contract(format!("empty mask grid {rows}x{cols}")));
    }
    let mut plan = MaskPlan {
        pattern,
        rate,
        seed,
        ..MaskPlan::all_keep(rows, cols, axis)
    };
    if rate == 0.0 {
        return Ok(plan);
    }
    let attention = axis == AxisSemantics::Attention;
    if attention && cols == 1 && pattern != StructuralPattern::Element {
        return Err(Error::DegenerateRow(format!(
            "{pattern:?} pattern at rate {rate} would drop the only key"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keep = &mut plan.keep;
    match pattern {
        StructuralPattern::Element => {
            for k in keep.iter_mut() {
                *k = rng.random::<f64>() >= rate;
            }
            if attention {
                for r in 0..rows {
                    let row = &mut keep[r * cols..(r + 1) * cols];
                    if row.iter().all(|k| !*k) {
                        row[rng.random_range(0..cols)] = true;
                    }
                }
            }
        }
        StructuralPattern::Column => {
            let mut col_keep: Vec<bool> = (0..cols).map(|_| rng.random::<f64>() >= rate).collect();
            if attention && col_keep.iter().all(|k| !*k) {
                col_keep[rng.random_range(0..cols)] = true;
            }
            for r in 0..rows {
                keep[r * cols..(r + 1) * cols].copy_from_slice(&col_keep);
            }
        }
        StructuralPattern::Span if attention => {
            // a run of keys, never all of them
            let len = span_length(rate, cols).min(cols - 1);
            let start = rng.random_range(0..=cols - len);
            for r in 0..rows {
                keep[r * cols + start..r * cols + start + len].fill(false);
            }
        }
        StructuralPattern::Span => {
            // a run of whole token rows
            let len = span_length(rate, rows).min(rows);
            let start = rng.random_range(0..=rows - len);
            keep[start * cols..(start + len) * cols].fill(false);
        }
    }
    Ok(plan)
}

/// Mixes a sequence of integers into one seed (splitmix64 finalizer per
/// part). Used to derive per-step, per-layer, per-head mask seeds.
pub fn derive_seed(parts: &[u64]) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    parts.iter().fold(0x2545_f491_4f6c_dd1d, |acc, &p| mix(acc ^ mix(p)))
}
