use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Exhaustive enumeration is used up to this many pairs.
pub const EXACT_LIMIT: usize = 20;
const MONTE_CARLO_DRAWS: usize = 100_000;

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median absolute deviation from the median (unscaled).
pub fn mad(values: &[f64]) -> f64 {
    let m = median(values);
    let dev: Vec<f64> = values.iter().map(|v| (v - m).abs()).collect();
    median(&dev)
}

/// Two-sided paired sign-flip permutation test on `a - b`. The statistic is
/// the absolute mean difference; exact for up to [`EXACT_LIMIT`] pairs,
/// Monte-Carlo (seeded) beyond.
pub fn sign_flip_test(a: &[f64], b: &[f64], seed: u64) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Contract(format!("unpaired samples: {} vs {}", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(Error::Contract("a paired test needs at least two seeds".into()));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = d.len();
    let observed = d.iter().sum::<f64>().abs();
    let tol = 1e-12 * (1.0 + observed);
    let flipped_sum = |signs: &mut dyn FnMut(usize) -> bool| -> f64 {
        (0..n).map(|i| if signs(i) { -d[i] } else { d[i] }).sum::<f64>().abs()
    };
    if n <= EXACT_LIMIT {
        let total = 1u64 << n;
        let hits = (0..total)
            .filter(|mask| flipped_sum(&mut |i| mask >> i & 1 == 1) >= observed - tol)
            .count();
        Ok(hits as f64 / total as f64)
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hits = (0..MONTE_CARLO_DRAWS)
            .filter(|_| flipped_sum(&mut |_| rng.random_bool(0.5)) >= observed - tol)
            .count();
        Ok((hits + 1) as f64 / (MONTE_CARLO_DRAWS + 1) as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn medians_and_mad() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert_eq!(mad(&[1.0, 2.0, 3.0, 4.0, 100.0]), 1.0);
    }

    #[test]
    fn all_positive_five_pairs() {
        let p = sign_flip_test(&[1.0; 5], &[0.0; 5], 0).unwrap();
        assert!((p - 2.0 / 32.0).abs() < 1e-15);
    }

    #[test]
    fn self_comparison_is_null() {
        let a = [0.7, 0.8, 0.75, 0.9, 0.6];
        assert_eq!(sign_flip_test(&a, &a, 0).unwrap(), 1.0);
    }

    #[test]
    fn contracts() {
        assert!(sign_flip_test(&[1.0], &[0.0], 0).is_err());
        assert!(sign_flip_test(&[1.0, 2.0], &[0.0], 0).is_err());
    }

    #[test]
    fn monte_carlo_branch_is_small_for_strong_effects() {
        let a: Vec<f64> = (0..30).map(|i| 1.0 + i as f64 * 0.01).collect();
        let b = vec![0.0; 30];
        let p = sign_flip_test(&a, &b, 1).unwrap();
        assert!(p < 1e-3);
    }
}
