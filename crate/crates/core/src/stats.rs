//! Wilcoxon signed-rank test.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// Largest sample size handled by exact enumeration.
pub const EXACT_MAX_N: usize = 25;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PMethod {
    Exact,
    Normal,
    /// No non-zero differences.
    Degenerate,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignedRank {
    /// Number of non-zero differences.
    pub n: usize,
    pub w_plus: f64,
    pub w_minus: f64,
    /// Probability of a rank sum at most `w_plus` under the null.
    pub p_lower: f64,
    /// Probability of a rank sum at least `w_plus` under the null.
    pub p_upper: f64,
    pub p_two_sided: f64,
    pub method: PMethod,
}

/// Average ranks of `values` (1-based), plus the tie group sizes.
pub fn average_ranks(values: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut ties = Vec::new();
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j + 2) as f64 / 2.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        ties.push(j - i + 1);
        i = j + 1;
    }
    (ranks, ties)
}

/// Two-sided signed-rank test on paired differences.
///
/// Zero differences are dropped. Up to [`EXACT_MAX_N`] remaining pairs the
/// null distribution of `W+` is enumerated exactly (ties included, since
/// doubled average ranks are integers); beyond that a normal approximation
/// with tie and continuity corrections is used.
pub fn wilcoxon_signed_rank(diffs: &[f64]) -> Result<SignedRank> {
    signed_rank(diffs, false)
}

/// Same test, always using the normal approximation.
pub fn wilcoxon_signed_rank_normal(diffs: &[f64]) -> Result<SignedRank> {
    signed_rank(diffs, true)
}

fn signed_rank(diffs: &[f64], force_normal: bool) -> Result<SignedRank> {
    if diffs.iter().any(|d| !d.is_finite()) {
        return Err(Error::Numeric("non-finite paired difference".into()));
    }
    let nz: Vec<f64> = diffs.iter().copied().filter(|&d| d != 0.0).collect();
    let n = nz.len();
    if n == 0 {
        return Ok(SignedRank {
            n: 0,
            w_plus: 0.0,
            w_minus: 0.0,
            p_lower: 1.0,
            p_upper: 1.0,
            p_two_sided: 1.0,
            method: PMethod::Degenerate,
        });
    }
    let abs: Vec<f64> = nz.iter().map(|d| d.abs()).collect();
    let (ranks, ties) = average_ranks(&abs);
    let w_plus: f64 = nz.iter().zip(&ranks).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum();
    let total = (n * (n + 1)) as f64 / 2.0;
    let w_minus = total - w_plus;

    let (p_lower, p_upper, method) = if n <= EXACT_MAX_N && !force_normal {
        let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
        let max: usize = doubled.iter().sum();
        let mut counts = vec![0u64; max + 1];
        counts[0] = 1;
        for &r in &doubled {
            for s in (r..=max).rev() {
                counts[s] += counts[s - r];
            }
        }
        let obs = (2.0 * w_plus).round() as usize;
        let all = 2f64.powi(n as i32);
        let lower: u64 = counts[..=obs].iter().sum();
        let upper: u64 = counts[obs..].iter().sum();
        (lower as f64 / all, upper as f64 / all, PMethod::Exact)
    } else {
        let nf = n as f64;
        let mean = nf * (nf + 1.0) / 4.0;
        let tie_term: f64 = ties.iter().map(|&t| (t * t * t - t) as f64).sum::<f64>() / 48.0;
        let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term;
        let sd = var.sqrt();
        let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
        let lower = std_normal.cdf((w_plus + 0.5 - mean) / sd);
        let upper = 1.0 - std_normal.cdf((w_plus - 0.5 - mean) / sd);
        (lower.min(1.0), upper.min(1.0), PMethod::Normal)
    };
    Ok(SignedRank {
        n,
        w_plus,
        w_minus,
        p_lower,
        p_upper,
        p_two_sided: (2.0 * p_lower.min(p_upper)).min(1.0),
        method,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn six_negative_differences() {
        let r = wilcoxon_signed_rank(&[-1.0, -2.0, -3.0, -4.0, -5.0, -6.0]).unwrap();
        assert_eq!(r.w_plus, 0.0);
        assert_eq!(r.method, PMethod::Exact);
        assert!((r.p_lower - 1.0 / 64.0).abs() < 1e-15);
        assert!((r.p_two_sided - 1.0 / 32.0).abs() < 1e-15);
    }

    #[test]
    fn all_zero_differences_are_not_significant() {
        let r = wilcoxon_signed_rank(&[0.0; 5]).unwrap();
        assert_eq!(r.p_two_sided, 1.0);
        assert_eq!(r.method, PMethod::Degenerate);
    }

    #[test]
    fn average_ranks_with_ties() {
        let (r, t) = average_ranks(&[3.0, 1.0, 3.0, 2.0]);
        assert_eq!(r, vec![3.5, 1.0, 3.5, 2.0]);
        assert_eq!(t, vec![1, 1, 2]);
    }
}
