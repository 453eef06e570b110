//! Pearson chi-square tests used by the privacy checks.

use serde::Serialize;
use statrs::distribution::{ChiSquared, ContinuousCDF};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ChiSquare {
    pub statistic: f64,
    pub dof: f64,
    pub p_value: f64,
}

fn p_value(statistic: f64, dof: f64) -> f64 {
    if dof < 1.0 {
        return 1.0;
    }
    ChiSquared::new(dof).map(|d| d.sf(statistic)).unwrap_or(f64::NAN)
}

/// Goodness of fit of `counts` against the uniform distribution over all bins.
pub fn chi_square_uniform(counts: &[u64]) -> ChiSquare {
    let total: u64 = counts.iter().sum();
    let k = counts.len() as f64;
    let expected = total as f64 / k;
    let statistic = counts
        .iter()
        .map(|&c| {
            let d = c as f64 - expected;
            d * d / expected
        })
        .sum::<f64>();
    let dof = k - 1.0;
    ChiSquare { statistic, dof, p_value: p_value(statistic, dof) }
}

/// Two-sample homogeneity test on a 2×k contingency table. Bins empty in both
/// samples are dropped.
pub fn chi_square_homogeneity(a: &[u64], b: &[u64]) -> ChiSquare {
    assert_eq!(a.len(), b.len(), "samples must share bins");
    let na: u64 = a.iter().sum();
    let nb: u64 = b.iter().sum();
    let n = (na + nb) as f64;
    let mut statistic = 0.0;
    let mut bins = 0usize;
    for (&x, &y) in a.iter().zip(b) {
        let col = (x + y) as f64;
        if col == 0.0 {
            continue;
        }
        bins += 1;
        for (obs, row) in [(x, na), (y, nb)] {
            let exp = row as f64 * col / n;
            statistic += (obs as f64 - exp).powi(2) / exp;
        }
    }
    let dof = bins.saturating_sub(1) as f64;
    ChiSquare { statistic, dof, p_value: p_value(statistic, dof) }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfectly_uniform_counts() {
        let r = chi_square_uniform(&[10, 10, 10, 10]);
        assert_eq!(r.statistic, 0.0);
        assert!((r.p_value - 1.0).abs() < 1e-12);
    }

    #[test]
    fn skewed_counts_fail() {
        let r = chi_square_uniform(&[100, 0, 0, 0]);
        // statistic = 75^2/25 + 3*25 = 300 on 3 dof
        assert!((r.statistic - 300.0).abs() < 1e-9);
        assert!(r.p_value < 1e-12);
    }

    #[test]
    fn known_quantile() {
        // P(X > 7.814728) = 0.05 for 3 dof (standard table value).
        let p = p_value(7.814728, 3.0);
        assert!((p - 0.05).abs() < 1e-6, "p = {p}");
    }

    #[test]
    fn homogeneity_identical_and_disjoint() {
        let same = chi_square_homogeneity(&[5, 7, 9], &[5, 7, 9]);
        assert!(same.statistic.abs() < 1e-12);
        let disjoint = chi_square_homogeneity(&[50, 0], &[0, 50]);
        assert!(disjoint.p_value < 1e-12);
        let dropped = chi_square_homogeneity(&[3, 0, 3], &[3, 0, 3]);
        assert_eq!(dropped.dof, 1.0);
    }
}
