//! Krippendorff's alpha and Spearman's rank correlation.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlphaLevel {
    Nominal,
    #[default]
    Ordinal,
    Interval,
}

impl FromStr for AlphaLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "nominal" => Ok(AlphaLevel::Nominal),
            "ordinal" => Ok(AlphaLevel::Ordinal),
            "interval" => Ok(AlphaLevel::Interval),
            _ => Err(Error::InvalidConfig(format!("unknown alpha level {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlphaSpec {
    pub level: AlphaLevel,
    pub num_categories: u8,
}

impl Default for AlphaSpec {
    fn default() -> Self {
        AlphaSpec {
            level: AlphaLevel::Ordinal,
            num_categories: 4,
        }
    }
}

impl AlphaSpec {
    pub fn new(level: AlphaLevel, num_categories: u8) -> Result<Self> {
        if num_categories < 2 {
            return Err(Error::InvalidConfig("alpha needs at least 2 categories".into()));
        }
        Ok(AlphaSpec { level, num_categories })
    }

    /// Squared difference between categories `c` and `k` (0-based) given the
    /// marginal category counts.
    fn delta2(&self, c: usize, k: usize, marginals: &[f64]) -> f64 {
        if c == k {
            return 0.0;
        }
        match self.level {
            AlphaLevel::Nominal => 1.0,
            AlphaLevel::Interval => {
                let d = c as f64 - k as f64;
                d * d
            }
            AlphaLevel::Ordinal => {
                let (lo, hi) = if c < k { (c, k) } else { (k, c) };
                let span: f64 = marginals[lo..=hi].iter().sum();
                let d = span - (marginals[c] + marginals[k]) / 2.0;
                d * d
            }
        }
    }
}

/// Krippendorff's alpha over an items × raters matrix of categories
/// `1..=num_categories`, with `None` for missing ratings.
///
/// Built from the coincidence matrix; items with fewer than two ratings
/// contribute nothing.
pub fn krippendorff_alpha(ratings: &[Vec<Option<u8>>], spec: AlphaSpec) -> Result<f64> {
    let k = spec.num_categories as usize;
    let mut coincidence = vec![vec![0.0f64; k]; k];
    let mut pairable_items = 0usize;
    let mut counts = vec![0usize; k];
    for (i, item) in ratings.iter().enumerate() {
        counts.iter_mut().for_each(|c| *c = 0);
        let mut m = 0usize;
        for r in item.iter().flatten() {
            if *r == 0 || *r as usize > k {
                return Err(Error::InvalidConfig(format!("item {i}: rating {r} outside 1..={k}")));
            }
            counts[*r as usize - 1] += 1;
            m += 1;
        }
        if m < 2 {
            continue;
        }
        pairable_items += 1;
        let w = 1.0 / (m as f64 - 1.0);
        for c in 0..k {
            if counts[c] == 0 {
                continue;
            }
            for d in 0..k {
                let pairs = if c == d {
                    counts[c] * (counts[c] - 1)
                } else {
                    counts[c] * counts[d]
                };
                coincidence[c][d] += pairs as f64 * w;
            }
        }
    }
    if pairable_items == 0 {
        return Err(Error::UndefinedAlpha("no item has two or more ratings".into()));
    }
    let marginals: Vec<f64> = coincidence.iter().map(|row| row.iter().sum()).collect();
    let n: f64 = marginals.iter().sum();
    if marginals.iter().filter(|&&m| m > 0.0).count() < 2 {
        return Err(Error::UndefinedAlpha(
            "fewer than two distinct values among pairable ratings".into(),
        ));
    }

    let mut observed = 0.0;
    let mut expected = 0.0;
    for c in 0..k {
        for d in 0..k {
            let delta = spec.delta2(c, d, &marginals);
            if delta == 0.0 {
                continue;
            }
            observed += coincidence[c][d] * delta;
            expected += marginals[c] * marginals[d] * delta;
        }
    }
    let expected = expected / (n - 1.0);
    if expected <= 0.0 {
        return Err(Error::UndefinedAlpha("expected disagreement is zero".into()));
    }
    if observed == 0.0 {
        return Ok(1.0);
    }
    Ok(1.0 - observed / expected)
}

/// Alpha between two aligned label sequences (two raters per item).
pub fn alpha_two_raters(a: &[u8], b: &[u8], spec: AlphaSpec) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            found: b.len(),
        });
    }
    let ratings: Vec<Vec<Option<u8>>> = a.iter().zip(b).map(|(&x, &y)| vec![Some(x), Some(y)]).collect();
    krippendorff_alpha(&ratings, spec)
}

/// Fractional ranks (1-based), averaging over ties.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = rank;
        }
        i = j + 1;
    }
    ranks
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            found: y.len(),
        });
    }
    if x.len() < 2 {
        return Err(Error::UndefinedCorrelation(format!(
            "need at least 2 points, got {}",
            x.len()
        )));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation("constant input".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman's rho: Pearson correlation of average-on-ties ranks.
pub fn spearman_rho(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::UndefinedCorrelation("non-finite input".into()));
    }
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            found: y.len(),
        });
    }
    pearson(&average_ranks(x), &average_ranks(y))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two(a: &[u8], b: &[u8], level: AlphaLevel) -> f64 {
        alpha_two_raters(a, b, AlphaSpec::new(level, 4).unwrap()).unwrap()
    }

    #[test]
    fn perfect_agreement() {
        for level in [AlphaLevel::Nominal, AlphaLevel::Ordinal, AlphaLevel::Interval] {
            assert_eq!(two(&[1, 2, 3], &[1, 2, 3], level), 1.0);
        }
    }

    #[test]
    fn swapped_pair_nominal() {
        // Coincidence matrix o = [[0,2],[2,0]], n_1 = n_2 = 2, n = 4.
        // D_o = 4/4 = 1, D_e = 2*2*2/(4*3) = 2/3, alpha = 1 - 3/2 = -0.5.
        assert!((two(&[1, 2], &[2, 1], AlphaLevel::Nominal) + 0.5).abs() < 1e-15);
    }

    #[test]
    fn krippendorff_reference_example() {
        // Krippendorff's reliability-data example: 4 observers, 12 units,
        // nominal alpha = 0.743 (rounded).
        let raw = [
            [Some(1), Some(1), None, Some(1)],
            [Some(2), Some(2), Some(3), Some(2)],
            [Some(3), Some(3), Some(3), Some(3)],
            [Some(3), Some(3), Some(3), Some(3)],
            [Some(2), Some(2), Some(2), Some(2)],
            [Some(1), Some(2), Some(3), Some(4)],
            [Some(4), Some(4), Some(4), Some(4)],
            [Some(1), Some(1), Some(2), Some(1)],
            [Some(2), Some(2), Some(2), Some(2)],
            [None, Some(5), Some(5), Some(5)],
            [None, None, Some(1), Some(1)],
            [None, None, Some(3), None],
        ];
        let ratings: Vec<Vec<Option<u8>>> = raw.iter().map(|r| r.to_vec()).collect();
        let nominal = krippendorff_alpha(&ratings, AlphaSpec::new(AlphaLevel::Nominal, 5).unwrap()).unwrap();
        assert!((nominal - 0.743).abs() < 5e-4, "{nominal}");
        let interval = krippendorff_alpha(&ratings, AlphaSpec::new(AlphaLevel::Interval, 5).unwrap()).unwrap();
        assert!((interval - 0.849).abs() < 5e-4, "{interval}");
        let ordinal = krippendorff_alpha(&ratings, AlphaSpec::new(AlphaLevel::Ordinal, 5).unwrap()).unwrap();
        assert!((ordinal - 0.815).abs() < 5e-4, "{ordinal}");
    }

    #[test]
    fn undefined_cases() {
        let spec = AlphaSpec::default();
        assert!(matches!(
            alpha_two_raters(&[2, 2], &[2, 2], spec),
            Err(Error::UndefinedAlpha(_))
        ));
        assert!(matches!(
            krippendorff_alpha(&[vec![Some(1), None], vec![Some(2)]], spec),
            Err(Error::UndefinedAlpha(_))
        ));
        assert!(krippendorff_alpha(&[vec![Some(5), Some(1)]], spec).is_err());
    }

    #[test]
    fn spearman_examples() {
        assert!((spearman_rho(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((spearman_rho(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);
        // ranks x = [1.5, 1.5, 3], y = [1, 2, 3]: Pearson = 1.5 / sqrt(1.5 * 2) = sqrt(3)/2
        let r = spearman_rho(&[1.0, 1.0, 2.0], &[1.0, 2.0, 3.0]).unwrap();
        assert!((r - 3f64.sqrt() / 2.0).abs() < 1e-12);
        assert!(matches!(
            spearman_rho(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]),
            Err(Error::UndefinedCorrelation(_))
        ));
    }

    #[test]
    fn average_ranks_with_ties() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }
}
