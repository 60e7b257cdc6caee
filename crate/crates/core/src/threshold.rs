//! Learning bin edges that map continuous relatedness scores to labels
//! 1..=4 by maximizing Krippendorff's alpha against gold labels.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{alpha_two_raters, AlphaSpec};
use crate::model::{ThresholdSet, UsagePair};
use crate::optim::{nelder_mead, SimplexConfig};

/// `1 + |{ t : t < score }|`; a score equal to an edge falls in the lower bin.
pub fn map_score_to_label(score: f64, thresholds: &ThresholdSet) -> u8 {
    label_for(score, &thresholds.edges())
}

fn label_for(score: f64, edges: &[f64]) -> u8 {
    1 + edges.iter().filter(|&&t| t < score).count() as u8
}

/// A fitted threshold set as written to disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdFit {
    pub edges: ThresholdSet,
    pub alpha_train: f64,
    pub spec: AlphaSpec,
    /// Alpha of the evenly spaced starting bins.
    #[serde(skip)]
    pub initial_alpha: f64,
}

impl ThresholdFit {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut json = serde_json::to_string_pretty(self)?;
        json.push('\n');
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn sorted3(raw: &[f64]) -> [f64; 3] {
    let mut e = [raw[0], raw[1], raw[2]];
    e.sort_by(f64::total_cmp);
    e
}

/// Moves each edge into the middle of the score gap it already occupies,
/// leaving every label assignment unchanged. Edges sharing a gap are spread
/// evenly inside it.
fn canonical_edges(edges: [f64; 3], sorted_unique: &[f64]) -> Result<ThresholdSet> {
    let m = sorted_unique.len();
    let gap_of = |t: f64| sorted_unique.partition_point(|&u| u <= t);
    let mut out = [0.0; 3];
    let mut i = 0;
    while i < 3 {
        let gap = gap_of(edges[i]);
        let mut j = i;
        while j + 1 < 3 && gap_of(edges[j + 1]) == gap {
            j += 1;
        }
        let lo = if gap == 0 { -1.0 } else { sorted_unique[gap - 1] };
        let hi = if gap == m { 1.0 } else { sorted_unique[gap] };
        let c = (j - i + 1) as f64;
        for (q, slot) in out[i..=j].iter_mut().enumerate() {
            *slot = lo + (hi - lo) * (q as f64 + 1.0) / (c + 1.0);
        }
        i = j + 1;
    }
    let set = ThresholdSet::new(out)?;
    let moved = sorted_unique
        .iter()
        .any(|&u| label_for(u, &edges) != map_score_to_label(u, &set));
    if moved {
        return Err(Error::InvalidThresholds(format!(
            "no representable edges in [-1, 1] reproduce the partition of {edges:?}"
        )));
    }
    Ok(set)
}

/// Fits bin edges on `scores` (in `[-1, 1]`) against `gold` labels.
///
/// The optimizer works on three unconstrained reals that are sorted before
/// each evaluation. Starting edges are the quartile cut points of the
/// observed score range; restart `r` offsets them by `±0.02·r` with
/// alternating sign. The best run's edges are then centered in their
/// score gaps.
pub fn fit_thresholds(
    scores: &BTreeMap<String, f64>,
    gold: &BTreeMap<String, u8>,
    spec: AlphaSpec,
    config: &SimplexConfig,
) -> Result<ThresholdFit> {
    let mut xs = Vec::with_capacity(gold.len());
    let mut gs = Vec::with_capacity(gold.len());
    for (id, &g) in gold {
        let s = *scores
            .get(id)
            .ok_or_else(|| Error::InvalidConfig(format!("no score for gold instance {id}")))?;
        if !s.is_finite() || !(-1.0..=1.0).contains(&s) {
            return Err(Error::InvalidConfig(format!("score {s} for {id} outside [-1, 1]")));
        }
        xs.push(s);
        gs.push(g);
    }
    let mut distinct = gs.clone();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(Error::UndefinedAlpha("gold labels take fewer than two values".into()));
    }

    let alpha_of = |edges: &[f64]| -> Result<f64> {
        let labels: Vec<u8> = xs.iter().map(|&s| label_for(s, edges)).collect();
        alpha_two_raters(&gs, &labels, spec)
    };
    let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let step = (hi - lo) / 4.0;
    let start = [lo + step, lo + 2.0 * step, lo + 3.0 * step];
    let initial_alpha = alpha_of(&start)?;

    let objective = |raw: &[f64]| -> f64 {
        match alpha_of(&sorted3(raw)) {
            Ok(a) => -a,
            Err(_) => f64::INFINITY,
        }
    };
    let mut best: Option<(Vec<f64>, f64)> = None;
    for r in 0..config.restarts.max(1) {
        let offset = 0.02 * r as f64;
        let x0: Vec<f64> = start
            .iter()
            .enumerate()
            .map(|(i, &s)| if i % 2 == 0 { s + offset } else { s - offset })
            .collect();
        let m = nelder_mead(objective, &x0, config)?;
        if best.as_ref().is_none_or(|(_, v)| m.value < *v) {
            best = Some((m.x, m.value));
        }
    }
    let (raw, value) = best.expect("at least one restart");
    let (raw, value) = if -value < initial_alpha {
        (start.to_vec(), -initial_alpha)
    } else {
        (raw, value)
    };

    let mut unique = xs.clone();
    unique.sort_by(f64::total_cmp);
    unique.dedup();
    let edges = canonical_edges(sorted3(&raw), &unique)?;
    Ok(ThresholdFit {
        edges,
        alpha_train: -value,
        spec,
        initial_alpha,
    })
}

/// Independent fits per language tag, computed in parallel.
pub fn fit_thresholds_per_language(
    pairs: &[UsagePair],
    scores: &BTreeMap<String, f64>,
    spec: AlphaSpec,
    config: &SimplexConfig,
) -> Result<BTreeMap<String, ThresholdFit>> {
    let mut by_lang: BTreeMap<&str, BTreeMap<String, u8>> = BTreeMap::new();
    for p in pairs {
        if let Some(l) = p.gold.median_label {
            by_lang
                .entry(p.language.as_str())
                .or_default()
                .insert(p.instance_id.clone(), l);
        }
    }
    let entries: Vec<(&str, BTreeMap<String, u8>)> = by_lang.into_iter().collect();
    entries
        .into_par_iter()
        .map(|(lang, gold)| Ok((lang.to_string(), fit_thresholds(scores, &gold, spec, config)?)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn maps(data: &[(f64, u8)]) -> (BTreeMap<String, f64>, BTreeMap<String, u8>) {
        let scores = data
            .iter()
            .enumerate()
            .map(|(i, (s, _))| (format!("i{i:03}"), *s))
            .collect();
        let gold = data
            .iter()
            .enumerate()
            .map(|(i, (_, g))| (format!("i{i:03}"), *g))
            .collect();
        (scores, gold)
    }

    #[test]
    fn label_mapping_examples() {
        let t = ThresholdSet::new([-0.5, 0.0, 0.5]).unwrap();
        assert_eq!(map_score_to_label(-0.7, &t), 1);
        assert_eq!(map_score_to_label(0.5, &t), 3);
        assert_eq!(map_score_to_label(0.9, &t), 4);
        assert_eq!(map_score_to_label(-0.5, &t), 1);
    }

    #[test]
    fn separable_fixture() {
        let (s, g) = maps(&[
            (0.10, 1),
            (0.15, 1),
            (0.40, 2),
            (0.45, 2),
            (0.60, 3),
            (0.65, 3),
            (0.90, 4),
            (0.95, 4),
        ]);
        let fit = fit_thresholds(&s, &g, AlphaSpec::default(), &SimplexConfig::default()).unwrap();
        assert_eq!(fit.alpha_train, 1.0);
        let e = fit.edges.edges();
        assert!(0.15 < e[0] && e[0] < 0.40);
        assert!(0.45 < e[1] && e[1] < 0.60);
        assert!(0.65 < e[2] && e[2] < 0.90);
    }

    #[test]
    fn constant_gold_is_undefined() {
        let (s, g) = maps(&[(0.1, 2), (0.5, 2), (0.9, 2)]);
        assert!(matches!(
            fit_thresholds(&s, &g, AlphaSpec::default(), &SimplexConfig::default()),
            Err(Error::UndefinedAlpha(_))
        ));
    }

    #[test]
    fn missing_score_is_an_error() {
        let (s, mut g) = maps(&[(0.1, 1), (0.9, 4)]);
        g.insert("zzz".into(), 2);
        assert!(fit_thresholds(&s, &g, AlphaSpec::default(), &SimplexConfig::default()).is_err());
    }

    #[test]
    fn canonical_edges_preserve_partition() {
        let unique = [-0.2, 0.1, 0.3];
        // two edges in the same gap, one below everything
        let e = canonical_edges([-0.9, 0.15, 0.2], &unique).unwrap().edges();
        assert!(-1.0 < e[0] && e[0] < -0.2);
        assert!(0.1 < e[1] && e[1] < e[2] && e[2] < 0.3);
        // edge equal to a score keeps that score in the lower bin
        let e = canonical_edges([-0.2, 0.1, 0.3], &unique).unwrap().edges();
        assert!(-0.2 < e[0] && e[0] < 0.1 && 0.3 < e[2]);
    }
}
