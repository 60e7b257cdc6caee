//! End-to-end building blocks shared by the command line and bindings:
//! opening layer stores, fitting transforms and thresholds for an annotator
//! configuration, and evaluating predictions.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ensemble::{AnnotatorBank, FittedAnnotator};
use crate::error::{Error, Result};
use crate::geometry::{fit_transform, pair_keys, score_pair, TransformStats};
use crate::metrics::{alpha_two_raters, spearman_rho, AlphaSpec};
use crate::model::{AnnotatorConfig, BaseModel, TransformKind, UsagePair};
use crate::optim::SimplexConfig;
use crate::store::{store_dir, EmbeddingStore};
use crate::threshold::{fit_thresholds, ThresholdFit};

/// Which vectors a transform is fitted on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FitScope {
    /// Both sides of every training pair.
    #[default]
    Train,
    /// Every vector in the store.
    All,
}

impl FromStr for FitScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(FitScope::Train),
            "all" => Ok(FitScope::All),
            _ => Err(Error::InvalidConfig(format!("unknown fit scope {s:?} (train|all)"))),
        }
    }
}

impl fmt::Display for FitScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FitScope::Train => "train",
            FitScope::All => "all",
        })
    }
}

pub fn open_layer_store(root: impl AsRef<Path>, model_id: &str, layer: u32) -> Result<EmbeddingStore> {
    let dir = store_dir(root, model_id, layer);
    if !dir.is_dir() {
        return Err(Error::MissingStore(format!(
            "{model_id} layer {layer} ({})",
            dir.display()
        )));
    }
    EmbeddingStore::open(dir)
}

pub fn fit_layer_transform(
    store: &EmbeddingStore,
    kind: TransformKind,
    scope: FitScope,
    train: &[UsagePair],
) -> Result<TransformStats> {
    if kind == TransformKind::None {
        return Ok(TransformStats::identity(store.dim()));
    }
    let matrix = match scope {
        FitScope::Train => store.get_matrix(&pair_keys(train))?,
        FitScope::All => store.all_vectors(),
    };
    fit_transform(kind, &matrix)
}

/// Scores every pair, skipping (and counting) pairs that cannot be scored.
pub fn score_corpus(
    store: &EmbeddingStore,
    stats: &TransformStats,
    pairs: &[UsagePair],
) -> Result<(BTreeMap<String, f64>, usize)> {
    let mut scores = BTreeMap::new();
    let mut skipped = 0;
    for p in pairs {
        match score_pair(store, stats, &p.instance_id) {
            Ok(s) => {
                scores.insert(p.instance_id.clone(), s);
            }
            Err(e @ Error::ZeroVector { .. }) => {
                log::warn!("{e}; pair skipped");
                skipped += 1;
            }
            Err(e) => return Err(e),
        }
    }
    Ok((scores, skipped))
}

/// Median gold labels of `pairs` restricted to ids present in `scores`.
pub fn gold_labels_for(pairs: &[UsagePair], scores: &BTreeMap<String, f64>) -> BTreeMap<String, u8> {
    pairs
        .iter()
        .filter(|p| scores.contains_key(&p.instance_id))
        .filter_map(|p| p.gold.median_label.map(|l| (p.instance_id.clone(), l)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub scope: FitScope,
    /// Fit thresholds as well as the transform.
    pub thresholds: bool,
    pub alpha: AlphaSpec,
    pub simplex: SimplexConfig,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            scope: FitScope::Train,
            thresholds: true,
            alpha: AlphaSpec::default(),
            simplex: SimplexConfig::default(),
        }
    }
}

/// Transform (and optionally thresholds) for one configuration on a store.
pub fn fit_on_store(
    store: &EmbeddingStore,
    cfg: AnnotatorConfig,
    train: &[UsagePair],
    opts: &FitOptions,
) -> Result<(FittedAnnotator, Option<ThresholdFit>)> {
    let stats = fit_layer_transform(store, cfg.transform, opts.scope, train)?;
    let fit = if opts.thresholds {
        let (scores, _) = score_corpus(store, &stats, train)?;
        let gold = gold_labels_for(train, &scores);
        Some(fit_thresholds(&scores, &gold, opts.alpha, &opts.simplex)?)
    } else {
        None
    };
    Ok((
        FittedAnnotator {
            config: cfg,
            stats,
            thresholds: fit.as_ref().map(|f| f.edges),
        },
        fit,
    ))
}

/// Opens the stores behind `configs` and fits every configuration, in
/// parallel. Failures name the offending configuration.
pub fn build_bank(
    root: impl AsRef<Path>,
    configs: &[AnnotatorConfig],
    train: &[UsagePair],
    opts: &FitOptions,
) -> Result<AnnotatorBank> {
    let root = root.as_ref();
    let mut by_store: BTreeMap<(BaseModel, u32), Vec<AnnotatorConfig>> = BTreeMap::new();
    for cfg in configs {
        let entry = by_store.entry((cfg.model, cfg.layer())).or_default();
        if !entry.contains(cfg) {
            entry.push(*cfg);
        }
    }
    let opened: Vec<((BaseModel, u32), EmbeddingStore, Vec<AnnotatorConfig>)> = by_store
        .into_iter()
        .map(|((model, layer), cfgs)| Ok(((model, layer), open_layer_store(root, model.model_id(), layer)?, cfgs)))
        .collect::<Result<_>>()?;
    let jobs: Vec<(usize, AnnotatorConfig)> = opened
        .iter()
        .enumerate()
        .flat_map(|(i, (_, _, cfgs))| cfgs.iter().map(move |c| (i, *c)))
        .collect();
    let fitted: Vec<FittedAnnotator> = jobs
        .into_par_iter()
        .map(|(i, cfg)| {
            fit_on_store(&opened[i].1, cfg, train, opts)
                .map(|(f, _)| f)
                .inspect_err(|e| log::error!("fitting {cfg}: {e}"))
        })
        .collect::<Result<_>>()?;
    let mut bank = AnnotatorBank::new();
    for ((model, layer), store, _) in opened {
        bank.insert_store(model, layer, store);
    }
    for f in fitted {
        bank.insert_fitted(f);
    }
    Ok(bank)
}

/// Ordinal alpha between predicted and gold labels over shared ids.
pub fn evaluate_labels(
    predicted: &BTreeMap<String, u8>,
    gold: &BTreeMap<String, u8>,
    spec: AlphaSpec,
) -> Result<(f64, usize)> {
    let (a, b): (Vec<u8>, Vec<u8>) = predicted
        .iter()
        .filter_map(|(id, p)| gold.get(id).map(|g| (*g, *p)))
        .unzip();
    if a.is_empty() {
        return Err(Error::EmptyData("no predicted instance has a gold label".into()));
    }
    Ok((alpha_two_raters(&a, &b, spec)?, a.len()))
}

/// Spearman correlation between predicted and gold scores over shared ids.
pub fn evaluate_scores(predicted: &BTreeMap<String, f64>, gold: &BTreeMap<String, f64>) -> Result<(f64, usize)> {
    let (a, b): (Vec<f64>, Vec<f64>) = predicted
        .iter()
        .filter_map(|(id, p)| gold.get(id).map(|g| (*p, *g)))
        .unzip();
    if a.is_empty() {
        return Err(Error::EmptyData("no predicted instance has a gold score".into()));
    }
    Ok((spearman_rho(&a, &b)?, a.len()))
}

/// Grid configurations whose (model, layer) store exists under `root`.
pub fn available_configs(root: impl AsRef<Path>) -> Vec<AnnotatorConfig> {
    let root = root.as_ref();
    AnnotatorConfig::grid()
        .into_iter()
        .filter(|c| {
            store_dir(root, c.model.model_id(), c.layer())
                .join("manifest.json")
                .is_file()
        })
        .collect()
}

/// Splits pairs by language tag, preserving order.
pub fn by_language(pairs: &[UsagePair]) -> BTreeMap<String, Vec<UsagePair>> {
    let mut out: BTreeMap<String, Vec<UsagePair>> = BTreeMap::new();
    for p in pairs {
        out.entry(p.language.clone()).or_default().push(p.clone());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::parse_annotator_group;
    use crate::simulator::{simulate_corpus, SimConfig};

    fn synthetic(n: usize, sigma: f64, seed: u64) -> (tempfile::TempDir, Vec<UsagePair>) {
        let dir = tempfile::tempdir().unwrap();
        let corpus = simulate_corpus(SimConfig {
            n_items: n,
            sigma_range: (sigma, sigma),
            n_virtual: 4,
            seed,
            ..SimConfig::default()
        })
        .unwrap();
        corpus.write_stores(dir.path(), 8).unwrap();
        (dir, corpus.pairs)
    }

    #[test]
    fn bank_fits_each_config() {
        let (dir, pairs) = synthetic(60, 0.1, 1);
        let cfgs = parse_annotator_group("AhX-AhY-AiZ-AjW").unwrap();
        let bank = build_bank(dir.path(), &cfgs, &pairs, &FitOptions::default()).unwrap();
        for c in &cfgs {
            let f = bank.fitted(c).unwrap();
            assert_eq!(f.stats.kind, c.transform);
            assert!(f.thresholds.is_some());
        }
        let missing = parse_annotator_group("DkX").unwrap();
        assert!(matches!(
            build_bank(dir.path(), &missing, &pairs, &FitOptions::default()),
            Err(Error::MissingStore(_))
        ));
    }

    #[test]
    fn available_configs_follow_stores() {
        let (dir, _) = synthetic(5, 0.1, 2);
        let cfgs = available_configs(dir.path());
        // four virtual stores: Llama-7B at every layer code, all four transforms each
        assert_eq!(cfgs.len(), 16);
        assert!(cfgs.iter().all(|c| c.model == BaseModel::Llama7b));
    }

    #[test]
    fn evaluation_helpers() {
        let gold: BTreeMap<String, u8> = [("a", 1), ("b", 2), ("c", 4)]
            .iter()
            .map(|(k, v)| (k.to_string(), *v))
            .collect();
        let (alpha, n) = evaluate_labels(&gold, &gold, AlphaSpec::default()).unwrap();
        assert_eq!((alpha, n), (1.0, 3));
        let g: BTreeMap<String, f64> = gold.iter().map(|(k, v)| (k.clone(), *v as f64)).collect();
        let p: BTreeMap<String, f64> = g.iter().map(|(k, v)| (k.clone(), v * v)).collect();
        assert_eq!(evaluate_scores(&p, &g).unwrap().0, 1.0);
        assert!(evaluate_scores(&BTreeMap::new(), &g).is_err());
    }

    #[test]
    fn fit_scope_parsing() {
        assert_eq!("all".parse::<FitScope>().unwrap(), FitScope::All);
        assert!("dev".parse::<FitScope>().is_err());
    }
}
