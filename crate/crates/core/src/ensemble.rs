//! Virtual-annotator ensembling for disagreement prediction.
//!
//! Each configuration in a subset yields a relatedness score and a
//! threshold label per usage pair; disagreement is the spread of those
//! outputs (STD over scores, MPD or VR over labels).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{score_pair, TransformStats};
use crate::metrics::spearman_rho;
use crate::model::{
    format_annotator_group, mean_pairwise_difference, AnnotatorConfig, BaseModel, ThresholdSet, UsagePair,
};
use crate::rng::{domain, stream_rng};
use crate::store::EmbeddingStore;
use crate::threshold::map_score_to_label;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// All members share one base model.
    Homo,
    /// All members use pairwise distinct base models.
    Hetero,
    /// Unconstrained.
    Mixed,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Homo, Strategy::Hetero, Strategy::Mixed];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Homo => "homo",
            Strategy::Hetero => "hetero",
            Strategy::Mixed => "mixed",
        }
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "homo" => Ok(Strategy::Homo),
            "hetero" | "hete" => Ok(Strategy::Hetero),
            "mixed" => Ok(Strategy::Mixed),
            _ => Err(Error::InvalidConfig(format!("unknown strategy {s:?}"))),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Measure {
    /// Population standard deviation of continuous scores.
    Std,
    /// Mean pairwise absolute difference of labels.
    Mpd,
    /// Variation ratio of labels.
    Vr,
}

impl Measure {
    pub const ALL: [Measure; 3] = [Measure::Std, Measure::Mpd, Measure::Vr];

    pub fn name(self) -> &'static str {
        match self {
            Measure::Std => "std",
            Measure::Mpd => "mpd",
            Measure::Vr => "vr",
        }
    }
}

impl FromStr for Measure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "std" => Ok(Measure::Std),
            "mpd" => Ok(Measure::Mpd),
            "vr" => Ok(Measure::Vr),
            _ => Err(Error::InvalidConfig(format!("unknown measure {s:?}"))),
        }
    }
}

impl fmt::Display for Measure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSpec {
    pub strategy: Strategy,
    pub subset_size: usize,
    pub pool: Vec<AnnotatorConfig>,
    pub seed: u64,
    pub n_samples: usize,
}

impl EnsembleSpec {
    pub fn new(strategy: Strategy, pool: Vec<AnnotatorConfig>, seed: u64) -> Self {
        EnsembleSpec {
            strategy,
            subset_size: 4,
            pool,
            seed,
            n_samples: 500,
        }
    }

    fn pool_by_model(&self) -> BTreeMap<BaseModel, Vec<AnnotatorConfig>> {
        let mut out: BTreeMap<BaseModel, Vec<AnnotatorConfig>> = BTreeMap::new();
        for cfg in self.unique_pool() {
            out.entry(cfg.model).or_default().push(cfg);
        }
        out
    }

    fn unique_pool(&self) -> Vec<AnnotatorConfig> {
        let mut seen = BTreeSet::new();
        self.pool.iter().copied().filter(|c| seen.insert(*c)).collect()
    }

    /// Models with enough configurations to fill a homogeneous subset.
    fn homo_models(&self) -> Vec<(BaseModel, Vec<AnnotatorConfig>)> {
        self.pool_by_model()
            .into_iter()
            .filter(|(_, cfgs)| cfgs.len() >= self.subset_size)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.subset_size == 0 {
            return Err(Error::InfeasibleStrategy("subset size must be positive".into()));
        }
        let pool = self.unique_pool();
        if pool.len() < self.subset_size {
            return Err(Error::InfeasibleStrategy(format!(
                "pool of {} configurations cannot fill subsets of {}",
                pool.len(),
                self.subset_size
            )));
        }
        match self.strategy {
            Strategy::Homo if self.homo_models().is_empty() => Err(Error::InfeasibleStrategy(format!(
                "no model has {} configurations in the pool",
                self.subset_size
            ))),
            Strategy::Hetero if self.pool_by_model().len() < self.subset_size => {
                Err(Error::InfeasibleStrategy(format!(
                    "pool has {} distinct models, hetero subsets need {}",
                    self.pool_by_model().len(),
                    self.subset_size
                )))
            }
            _ => Ok(()),
        }
    }
}

fn sample_subset_unchecked(spec: &EnsembleSpec, k: u64) -> Vec<AnnotatorConfig> {
    let mut rng = stream_rng(spec.seed, domain::SUBSETS, k);
    let n = spec.subset_size;
    match spec.strategy {
        Strategy::Mixed => {
            let pool = spec.unique_pool();
            index::sample(&mut rng, pool.len(), n)
                .into_iter()
                .map(|i| pool[i])
                .collect()
        }
        Strategy::Homo => {
            let models = spec.homo_models();
            let (_, cfgs) = &models[rng.random_range(0..models.len())];
            index::sample(&mut rng, cfgs.len(), n)
                .into_iter()
                .map(|i| cfgs[i])
                .collect()
        }
        Strategy::Hetero => {
            let by_model: Vec<Vec<AnnotatorConfig>> = spec.pool_by_model().into_values().collect();
            index::sample(&mut rng, by_model.len(), n)
                .into_iter()
                .map(|m| {
                    let cfgs = &by_model[m];
                    cfgs[rng.random_range(0..cfgs.len())]
                })
                .collect()
        }
    }
}

/// Subset `k` of the sampling sequence; a pure function of `(spec, k)`.
pub fn sample_subset(spec: &EnsembleSpec, k: u64) -> Result<Vec<AnnotatorConfig>> {
    spec.validate()?;
    Ok(sample_subset_unchecked(spec, k))
}

/// `n_samples` subsets; duplicates across samples are allowed.
pub fn sample_subsets(spec: &EnsembleSpec) -> Result<Vec<Vec<AnnotatorConfig>>> {
    spec.validate()?;
    Ok((0..spec.n_samples as u64)
        .into_par_iter()
        .map(|k| sample_subset_unchecked(spec, k))
        .collect())
}

/// One virtual annotator's fitted parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedAnnotator {
    pub config: AnnotatorConfig,
    pub stats: TransformStats,
    /// Needed only by the label-based measures.
    pub thresholds: Option<ThresholdSet>,
}

/// Stores and fitted parameters that virtual annotators resolve against.
#[derive(Debug, Default)]
pub struct AnnotatorBank {
    stores: BTreeMap<(BaseModel, u32), EmbeddingStore>,
    fitted: BTreeMap<AnnotatorConfig, FittedAnnotator>,
}

impl AnnotatorBank {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert_store(&mut self, model: BaseModel, layer: u32, store: EmbeddingStore) {
        self.stores.insert((model, layer), store);
    }

    pub fn insert_fitted(&mut self, fitted: FittedAnnotator) {
        self.fitted.insert(fitted.config, fitted);
    }

    pub fn store(&self, model: BaseModel, layer: u32) -> Option<&EmbeddingStore> {
        self.stores.get(&(model, layer))
    }

    pub fn fitted(&self, cfg: &AnnotatorConfig) -> Option<&FittedAnnotator> {
        self.fitted.get(cfg)
    }

    fn resolve(&self, cfg: &AnnotatorConfig) -> Result<(&EmbeddingStore, &FittedAnnotator)> {
        let store = self
            .store(cfg.model, cfg.layer())
            .ok_or_else(|| Error::MissingStore(format!("{cfg} ({} layer {})", cfg.model.model_id(), cfg.layer())))?;
        let fitted = self
            .fitted(cfg)
            .ok_or_else(|| Error::MissingStore(format!("{cfg} (no fitted transform/thresholds)")))?;
        Ok((store, fitted))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Annotation {
    pub config: AnnotatorConfig,
    /// `None` when scoring failed for this pair (e.g. a zeroed vector).
    pub score: Option<f64>,
    pub label: Option<u8>,
}

/// Per-instance annotations, one per configuration in the subset.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AnnotationMatrix {
    pub entries: BTreeMap<String, Vec<Annotation>>,
}

impl AnnotationMatrix {
    pub fn len(&self) -> usize {
        self.entries.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn missing(&self) -> usize {
        self.entries.values().flatten().filter(|a| a.score.is_none()).count()
    }
}

/// One configuration's annotations for every pair, in pair order.
pub fn annotate_config(cfg: &AnnotatorConfig, bank: &AnnotatorBank, pairs: &[UsagePair]) -> Result<Vec<Annotation>> {
    let (store, fitted) = bank.resolve(cfg)?;
    Ok(pairs
        .iter()
        .map(|p| match score_pair(store, &fitted.stats, &p.instance_id) {
            Ok(score) => Annotation {
                config: *cfg,
                score: Some(score),
                label: fitted.thresholds.as_ref().map(|t| map_score_to_label(score, t)),
            },
            Err(e) => {
                log::debug!("{cfg}: {} marked missing: {e}", p.instance_id);
                Annotation {
                    config: *cfg,
                    score: None,
                    label: None,
                }
            }
        })
        .collect())
}

/// Annotations of every configuration in `pool`, computed in parallel.
pub fn annotate_pool(
    pool: &[AnnotatorConfig],
    bank: &AnnotatorBank,
    pairs: &[UsagePair],
) -> Result<BTreeMap<AnnotatorConfig, Vec<Annotation>>> {
    let unique: BTreeSet<AnnotatorConfig> = pool.iter().copied().collect();
    unique
        .into_par_iter()
        .map(|cfg| Ok((cfg, annotate_config(&cfg, bank, pairs)?)))
        .collect()
}

fn matrix_from_columns(
    subset: &[AnnotatorConfig],
    columns: &BTreeMap<AnnotatorConfig, Vec<Annotation>>,
    pairs: &[UsagePair],
) -> Result<AnnotationMatrix> {
    let cols: Vec<&Vec<Annotation>> = subset
        .iter()
        .map(|c| columns.get(c).ok_or_else(|| Error::MissingStore(c.to_string())))
        .collect::<Result<_>>()?;
    let entries = pairs
        .iter()
        .enumerate()
        .map(|(i, p)| (p.instance_id.clone(), cols.iter().map(|col| col[i]).collect()))
        .collect();
    Ok(AnnotationMatrix { entries })
}

pub fn build_annotation_matrix(
    subset: &[AnnotatorConfig],
    bank: &AnnotatorBank,
    pairs: &[UsagePair],
) -> Result<AnnotationMatrix> {
    let columns = subset
        .iter()
        .map(|cfg| Ok((*cfg, annotate_config(cfg, bank, pairs)?)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    matrix_from_columns(subset, &columns, pairs)
}

/// Population standard deviation.
pub fn measure_std(scores: &[f64]) -> Result<f64> {
    if scores.len() < 2 {
        return Err(Error::InsufficientAnnotators {
            needed: 2,
            found: scores.len(),
        });
    }
    let n = scores.len() as f64;
    let mean = scores.iter().sum::<f64>() / n;
    Ok((scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n).sqrt())
}

pub fn measure_mpd(labels: &[u8]) -> Result<f64> {
    if labels.len() < 2 {
        return Err(Error::InsufficientAnnotators {
            needed: 2,
            found: labels.len(),
        });
    }
    mean_pairwise_difference(labels)
}

/// `1 - (modal count) / N`.
pub fn measure_vr(labels: &[u8]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::InsufficientAnnotators { needed: 1, found: 0 });
    }
    let mut counts = BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_insert(0usize) += 1;
    }
    let modal = counts.values().copied().max().unwrap_or(0);
    Ok(1.0 - modal as f64 / labels.len() as f64)
}

fn measure_annotations(annotations: &[Annotation], measure: Measure) -> Result<f64> {
    match measure {
        Measure::Std => {
            let scores: Vec<f64> = annotations.iter().filter_map(|a| a.score).collect();
            measure_std(&scores)
        }
        Measure::Mpd | Measure::Vr => {
            let labels: Vec<u8> = annotations.iter().filter_map(|a| a.label).collect();
            if measure == Measure::Mpd {
                measure_mpd(&labels)
            } else {
                measure_vr(&labels)
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DisagreementPrediction {
    pub values: BTreeMap<String, f64>,
    /// Instances without enough non-missing annotations for the measure.
    pub omitted: usize,
}

pub fn predict_disagreement(matrix: &AnnotationMatrix, measure: Measure) -> DisagreementPrediction {
    let mut out = DisagreementPrediction::default();
    for (id, annotations) in &matrix.entries {
        match measure_annotations(annotations, measure) {
            Ok(v) => {
                out.values.insert(id.clone(), v);
            }
            Err(_) => out.omitted += 1,
        }
    }
    if out.omitted > 0 {
        log::warn!("{measure}: {} instances omitted (too few annotations)", out.omitted);
    }
    out
}

/// Spearman correlation between predictions and gold over shared ids.
pub fn correlate(pred: &BTreeMap<String, f64>, gold: &BTreeMap<String, f64>) -> Result<f64> {
    let (xs, ys): (Vec<f64>, Vec<f64>) = pred.iter().filter_map(|(id, p)| gold.get(id).map(|g| (*p, *g))).unzip();
    spearman_rho(&xs, &ys)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub rank: usize,
    /// Index of the subset in the sampling sequence.
    pub sample: usize,
    pub subset_code: String,
    pub measure: Measure,
    /// `None` for failed subsets.
    pub spearman: Option<f64>,
}

/// Evaluates `n_samples` subsets; rows are sorted by descending Spearman
/// (ties by sample index) with failed subsets last.
pub fn run_strategy_sweep(
    spec: &EnsembleSpec,
    bank: &AnnotatorBank,
    pairs: &[UsagePair],
    gold_disagreement: &BTreeMap<String, f64>,
    measures: &[Measure],
) -> Result<BTreeMap<Measure, Vec<SweepRow>>> {
    let subsets = sample_subsets(spec)?;
    let columns = annotate_pool(&spec.pool, bank, pairs)?;
    sweep_subsets(&subsets, &columns, pairs, gold_disagreement, measures)
}

pub fn sweep_subsets(
    subsets: &[Vec<AnnotatorConfig>],
    columns: &BTreeMap<AnnotatorConfig, Vec<Annotation>>,
    pairs: &[UsagePair],
    gold: &BTreeMap<String, f64>,
    measures: &[Measure],
) -> Result<BTreeMap<Measure, Vec<SweepRow>>> {
    let per_subset: Vec<Vec<Option<f64>>> = subsets
        .par_iter()
        .map(|subset| {
            let matrix = matrix_from_columns(subset, columns, pairs)?;
            Ok(measures
                .iter()
                .map(|&m| correlate(&predict_disagreement(&matrix, m).values, gold).ok())
                .collect())
        })
        .collect::<Result<_>>()?;
    let mut out = BTreeMap::new();
    for (mi, &measure) in measures.iter().enumerate() {
        let mut rows: Vec<SweepRow> = subsets
            .iter()
            .enumerate()
            .map(|(sample, subset)| SweepRow {
                rank: 0,
                sample,
                subset_code: format_annotator_group(subset),
                measure,
                spearman: per_subset[sample][mi],
            })
            .collect();
        rows.sort_by(|a, b| match (a.spearman, b.spearman) {
            (Some(x), Some(y)) => y.total_cmp(&x).then(a.sample.cmp(&b.sample)),
            (Some(_), None) => std::cmp::Ordering::Less,
            (None, Some(_)) => std::cmp::Ordering::Greater,
            (None, None) => a.sample.cmp(&b.sample),
        });
        for (i, r) in rows.iter_mut().enumerate() {
            r.rank = i + 1;
        }
        out.insert(measure, rows);
    }
    Ok(out)
}

pub fn top_k(rows: &[SweepRow], k: usize) -> Vec<&SweepRow> {
    rows.iter().filter(|r| r.spearman.is_some()).take(k).collect()
}

/// Sweep TSV: `rank, subset_code, measure, spearman` (`failed` for
/// undefined correlations).
pub fn format_sweep(rows: &[SweepRow]) -> String {
    let mut out = String::from("rank\tsubset_code\tmeasure\tspearman\n");
    for r in rows {
        let rho = r.spearman.map(|v| format!("{v:.6}")).unwrap_or_else(|| "failed".into());
        out.push_str(&format!("{}\t{}\t{}\t{}\n", r.rank, r.subset_code, r.measure, rho));
    }
    out
}

/// Mean Spearman over non-failed rows.
pub fn mean_spearman(rows: &[SweepRow]) -> Option<f64> {
    let vals: Vec<f64> = rows.iter().filter_map(|r| r.spearman).collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}
