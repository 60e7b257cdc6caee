//! Synthetic ground truth: each item's judgments are draws from
//! `N(mu, sigma^2)` discretized onto the label grid, and optional virtual
//! annotators read `mu` with noise of the same `sigma`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    AnnotatorConfig, BaseModel, GaussianPopulation, GoldLabels, LayerCode, Span, TransformKind, UsagePair,
};
use crate::rng::{domain, standard_normal, stream_rng, uniform};
use crate::store::{store_dir, EmbeddingStore, VectorKey};

/// Score midpoint and half-range linking the 1..=4 scale to cosine `[-1, 1]`.
pub const LINK_MID: f64 = 2.5;
pub const LINK_HALF_RANGE: f64 = 1.5;

/// Maps a 1..=4 relatedness score to cosine, clamping first.
pub fn score_to_cosine(score: f64) -> f64 {
    (score.clamp(1.0, 4.0) - LINK_MID) / LINK_HALF_RANGE
}

pub fn cosine_to_score(cosine: f64) -> f64 {
    cosine.clamp(-1.0, 1.0) * LINK_HALF_RANGE + LINK_MID
}

/// Rounds half away from zero and clamps onto 1..=4.
pub fn discretize(draw: f64) -> u8 {
    draw.round().clamp(1.0, 4.0) as u8
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimItem {
    pub population: GaussianPopulation,
    pub true_score: f64,
    /// Continuous draws before discretization.
    pub raw: Vec<f64>,
    pub judgments: Vec<u8>,
    pub gold: GoldLabels,
}

fn draw_item<R: rand::Rng>(population: GaussianPopulation, rng: &mut R) -> SimItem {
    let raw: Vec<f64> = (0..population.n_annotators)
        .map(|_| population.mu + population.sigma * standard_normal(rng))
        .collect();
    let judgments: Vec<u8> = raw.iter().map(|&d| discretize(d)).collect();
    let gold = GoldLabels::from_judgments(&judgments).expect("discretized judgments are valid");
    SimItem {
        population,
        true_score: population.mu,
        raw,
        judgments,
        gold,
    }
}

pub fn simulate_item(population: GaussianPopulation, seed: u64) -> SimItem {
    draw_item(population, &mut stream_rng(seed, domain::JUDGMENTS, 0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n_items: usize,
    pub mu_range: (f64, f64),
    pub sigma_range: (f64, f64),
    pub n_annotators: usize,
    /// Number of virtual annotators (noisy readers of `mu`), at most 16.
    pub n_virtual: usize,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            n_items: 200,
            mu_range: (1.0, 4.0),
            sigma_range: (0.0, 0.8),
            n_annotators: 10,
            n_virtual: 8,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let (mlo, mhi) = self.mu_range;
        let (slo, shi) = self.sigma_range;
        if !(mlo.is_finite() && mhi.is_finite() && 1.0 <= mlo && mlo <= mhi && mhi <= 4.0) {
            return Err(Error::InvalidConfig(format!(
                "mu range {:?} must satisfy 1 <= lo <= hi <= 4",
                self.mu_range
            )));
        }
        if !(slo.is_finite() && shi.is_finite() && 0.0 <= slo && slo <= shi) {
            return Err(Error::InvalidConfig(format!(
                "sigma range {:?} must satisfy 0 <= lo <= hi",
                self.sigma_range
            )));
        }
        if self.n_annotators == 0 {
            return Err(Error::InvalidConfig("n_annotators must be >= 1".into()));
        }
        if self.n_virtual > MAX_VIRTUAL {
            return Err(Error::InvalidConfig(format!(
                "at most {MAX_VIRTUAL} virtual annotators are supported"
            )));
        }
        Ok(())
    }
}

pub const MAX_VIRTUAL: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruthRow {
    pub mu: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone)]
pub struct SimCorpus {
    pub pairs: Vec<UsagePair>,
    pub truth: BTreeMap<String, TruthRow>,
    /// `readings[i][k]`: virtual annotator `k`'s unclamped score for item `i`.
    pub readings: Vec<Vec<f64>>,
    pub config: SimConfig,
}

/// Configuration acting as virtual annotator `k`: the k-th (model, layer)
/// combination in code order, without a transform.
pub fn virtual_config(k: usize) -> AnnotatorConfig {
    let model = BaseModel::ALL[k / 4];
    let layer = LayerCode::ALL[k % 4];
    AnnotatorConfig::new(model, layer, TransformKind::None)
}

fn instance_id(i: usize) -> String {
    format!("s{i:05}")
}

fn synthetic_pair(i: usize, judgments: Vec<u8>, gold: GoldLabels) -> UsagePair {
    UsagePair {
        instance_id: instance_id(i),
        lemma: "target".into(),
        language: "synthetic".into(),
        context_1: format!("the target of item {i}"),
        span_1: Span::new(4, 10),
        context_2: format!("a target seen again in item {i}"),
        span_2: Span::new(2, 8),
        judgments,
        gold,
    }
}

pub fn simulate_corpus(config: SimConfig) -> Result<SimCorpus> {
    config.validate()?;
    let items: Vec<(UsagePair, TruthRow, Vec<f64>)> = (0..config.n_items)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(config.seed, domain::ITEM, i as u64);
            let mu = uniform(&mut rng, config.mu_range.0, config.mu_range.1);
            let sigma = uniform(&mut rng, config.sigma_range.0, config.sigma_range.1);
            let population = GaussianPopulation::new(mu, sigma, config.n_annotators)?;
            let item = draw_item(population, &mut stream_rng(config.seed, domain::JUDGMENTS, i as u64));
            let mut rng = stream_rng(config.seed, domain::READINGS, i as u64);
            let readings = (0..config.n_virtual)
                .map(|_| mu + sigma * standard_normal(&mut rng))
                .collect();
            Ok((
                synthetic_pair(i, item.judgments, item.gold),
                TruthRow { mu, sigma },
                readings,
            ))
        })
        .collect::<Result<_>>()?;
    let mut pairs = Vec::with_capacity(items.len());
    let mut truth = BTreeMap::new();
    let mut readings = Vec::with_capacity(items.len());
    for (pair, t, r) in items {
        truth.insert(pair.instance_id.clone(), t);
        pairs.push(pair);
        readings.push(r);
    }
    Ok(SimCorpus {
        pairs,
        truth,
        readings,
        config,
    })
}

/// Two unit vectors of length `dim` whose cosine equals `cosine`:
/// `v2 = cos·v1 + sin·v_perp`.
pub fn planted_pair<R: rand::Rng>(cosine: f64, dim: usize, rng: &mut R) -> (Vec<f64>, Vec<f64>) {
    assert!(dim >= 2, "planted pairs need dim >= 2");
    let unit = |v: Vec<f64>| {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / n).collect::<Vec<f64>>()
    };
    let v1 = unit((0..dim).map(|_| standard_normal(rng)).collect());
    let w: Vec<f64> = (0..dim).map(|_| standard_normal(rng)).collect();
    let proj: f64 = w.iter().zip(&v1).map(|(a, b)| a * b).sum();
    let perp = unit(w.iter().zip(&v1).map(|(a, b)| a - proj * b).collect());
    let c = cosine.clamp(-1.0, 1.0);
    let s = (1.0 - c * c).max(0.0).sqrt();
    let v2 = v1.iter().zip(&perp).map(|(a, b)| c * a + s * b).collect();
    (v1, v2)
}

impl SimCorpus {
    /// Writes one store per virtual annotator under `root` and returns the
    /// matching configurations.
    pub fn write_stores(&self, root: impl AsRef<Path>, dim: usize) -> Result<Vec<(AnnotatorConfig, PathBuf)>> {
        if dim < 2 {
            return Err(Error::InvalidConfig("synthetic stores need dim >= 2".into()));
        }
        let root = root.as_ref();
        (0..self.config.n_virtual)
            .into_par_iter()
            .map(|k| {
                let cfg = virtual_config(k);
                let dir = store_dir(root, cfg.model.model_id(), cfg.layer());
                let mut store =
                    EmbeddingStore::create(&dir, cfg.model.model_id(), cfg.layer(), dim, "disagree-kit simulate")?;
                for (i, pair) in self.pairs.iter().enumerate() {
                    let mut rng = stream_rng(self.config.seed, domain::VECTORS + k as u64, i as u64);
                    let (v1, v2) = planted_pair(score_to_cosine(self.readings[i][k]), dim, &mut rng);
                    let [k1, k2] = VectorKey::pair(&pair.instance_id);
                    store.put_vector(k1, &v1.iter().map(|&x| x as f32).collect::<Vec<_>>())?;
                    store.put_vector(k2, &v2.iter().map(|&x| x as f32).collect::<Vec<_>>())?;
                }
                store.save()?;
                Ok((cfg, dir))
            })
            .collect()
    }

    pub fn virtual_configs(&self) -> Vec<AnnotatorConfig> {
        (0..self.config.n_virtual).map(virtual_config).collect()
    }
}

pub fn write_truth(truth: &BTreeMap<String, TruthRow>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("instance_id\tmu\tsigma\n");
    for (id, t) in truth {
        let _ = writeln!(out, "{id}\t{:.6}\t{:.6}", t.mu, t.sigma);
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_truth(path: impl AsRef<Path>) -> Result<BTreeMap<String, TruthRow>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();
    if lines.next().map(|(_, h)| h) != Some("instance_id\tmu\tsigma") {
        return Err(Error::MissingColumn {
            path: path.to_path_buf(),
            column: "instance_id\tmu\tsigma".into(),
        });
    }
    let mut out = BTreeMap::new();
    for (i, line) in lines.filter(|(_, l)| !l.is_empty()) {
        let bad = |reason: &str| Error::MalformedRow {
            line: i + 1,
            reason: reason.to_string(),
        };
        let parts: Vec<&str> = line.split('\t').collect();
        if parts.len() != 3 {
            return Err(bad("expected 3 fields"));
        }
        let mu = parts[1].parse().map_err(|_| bad("bad mu"))?;
        let sigma = parts[2].parse().map_err(|_| bad("bad sigma"))?;
        out.insert(parts[0].to_string(), TruthRow { mu, sigma });
    }
    Ok(out)
}
