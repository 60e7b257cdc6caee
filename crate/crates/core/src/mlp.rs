//! Small perceptrons on frozen embedding features: a 4-class classifier for
//! ordinal labels or a scalar regressor for disagreement scores.
//!
//! Gradients are computed by hand; training uses AdamW with a linear warmup
//! followed by a constant learning rate.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Prediction;
use crate::error::{Error, Result};
use crate::geometry::TransformStats;
use crate::model::NUM_LABELS;
use crate::rng::{domain, stream_rng};
use crate::store::{EmbeddingStore, VectorKey};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Depth {
    /// A single linear layer.
    Mlp1,
    /// Two linear layers with a ReLU between them.
    Mlp2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMode {
    /// `[v1 ‖ v2]`
    Concat,
    /// `[v1 ‖ v2 ‖ |v1 - v2|]`
    ConcatAbsDiff,
}

impl FeatureMode {
    pub fn width(self, dim: usize) -> usize {
        match self {
            FeatureMode::Concat => 2 * dim,
            FeatureMode::ConcatAbsDiff => 3 * dim,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerPool {
    Single,
    /// Mean of the four highest stored layers.
    Last4Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Classify4,
    Regress,
}

macro_rules! parse_enum {
    ($ty:ty, $($name:literal => $variant:expr),+ $(,)?) => {
        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s.to_ascii_lowercase().replace('-', "_").as_str() {
                    $($name => Ok($variant),)+
                    _ => Err(Error::InvalidConfig(format!(
                        "unknown {} {s:?}", stringify!($ty).to_ascii_lowercase()
                    ))),
                }
            }
        }
    };
}

parse_enum!(Depth, "mlp1" => Depth::Mlp1, "mlp2" => Depth::Mlp2);
parse_enum!(FeatureMode, "concat" => FeatureMode::Concat, "concat_abs_diff" => FeatureMode::ConcatAbsDiff);
parse_enum!(LayerPool, "single" => LayerPool::Single, "last4_mean" => LayerPool::Last4Mean);
parse_enum!(Task, "classify4" => Task::Classify4, "regress" => Task::Regress);

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Classify4 => "classify4",
            Task::Regress => "regress",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub depth: Depth,
    /// Hidden width; used by `Mlp2` only.
    pub hidden_dim: usize,
    pub features: FeatureMode,
    pub dropout: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_ratio: f64,
    pub weighted_loss: bool,
    pub seed: u64,
}

impl Default for MlpConfig {
    fn default() -> Self {
        MlpConfig {
            depth: Depth::Mlp2,
            hidden_dim: 256,
            features: FeatureMode::Concat,
            dropout: 0.1,
            epochs: 50,
            batch_size: 32,
            learning_rate: 1e-2,
            warmup_ratio: 0.1,
            weighted_loss: false,
            seed: 0,
        }
    }
}

impl MlpConfig {
    /// Label classifier: two layers, 50 epochs, batch 128.
    pub fn subtask1() -> Self {
        MlpConfig {
            epochs: 50,
            batch_size: 128,
            ..Self::default()
        }
    }

    /// Disagreement regressor, single layer: 200 epochs, batch 16.
    pub fn subtask2_mlp1() -> Self {
        MlpConfig {
            depth: Depth::Mlp1,
            epochs: 200,
            batch_size: 16,
            ..Self::default()
        }
    }

    /// Disagreement regressor, two layers: 50 epochs, batch 32.
    pub fn subtask2_mlp2() -> Self {
        MlpConfig {
            epochs: 50,
            batch_size: 32,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidConfig(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig("epochs and batch size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "learning rate {} must be positive",
                self.learning_rate
            )));
        }
        if !(0.0..=1.0).contains(&self.warmup_ratio) {
            return Err(Error::InvalidConfig(format!(
                "warmup ratio {} outside [0, 1]",
                self.warmup_ratio
            )));
        }
        if self.depth == Depth::Mlp2 && self.hidden_dim == 0 {
            return Err(Error::InvalidConfig("hidden dimension must be positive".into()));
        }
        Ok(())
    }
}

/// Element-wise mean of equally sized vectors.
pub fn mean_vectors(vectors: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = vectors
        .first()
        .ok_or_else(|| Error::EmptyData("no vectors to pool".into()))?;
    let mut out = vec![0.0; first.len()];
    for v in vectors {
        if v.len() != out.len() {
            return Err(Error::DimensionMismatch {
                expected: out.len(),
                found: v.len(),
            });
        }
        for (o, x) in out.iter_mut().zip(v) {
            *o += x;
        }
    }
    let n = vectors.len() as f64;
    out.iter_mut().for_each(|o| *o /= n);
    Ok(out)
}

pub fn assemble_features(v1: &[f64], v2: &[f64], mode: FeatureMode) -> Result<Vec<f64>> {
    if v1.len() != v2.len() {
        return Err(Error::DimensionMismatch {
            expected: v1.len(),
            found: v2.len(),
        });
    }
    let mut out = Vec::with_capacity(mode.width(v1.len()));
    out.extend_from_slice(v1);
    out.extend_from_slice(v2);
    if mode == FeatureMode::ConcatAbsDiff {
        out.extend(v1.iter().zip(v2).map(|(a, b)| (a - b).abs()));
    }
    Ok(out)
}

/// The layers to pool: the chosen one, or the four highest available.
pub fn pooled_layers(available: &[u32], layer: u32, pool: LayerPool) -> Result<Vec<u32>> {
    match pool {
        LayerPool::Single => {
            if available.contains(&layer) {
                Ok(vec![layer])
            } else {
                Err(Error::MissingStore(format!("layer {layer}")))
            }
        }
        LayerPool::Last4Mean => {
            let mut sorted = available.to_vec();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() < 4 {
                return Err(Error::MissingStore(format!(
                    "last4_mean needs 4 layer stores, found {}",
                    sorted.len()
                )));
            }
            Ok(sorted[sorted.len() - 4..].to_vec())
        }
    }
}

/// Features for one pair; each source is a layer store with its fitted
/// transform, and multiple sources are averaged before assembly.
pub fn build_features(
    sources: &[(&EmbeddingStore, &TransformStats)],
    instance_id: &str,
    mode: FeatureMode,
) -> Result<Vec<f64>> {
    if sources.is_empty() {
        return Err(Error::MissingStore("no layer stores for feature construction".into()));
    }
    let mut sides = [Vec::new(), Vec::new()];
    for (i, key) in VectorKey::pair(instance_id).iter().enumerate() {
        let per_layer = sources
            .iter()
            .map(|(store, stats)| stats.apply_vector(&store.get_vector(key)?))
            .collect::<Result<Vec<_>>>()?;
        sides[i] = mean_vectors(&per_layer)?;
    }
    assemble_features(&sides[0], &sides[1], mode)
}

pub fn build_feature_matrix(
    sources: &[(&EmbeddingStore, &TransformStats)],
    instance_ids: &[&str],
    mode: FeatureMode,
) -> Result<Array2<f64>> {
    let rows = instance_ids
        .iter()
        .map(|id| build_features(sources, id, mode))
        .collect::<Result<Vec<_>>>()?;
    let width = rows.first().map_or(0, Vec::len);
    Array2::from_shape_vec((rows.len(), width), rows.concat())
        .map_err(|e| Error::InvalidConfig(format!("feature matrix: {e}")))
}

/// Training targets, one per feature row.
#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Labels(Vec<u8>),
    Values(Vec<f64>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Labels(l) => l.len(),
            Targets::Values(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn task(&self) -> Task {
        match self {
            Targets::Labels(_) => Task::Classify4,
            Targets::Values(_) => Task::Regress,
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            Targets::Labels(l) => match l.iter().find(|&&y| !(1..=NUM_LABELS).contains(&y)) {
                Some(&bad) => Err(Error::InvalidJudgment(bad as i64)),
                None => Ok(()),
            },
            Targets::Values(v) => match v.iter().find(|y| !y.is_finite()) {
                Some(bad) => Err(Error::InvalidConfig(format!("non-finite regression target {bad}"))),
                None => Ok(()),
            },
        }
    }

    fn subset(&self, idx: &[usize]) -> Targets {
        match self {
            Targets::Labels(l) => Targets::Labels(idx.iter().map(|&i| l[i]).collect()),
            Targets::Values(v) => Targets::Values(idx.iter().map(|&i| v[i]).collect()),
        }
    }
}

/// Inverse-frequency class weights `N / (4 · count_c)`; absent classes get 0.
pub fn class_weights(labels: &[u8]) -> [f64; 4] {
    let mut counts = [0usize; 4];
    for &l in labels {
        counts[(l - 1) as usize] += 1;
    }
    let n = labels.len() as f64;
    counts.map(|c| if c == 0 { 0.0 } else { n / (4.0 * c as f64) })
}

/// A fully connected layer: `y = x Wᵀ + b` with `W` of shape `(out, in)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    fn zeros(out: usize, inp: usize) -> Self {
        Dense {
            weight: Array2::zeros((out, inp)),
            bias: Array1::zeros(out),
        }
    }

    fn uniform<R: Rng>(out: usize, inp: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (inp as f64).sqrt();
        let mut draw = || rng.random_range(-bound..=bound);
        let weight = Array2::from_shape_simple_fn((out, inp), &mut draw);
        let bias = Array1::from_shape_simple_fn(out, &mut draw);
        Dense { weight, bias }
    }

    fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.weight.t()) + &self.bias
    }

    fn n_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    pub task: Task,
    pub config: MlpConfig,
    pub layers: Vec<Dense>,
}

/// Intermediate values of one forward pass, kept for backprop.
struct Trace {
    /// Hidden pre-activations (Mlp2 only).
    pre: Option<Array2<f64>>,
    /// Hidden activations after ReLU and dropout (Mlp2 only).
    hidden: Option<Array2<f64>>,
    out: Array2<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct Shape {
    out: usize,
    #[serde(rename = "in")]
    inp: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ModelManifest {
    task: Task,
    config: MlpConfig,
    input_dim: usize,
    shapes: Vec<Shape>,
    dtype: String,
    weights: String,
}

const MANIFEST_FILE: &str = "model.json";
const WEIGHTS_FILE: &str = "weights.bin";

impl MlpModel {
    /// Uniform `±1/√fan_in` initialization from the config seed.
    pub fn init(task: Task, input_dim: usize, config: &MlpConfig) -> Result<Self> {
        config.validate()?;
        if input_dim == 0 {
            return Err(Error::InvalidConfig("input dimension must be positive".into()));
        }
        let mut rng = stream_rng(config.seed, domain::MLP_INIT, 0);
        let layers = Self::shapes_for(task, input_dim, config)
            .into_iter()
            .map(|s| Dense::uniform(s.out, s.inp, &mut rng))
            .collect();
        Ok(MlpModel {
            task,
            config: *config,
            layers,
        })
    }

    fn shapes_for(task: Task, input_dim: usize, config: &MlpConfig) -> Vec<Shape> {
        let head = match task {
            Task::Classify4 => NUM_LABELS as usize,
            Task::Regress => 1,
        };
        match config.depth {
            Depth::Mlp1 => vec![Shape {
                out: head,
                inp: input_dim,
            }],
            Depth::Mlp2 => vec![
                Shape {
                    out: config.hidden_dim,
                    inp: input_dim,
                },
                Shape {
                    out: head,
                    inp: config.hidden_dim,
                },
            ],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.ncols()
    }

    pub fn zero_parameters(&mut self) {
        for l in &mut self.layers {
            l.weight.fill(0.0);
            l.bias.fill(0.0);
        }
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(Dense::n_params).sum()
    }

    /// All parameters flattened: per layer, weights row-major then bias.
    pub fn parameters(&self) -> Vec<f64> {
        flatten(&self.layers)
    }

    pub fn set_parameters(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.n_params() {
            return Err(Error::DimensionMismatch {
                expected: self.n_params(),
                found: params.len(),
            });
        }
        let mut it = params.iter().copied();
        for l in &mut self.layers {
            l.weight
                .iter_mut()
                .chain(l.bias.iter_mut())
                .for_each(|p| *p = it.next().unwrap_or(0.0));
        }
        Ok(())
    }

    fn check_input(&self, x: ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                found: x.ncols(),
            });
        }
        Ok(())
    }

    /// `mask` holds the dropout scale (0 or `1/(1-p)`) per hidden unit.
    fn forward_trace(&self, x: ArrayView2<f64>, mask: Option<&Array2<f64>>) -> Trace {
        match self.config.depth {
            Depth::Mlp1 => Trace {
                pre: None,
                hidden: None,
                out: self.layers[0].forward(x),
            },
            Depth::Mlp2 => {
                let pre = self.layers[0].forward(x);
                let mut hidden = pre.mapv(|v| v.max(0.0));
                if let Some(m) = mask {
                    hidden *= m;
                }
                let out = self.layers[1].forward(hidden.view());
                Trace {
                    pre: Some(pre),
                    hidden: Some(hidden),
                    out,
                }
            }
        }
    }

    /// Raw outputs (logits or scalar) with dropout disabled.
    pub fn forward(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(x)?;
        Ok(self.forward_trace(x, None).out)
    }

    pub fn predict(&self, x: ArrayView2<f64>) -> Result<Vec<Prediction>> {
        let out = self.forward(x)?;
        Ok(out
            .rows()
            .into_iter()
            .map(|row| match self.task {
                Task::Classify4 => Prediction::Label(argmax_label(row.as_slice().unwrap_or(&row.to_vec()))),
                Task::Regress => Prediction::Score(row[0]),
            })
            .collect())
    }

    pub fn predict_one(&self, features: &[f64]) -> Result<Prediction> {
        let x = ArrayView2::from_shape((1, features.len()), features)
            .map_err(|e| Error::InvalidConfig(format!("feature row: {e}")))?;
        Ok(self.predict(x)?[0])
    }

    /// Loss and gradients of the whole batch with dropout disabled.
    /// `weights` gives per-class weights for classification.
    pub fn loss_and_gradient(
        &self,
        x: ArrayView2<f64>,
        targets: &Targets,
        weights: Option<[f64; 4]>,
    ) -> Result<(f64, Vec<Dense>)> {
        self.check_input(x)?;
        self.check_targets(x.nrows(), targets)?;
        Ok(self.loss_grad(x, targets, weights, None))
    }

    fn check_targets(&self, rows: usize, targets: &Targets) -> Result<()> {
        if targets.task() != self.task {
            return Err(Error::InvalidConfig(format!(
                "{} targets given to a {} model",
                targets.task(),
                self.task
            )));
        }
        if targets.len() != rows {
            return Err(Error::DimensionMismatch {
                expected: rows,
                found: targets.len(),
            });
        }
        if rows == 0 {
            return Err(Error::EmptyData("no training rows".into()));
        }
        targets.validate()
    }

    fn loss_grad(
        &self,
        x: ArrayView2<f64>,
        targets: &Targets,
        weights: Option<[f64; 4]>,
        mask: Option<&Array2<f64>>,
    ) -> (f64, Vec<Dense>) {
        let trace = self.forward_trace(x, mask);
        let (loss, d_out) = match targets {
            Targets::Labels(labels) => cross_entropy(&trace.out, labels, weights),
            Targets::Values(values) => squared_error(&trace.out, values),
        };
        let mut grads: Vec<Dense> = Vec::with_capacity(self.layers.len());
        match self.config.depth {
            Depth::Mlp1 => grads.push(Dense {
                weight: d_out.t().dot(&x),
                bias: d_out.sum_axis(Axis(0)),
            }),
            Depth::Mlp2 => {
                let hidden = trace.hidden.as_ref().expect("hidden activations");
                let pre = trace.pre.as_ref().expect("pre-activations");
                let mut d_hidden = d_out.dot(&self.layers[1].weight);
                if let Some(m) = mask {
                    d_hidden *= m;
                }
                d_hidden.zip_mut_with(pre, |g, &p| {
                    if p <= 0.0 {
                        *g = 0.0;
                    }
                });
                grads.push(Dense {
                    weight: d_hidden.t().dot(&x),
                    bias: d_hidden.sum_axis(Axis(0)),
                });
                grads.push(Dense {
                    weight: d_out.t().dot(hidden),
                    bias: d_out.sum_axis(Axis(0)),
                });
            }
        }
        (loss, grads)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest = ModelManifest {
            task: self.task,
            config: self.config,
            input_dim: self.input_dim(),
            shapes: self
                .layers
                .iter()
                .map(|l| Shape {
                    out: l.weight.nrows(),
                    inp: l.weight.ncols(),
                })
                .collect(),
            dtype: "float64-le".into(),
            weights: WEIGHTS_FILE.into(),
        };
        let mut json = serde_json::to_string_pretty(&manifest)?;
        json.push('\n');
        let path = dir.join(MANIFEST_FILE);
        std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
        let bytes: Vec<u8> = self.parameters().iter().flat_map(|p| p.to_le_bytes()).collect();
        let path = dir.join(WEIGHTS_FILE);
        std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: ModelManifest = serde_json::from_str(&text)?;
        let corrupt = |reason: String| Error::CorruptStore {
            path: dir.to_path_buf(),
            reason,
        };
        if manifest.dtype != "float64-le" {
            return Err(corrupt(format!("unsupported dtype {:?}", manifest.dtype)));
        }
        let expected = Self::shapes_for(manifest.task, manifest.input_dim, &manifest.config);
        if expected != manifest.shapes {
            return Err(corrupt("layer shapes do not match the recorded configuration".into()));
        }
        let mut model = MlpModel {
            task: manifest.task,
            config: manifest.config,
            layers: expected.iter().map(|s| Dense::zeros(s.out, s.inp)).collect(),
        };
        let path = dir.join(&manifest.weights);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if bytes.len() != model.n_params() * 8 {
            return Err(corrupt(format!(
                "weight blob has {} bytes, expected {}",
                bytes.len(),
                model.n_params() * 8
            )));
        }
        let params: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        model.set_parameters(&params)?;
        Ok(model)
    }
}

fn flatten(layers: &[Dense]) -> Vec<f64> {
    layers
        .iter()
        .flat_map(|l| l.weight.iter().chain(l.bias.iter()).copied())
        .collect()
}

/// Flattened gradient in the same order as [`MlpModel::parameters`].
pub fn flatten_gradient(grads: &[Dense]) -> Vec<f64> {
    flatten(grads)
}

/// Index of the largest logit as a 1-based label; ties go to the smallest.
pub fn argmax_label(logits: &[f64]) -> u8 {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best as u8 + 1
}

/// Weighted softmax cross-entropy, normalized by the total weight.
fn cross_entropy(logits: &Array2<f64>, labels: &[u8], weights: Option<[f64; 4]>) -> (f64, Array2<f64>) {
    let mut grad = Array2::zeros(logits.raw_dim());
    let mut total = 0.0;
    let mut weight_sum = 0.0;
    for (i, row) in logits.rows().into_iter().enumerate() {
        let y = (labels[i] - 1) as usize;
        let w = weights.map_or(1.0, |w| w[y]);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        total += w * (z.ln() + max - row[y]);
        weight_sum += w;
        for (j, e) in exps.iter().enumerate() {
            grad[[i, j]] = w * (e / z - if j == y { 1.0 } else { 0.0 });
        }
    }
    if weight_sum > 0.0 {
        grad /= weight_sum;
        (total / weight_sum, grad)
    } else {
        (0.0, grad)
    }
}

fn squared_error(out: &Array2<f64>, values: &[f64]) -> (f64, Array2<f64>) {
    let n = values.len() as f64;
    let mut grad = Array2::zeros(out.raw_dim());
    let mut total = 0.0;
    for (i, &t) in values.iter().enumerate() {
        let r = out[[i, 0]] - t;
        total += r * r;
        grad[[i, 0]] = 2.0 * r / n;
    }
    (total / n, grad)
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;
const WEIGHT_DECAY: f64 = 0.01;

struct AdamW {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl AdamW {
    fn new(n: usize) -> Self {
        AdamW {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - BETA1.powi(self.t);
        let c2 = 1.0 - BETA2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = BETA1 * self.m[i] + (1.0 - BETA1) * grad[i];
            self.v[i] = BETA2 * self.v[i] + (1.0 - BETA2) * grad[i] * grad[i];
            params[i] -= lr * WEIGHT_DECAY * params[i];
            params[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + EPS);
        }
    }
}

/// Learning rate at 0-based step `t`: linear warmup then constant.
pub fn scheduled_lr(base: f64, t: usize, warmup_steps: usize) -> f64 {
    if t < warmup_steps {
        base * (t + 1) as f64 / warmup_steps as f64
    } else {
        base
    }
}

#[derive(Debug, Clone)]
pub struct TrainedMlp {
    pub model: MlpModel,
    /// Mean batch loss per epoch.
    pub loss_trace: Vec<f64>,
}

pub fn train(x: ArrayView2<f64>, targets: &Targets, config: &MlpConfig) -> Result<TrainedMlp> {
    config.validate()?;
    if x.nrows() == 0 {
        return Err(Error::EmptyData("no training rows".into()));
    }
    let mut model = MlpModel::init(targets.task(), x.ncols(), config)?;
    model.check_targets(x.nrows(), targets)?;
    let weights = match (targets, config.weighted_loss) {
        (Targets::Labels(l), true) => Some(class_weights(l)),
        _ => None,
    };

    let n = x.nrows();
    let batches_per_epoch = n.div_ceil(config.batch_size);
    let total_steps = batches_per_epoch * config.epochs;
    let warmup_steps = (config.warmup_ratio * total_steps as f64).ceil() as usize;
    let mut params = model.parameters();
    let mut opt = AdamW::new(params.len());
    let mut order: Vec<usize> = (0..n).collect();
    let mut loss_trace = Vec::with_capacity(config.epochs);
    let mut step = 0usize;
    let use_dropout = config.depth == Depth::Mlp2 && config.dropout > 0.0;

    for epoch in 0..config.epochs {
        order.sort_unstable();
        order.shuffle(&mut stream_rng(config.seed, domain::MLP_SHUFFLE, epoch as u64));
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            let xb = x.select(Axis(0), batch);
            let tb = targets.subset(batch);
            let mask = use_dropout.then(|| {
                let mut rng = stream_rng(config.seed, domain::MLP_DROPOUT, step as u64);
                let keep = 1.0 / (1.0 - config.dropout);
                Array2::from_shape_simple_fn((batch.len(), config.hidden_dim), || {
                    if rng.random::<f64>() < config.dropout {
                        0.0
                    } else {
                        keep
                    }
                })
            });
            let (loss, grads) = model.loss_grad(xb.view(), &tb, weights, mask.as_ref());
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch });
            }
            epoch_loss += loss;
            opt.step(
                &mut params,
                &flatten(&grads),
                scheduled_lr(config.learning_rate, step, warmup_steps),
            );
            model.set_parameters(&params)?;
            step += 1;
        }
        let mean = epoch_loss / batches_per_epoch as f64;
        if !mean.is_finite() || params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Divergence { epoch });
        }
        log::debug!("epoch {epoch}: loss {mean:.6}");
        loss_trace.push(mean);
    }
    Ok(TrainedMlp { model, loss_trace })
}

/// Training-set accuracy of a classifier.
pub fn accuracy(model: &MlpModel, x: ArrayView2<f64>, labels: &[u8]) -> Result<f64> {
    let preds = model.predict(x)?;
    let hits = preds
        .iter()
        .zip(labels)
        .filter(|(p, &y)| matches!(p, Prediction::Label(l) if *l == y))
        .count();
    Ok(hits as f64 / labels.len().max(1) as f64)
}

/// Mean squared error of a regressor.
pub fn mse(model: &MlpModel, x: ArrayView2<f64>, values: &[f64]) -> Result<f64> {
    let out = model.forward(x)?;
    let col = out.slice(s![.., 0]);
    Ok(col.iter().zip(values).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / values.len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn small_config(depth: Depth, hidden: usize, seed: u64) -> MlpConfig {
        MlpConfig {
            depth,
            hidden_dim: hidden,
            dropout: 0.0,
            seed,
            ..MlpConfig::default()
        }
    }

    /// Max relative error between analytic and central-difference gradients.
    fn grad_check(model: &MlpModel, x: &Array2<f64>, t: &Targets, w: Option<[f64; 4]>) -> f64 {
        let (_, grads) = model.loss_and_gradient(x.view(), t, w).unwrap();
        let analytic = flatten_gradient(&grads);
        let base = model.parameters();
        let h = 1e-5;
        let mut m = model.clone();
        let mut worst = 0.0f64;
        for i in 0..base.len() {
            let mut p = base.clone();
            p[i] += h;
            m.set_parameters(&p).unwrap();
            let up = m.loss_and_gradient(x.view(), t, w).unwrap().0;
            p[i] -= 2.0 * h;
            m.set_parameters(&p).unwrap();
            let down = m.loss_and_gradient(x.view(), t, w).unwrap().0;
            let numeric = (up - down) / (2.0 * h);
            let denom = analytic[i].abs().max(numeric.abs()).max(1e-6);
            worst = worst.max((analytic[i] - numeric).abs() / denom);
        }
        worst
    }

    #[test]
    fn gradient_check_small_models() {
        for seed in 0..6u64 {
            let mut rng = stream_rng(seed, 99, 0);
            let x = Array2::from_shape_simple_fn((3, 5), || rng.random_range(-1.0..1.0));
            let labels = Targets::Labels(vec![1, 3, 4]);
            let values = Targets::Values(vec![0.2, -0.5, 1.0]);
            for depth in [Depth::Mlp1, Depth::Mlp2] {
                let cfg = small_config(depth, 6, seed);
                let clf = MlpModel::init(Task::Classify4, 5, &cfg).unwrap();
                assert!(grad_check(&clf, &x, &labels, None) < 1e-4);
                assert!(grad_check(&clf, &x, &labels, Some([0.5, 1.0, 2.0, 0.75])) < 1e-4);
                let reg = MlpModel::init(Task::Regress, 5, &cfg).unwrap();
                assert!(grad_check(&reg, &x, &values, None) < 1e-4);
            }
        }
    }

    #[test]
    fn zero_init_loss_is_ln4() {
        let cfg = small_config(Depth::Mlp2, 4, 0);
        let mut model = MlpModel::init(Task::Classify4, 3, &cfg).unwrap();
        model.zero_parameters();
        let x = array![[1.0, 2.0, 3.0], [-1.0, 0.0, 0.5]];
        let (loss, _) = model
            .loss_and_gradient(x.view(), &Targets::Labels(vec![2, 4]), None)
            .unwrap();
        assert_abs_diff_eq!(loss, 4f64.ln(), epsilon = 1e-15);
    }

    #[test]
    fn balanced_weights_match_unweighted() {
        let labels = vec![1, 2, 3, 4, 4, 3, 2, 1];
        let w = class_weights(&labels);
        assert_eq!(w, [1.0; 4]);
        let model = MlpModel::init(Task::Classify4, 2, &small_config(Depth::Mlp2, 5, 3)).unwrap();
        let x = Array2::from_shape_fn((8, 2), |(i, j)| (i * 3 + j) as f64 / 10.0 - 0.5);
        let t = Targets::Labels(labels);
        let a = model.loss_and_gradient(x.view(), &t, Some(w)).unwrap().0;
        let b = model.loss_and_gradient(x.view(), &t, None).unwrap().0;
        assert!((a - b).abs() <= 1e-12);
    }

    #[test]
    fn class_weights_inverse_frequency() {
        let w = class_weights(&[1, 1, 1, 2]);
        assert_eq!(w, [4.0 / 12.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn argmax_tie_break() {
        assert_eq!(argmax_label(&[0.0, 0.0, 0.0, 0.0]), 1);
        assert_eq!(argmax_label(&[0.0, 5.0, 0.0, 0.0]), 2);
        assert_eq!(argmax_label(&[1.0, 3.0, 3.0, 0.0]), 2);
    }

    #[test]
    fn feature_assembly() {
        assert_eq!(
            assemble_features(&[1.0, 2.0], &[3.0, 4.0], FeatureMode::Concat).unwrap(),
            vec![1.0, 2.0, 3.0, 4.0]
        );
        assert_eq!(
            assemble_features(&[1.0, 2.0], &[3.0, 4.0], FeatureMode::ConcatAbsDiff).unwrap(),
            vec![1.0, 2.0, 3.0, 4.0, 2.0, 2.0]
        );
        assert_eq!(
            mean_vectors(&[vec![1.0], vec![3.0], vec![5.0], vec![7.0]]).unwrap(),
            vec![4.0]
        );
    }

    #[test]
    fn pooled_layer_selection() {
        assert_eq!(
            pooled_layers(&[1, 4, 7, 10, 12], 7, LayerPool::Single).unwrap(),
            vec![7]
        );
        assert_eq!(
            pooled_layers(&[12, 1, 4, 7, 10], 0, LayerPool::Last4Mean).unwrap(),
            vec![4, 7, 10, 12]
        );
        assert!(matches!(
            pooled_layers(&[1, 4], 7, LayerPool::Single),
            Err(Error::MissingStore(_))
        ));
        assert!(pooled_layers(&[1, 4, 7], 0, LayerPool::Last4Mean).is_err());
    }

    #[test]
    fn regress_identity_feature() {
        let mut rng = stream_rng(5, 99, 1);
        let x = Array2::from_shape_simple_fn((64, 3), || rng.random_range(-1.0..1.0));
        let y: Vec<f64> = x.column(1).to_vec();
        let cfg = MlpConfig {
            epochs: 200,
            ..MlpConfig::subtask2_mlp1()
        };
        let trained = train(x.view(), &Targets::Values(y.clone()), &cfg).unwrap();
        assert_eq!(trained.loss_trace.len(), 200);
        assert!(mse(&trained.model, x.view(), &y).unwrap() < 1e-3);
    }

    #[test]
    fn regress_head_identity_weights() {
        let cfg = small_config(Depth::Mlp1, 1, 0);
        let mut model = MlpModel::init(Task::Regress, 1, &cfg).unwrap();
        model.set_parameters(&[1.0, 0.0]).unwrap();
        match model.predict_one(&[0.7]).unwrap() {
            Prediction::Score(v) => assert_abs_diff_eq!(v, 0.7, epsilon = 1e-15),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn training_is_reproducible_and_saves() {
        let x = Array2::from_shape_fn((20, 2), |(i, j)| ((i + 2 * j) % 7) as f64 / 7.0);
        let labels: Vec<u8> = (0..20).map(|i| (i % 4) as u8 + 1).collect();
        let cfg = MlpConfig {
            epochs: 3,
            batch_size: 8,
            hidden_dim: 8,
            ..MlpConfig::default()
        };
        let a = train(x.view(), &Targets::Labels(labels.clone()), &cfg).unwrap();
        let b = train(x.view(), &Targets::Labels(labels), &cfg).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.loss_trace, b.loss_trace);

        let dir = tempfile::tempdir().unwrap();
        a.model.save(dir.path()).unwrap();
        let loaded = MlpModel::load(dir.path()).unwrap();
        assert_eq!(loaded, a.model);
        std::fs::write(dir.path().join(WEIGHTS_FILE), [0u8; 5]).unwrap();
        assert!(matches!(MlpModel::load(dir.path()), Err(Error::CorruptStore { .. })));
    }

    #[test]
    fn rejects_bad_inputs() {
        let x = Array2::<f64>::zeros((0, 2));
        assert!(matches!(
            train(x.view(), &Targets::Labels(vec![]), &MlpConfig::default()),
            Err(Error::EmptyData(_))
        ));
        let x = Array2::<f64>::zeros((2, 2));
        assert!(train(x.view(), &Targets::Labels(vec![1, 5]), &MlpConfig::default()).is_err());
        let bad = MlpConfig {
            dropout: 1.0,
            ..MlpConfig::default()
        };
        assert!(bad.validate().is_err());
        let model = MlpModel::init(Task::Classify4, 2, &MlpConfig::default()).unwrap();
        assert!(matches!(
            model.predict_one(&[1.0]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn warmup_schedule() {
        assert_eq!(scheduled_lr(1.0, 0, 4), 0.25);
        assert_eq!(scheduled_lr(1.0, 3, 4), 1.0);
        assert_eq!(scheduled_lr(1.0, 10, 4), 1.0);
        assert_eq!(scheduled_lr(0.5, 0, 0), 0.5);
    }
}
