//! Domain types shared across the toolkit: usage pairs, gold labels,
//! virtual-annotator configurations and threshold sets.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of ordinal relatedness labels (1..=4).
pub const NUM_LABELS: u8 = 4;

/// Language tags accepted in corpus files.
pub const LANGUAGES: [&str; 8] = ["zh", "en", "de", "no", "ru", "es", "sv", "synthetic"];

fn check_judgments(judgments: &[u8]) -> Result<()> {
    match judgments.iter().find(|&&j| !(1..=NUM_LABELS).contains(&j)) {
        Some(&bad) => Err(Error::InvalidJudgment(bad as i64)),
        None => Ok(()),
    }
}

/// Mode of the judgments; ties resolve to the smallest tied label.
pub fn majority_label(judgments: &[u8]) -> Result<u8> {
    if judgments.is_empty() {
        return Err(Error::EmptyJudgments);
    }
    check_judgments(judgments)?;
    let mut counts = [0usize; NUM_LABELS as usize];
    for &j in judgments {
        counts[(j - 1) as usize] += 1;
    }
    let best = counts.iter().copied().max().unwrap_or(0);
    // first index with the maximal count is the smallest tied label
    let idx = counts.iter().position(|&c| c == best).unwrap_or(0);
    Ok(idx as u8 + 1)
}

/// Median judgment. Even counts take the lower of the two middle values so
/// the result stays an integral label.
pub fn median_label(judgments: &[u8]) -> Result<u8> {
    if judgments.is_empty() {
        return Err(Error::EmptyJudgments);
    }
    check_judgments(judgments)?;
    let mut sorted = judgments.to_vec();
    sorted.sort_unstable();
    Ok(sorted[(sorted.len() - 1) / 2])
}

/// Mean absolute difference over all unordered pairs of judgments.
pub fn mean_pairwise_difference(judgments: &[u8]) -> Result<f64> {
    if judgments.len() < 2 {
        return Err(Error::InsufficientJudgments { found: judgments.len() });
    }
    check_judgments(judgments)?;
    // Count-based: sum over label pairs weighted by multiplicities.
    let mut counts = [0u64; NUM_LABELS as usize];
    for &j in judgments {
        counts[(j - 1) as usize] += 1;
    }
    let mut total = 0u64;
    for a in 0..counts.len() {
        for b in (a + 1)..counts.len() {
            total += counts[a] * counts[b] * (b - a) as u64;
        }
    }
    let n = judgments.len() as u64;
    Ok(total as f64 / (n * (n - 1) / 2) as f64)
}

/// Half-open character range `[start, end)` counted in Unicode scalar values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Span { start, end }
    }
}

/// Derived gold targets for one usage pair.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct GoldLabels {
    pub median_label: Option<u8>,
    pub majority_label: Option<u8>,
    /// Mean pairwise absolute judgment difference, in `[0, 3]`.
    pub disagreement: Option<f64>,
}

impl GoldLabels {
    /// Derives all targets from raw judgments. A single judgment has no
    /// pairs and yields disagreement 0.
    pub fn from_judgments(judgments: &[u8]) -> Result<Self> {
        if judgments.is_empty() {
            return Ok(GoldLabels::default());
        }
        let disagreement = if judgments.len() == 1 {
            check_judgments(judgments)?;
            0.0
        } else {
            mean_pairwise_difference(judgments)?
        };
        Ok(GoldLabels {
            median_label: Some(median_label(judgments)?),
            majority_label: Some(majority_label(judgments)?),
            disagreement: Some(disagreement),
        })
    }
}

/// A target lemma observed in two contexts, with human judgments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UsagePair {
    pub instance_id: String,
    pub lemma: String,
    pub language: String,
    pub context_1: String,
    pub span_1: Span,
    pub context_2: String,
    pub span_2: Span,
    pub judgments: Vec<u8>,
    pub gold: GoldLabels,
}

impl UsagePair {
    pub fn validate(&self) -> Result<()> {
        let fail = |reason: String| Error::InvalidPair {
            instance_id: self.instance_id.clone(),
            reason,
        };
        if self.instance_id.is_empty() {
            return Err(fail("empty instance_id".into()));
        }
        if !LANGUAGES.contains(&self.language.as_str()) {
            return Err(fail(format!("unknown language tag {:?}", self.language)));
        }
        for (side, ctx, span) in [(1, &self.context_1, self.span_1), (2, &self.context_2, self.span_2)] {
            let len = ctx.chars().count();
            if span.start >= span.end || span.end > len {
                return Err(fail(format!(
                    "span {side} [{}, {}) invalid for context of {len} characters",
                    span.start, span.end
                )));
            }
        }
        check_judgments(&self.judgments).map_err(|e| fail(e.to_string()))?;
        if let Some(label) = self.gold.median_label {
            if !(1..=NUM_LABELS).contains(&label) {
                return Err(fail(format!("median label {label} outside 1..=4")));
            }
        }
        if let Some(d) = self.gold.disagreement {
            if !(0.0..=3.0).contains(&d) {
                return Err(fail(format!("disagreement {d} outside [0, 3]")));
            }
        }
        Ok(())
    }

    /// The target word as it appears in context `side` (1 or 2).
    pub fn target(&self, side: u8) -> String {
        let (ctx, span) = if side == 1 {
            (&self.context_1, self.span_1)
        } else {
            (&self.context_2, self.span_2)
        };
        ctx.chars().skip(span.start).take(span.end - span.start).collect()
    }
}

/// Pretrained model behind a virtual annotator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BaseModel {
    /// Llama-7B (decoder-only).
    Llama7b,
    XlmRobertaBase,
    BertMultiBase,
    XlmRobertaLarge,
}

impl BaseModel {
    pub const ALL: [BaseModel; 4] = [
        BaseModel::Llama7b,
        BaseModel::XlmRobertaBase,
        BaseModel::BertMultiBase,
        BaseModel::XlmRobertaLarge,
    ];

    pub fn letter(self) -> char {
        match self {
            BaseModel::Llama7b => 'A',
            BaseModel::XlmRobertaBase => 'B',
            BaseModel::BertMultiBase => 'C',
            BaseModel::XlmRobertaLarge => 'D',
        }
    }

    pub fn from_letter(c: char) -> Option<Self> {
        BaseModel::ALL.into_iter().find(|m| m.letter() == c)
    }

    /// Directory name used under a store root.
    pub fn model_id(self) -> &'static str {
        match self {
            BaseModel::Llama7b => "llama-7b",
            BaseModel::XlmRobertaBase => "xlm-roberta-base",
            BaseModel::BertMultiBase => "bert-multi-base",
            BaseModel::XlmRobertaLarge => "xlm-roberta-large",
        }
    }

    pub fn from_model_id(id: &str) -> Option<Self> {
        BaseModel::ALL.into_iter().find(|m| m.model_id() == id)
    }

    pub fn is_decoder(self) -> bool {
        self == BaseModel::Llama7b
    }
}

/// Layer level letter `h`, `i`, `j`, `k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LayerCode {
    H,
    I,
    J,
    K,
}

impl LayerCode {
    pub const ALL: [LayerCode; 4] = [LayerCode::H, LayerCode::I, LayerCode::J, LayerCode::K];

    pub fn letter(self) -> char {
        match self {
            LayerCode::H => 'h',
            LayerCode::I => 'i',
            LayerCode::J => 'j',
            LayerCode::K => 'k',
        }
    }

    pub fn from_letter(c: char) -> Option<Self> {
        LayerCode::ALL.into_iter().find(|l| l.letter() == c)
    }

    fn index(self) -> usize {
        self as usize
    }

    /// Concrete layer index for the given model family.
    pub fn layer_for(self, model: BaseModel) -> u32 {
        const ENCODER: [u32; 4] = [1, 4, 7, 10];
        const DECODER: [u32; 4] = [8, 16, 24, 32];
        if model.is_decoder() {
            DECODER[self.index()]
        } else {
            ENCODER[self.index()]
        }
    }
}

/// Anisotropy-removal transform.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransformKind {
    None,
    Standardize,
    Center,
    /// All-but-the-top: centering plus removal of the top principal direction.
    Abtt,
}

impl TransformKind {
    pub const ALL: [TransformKind; 4] = [
        TransformKind::None,
        TransformKind::Standardize,
        TransformKind::Center,
        TransformKind::Abtt,
    ];

    pub fn letter(self) -> char {
        match self {
            TransformKind::None => 'X',
            TransformKind::Standardize => 'Y',
            TransformKind::Center => 'Z',
            TransformKind::Abtt => 'W',
        }
    }

    pub fn from_letter(c: char) -> Option<Self> {
        TransformKind::ALL.into_iter().find(|t| t.letter() == c)
    }

    pub fn name(self) -> &'static str {
        match self {
            TransformKind::None => "none",
            TransformKind::Standardize => "standardize",
            TransformKind::Center => "center",
            TransformKind::Abtt => "abtt",
        }
    }
}

impl FromStr for TransformKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        match lower.as_str() {
            "none" | "x" => Ok(TransformKind::None),
            "standardize" | "std" | "y" => Ok(TransformKind::Standardize),
            "center" | "centering" | "z" => Ok(TransformKind::Center),
            "abtt" | "all-but-the-top" | "w" => Ok(TransformKind::Abtt),
            _ => Err(Error::InvalidConfig(format!("unknown transform {s:?}"))),
        }
    }
}

impl fmt::Display for TransformKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One virtual annotator: a (model, layer, transform) triple, written as a
/// three-letter code such as `AjY`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct AnnotatorConfig {
    pub model: BaseModel,
    pub layer_code: LayerCode,
    pub transform: TransformKind,
}

impl AnnotatorConfig {
    pub fn new(model: BaseModel, layer_code: LayerCode, transform: TransformKind) -> Self {
        AnnotatorConfig {
            model,
            layer_code,
            transform,
        }
    }

    pub fn layer(&self) -> u32 {
        self.layer_code.layer_for(self.model)
    }

    /// All 64 configurations in code order (model, layer, transform).
    pub fn grid() -> Vec<AnnotatorConfig> {
        let mut out = Vec::with_capacity(64);
        for model in BaseModel::ALL {
            for layer_code in LayerCode::ALL {
                for transform in TransformKind::ALL {
                    out.push(AnnotatorConfig::new(model, layer_code, transform));
                }
            }
        }
        out
    }

    pub fn code(&self) -> String {
        format_annotator_code(self)
    }
}

pub fn parse_annotator_code(code: &str) -> Result<AnnotatorConfig> {
    let err = |position: usize, reason: &str| Error::CodeParse {
        code: code.to_string(),
        position,
        reason: reason.to_string(),
    };
    let chars: Vec<char> = code.chars().collect();
    if chars.len() != 3 {
        let position = chars.len().min(3);
        return Err(err(position, "expected exactly 3 characters"));
    }
    let model = BaseModel::from_letter(chars[0]).ok_or_else(|| err(0, "model letter must be one of A-D"))?;
    let layer_code = LayerCode::from_letter(chars[1]).ok_or_else(|| err(1, "layer letter must be one of h-k"))?;
    let transform =
        TransformKind::from_letter(chars[2]).ok_or_else(|| err(2, "transform letter must be one of X, Y, Z, W"))?;
    Ok(AnnotatorConfig::new(model, layer_code, transform))
}

pub fn format_annotator_code(cfg: &AnnotatorConfig) -> String {
    [cfg.model.letter(), cfg.layer_code.letter(), cfg.transform.letter()]
        .iter()
        .collect()
}

/// Parses a dashed group such as `AjY-AhX-AjZ-AjW`.
pub fn parse_annotator_group(group: &str) -> Result<Vec<AnnotatorConfig>> {
    group.split('-').map(|c| parse_annotator_code(c.trim())).collect()
}

pub fn format_annotator_group(configs: &[AnnotatorConfig]) -> String {
    configs.iter().map(format_annotator_code).collect::<Vec<_>>().join("-")
}

impl FromStr for AnnotatorConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        parse_annotator_code(s)
    }
}

impl fmt::Display for AnnotatorConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&format_annotator_code(self))
    }
}

/// Three strictly increasing interior bin edges in `[-1, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ThresholdSet {
    edges: [f64; 3],
}

impl ThresholdSet {
    pub fn new(edges: [f64; 3]) -> Result<Self> {
        if edges.iter().any(|e| !e.is_finite() || !(-1.0..=1.0).contains(e)) {
            return Err(Error::InvalidThresholds(format!(
                "edges {edges:?} must be finite and within [-1, 1]"
            )));
        }
        if !(edges[0] < edges[1] && edges[1] < edges[2]) {
            return Err(Error::InvalidThresholds(format!(
                "edges {edges:?} must be strictly increasing"
            )));
        }
        Ok(ThresholdSet { edges })
    }

    /// Evenly spaced edges over `[lo, hi]` (the quartile cut points).
    pub fn evenly_spaced(lo: f64, hi: f64) -> Result<Self> {
        let step = (hi - lo) / 4.0;
        ThresholdSet::new([lo + step, lo + 2.0 * step, lo + 3.0 * step])
    }

    pub fn edges(&self) -> [f64; 3] {
        self.edges
    }
}

impl TryFrom<Vec<f64>> for ThresholdSet {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        let edges: [f64; 3] = v
            .try_into()
            .map_err(|v: Vec<f64>| Error::InvalidThresholds(format!("expected 3 edges, got {}", v.len())))?;
        ThresholdSet::new(edges)
    }
}

impl From<ThresholdSet> for Vec<f64> {
    fn from(t: ThresholdSet) -> Self {
        t.edges.to_vec()
    }
}

/// Judgment population `N(mu, sigma^2)` sampled by `n_annotators` raters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianPopulation {
    pub mu: f64,
    pub sigma: f64,
    pub n_annotators: usize,
}

impl GaussianPopulation {
    pub fn new(mu: f64, sigma: f64, n_annotators: usize) -> Result<Self> {
        if !mu.is_finite() || !sigma.is_finite() || sigma < 0.0 {
            return Err(Error::InvalidPopulation(format!(
                "mu={mu}, sigma={sigma} (sigma must be finite and >= 0)"
            )));
        }
        if n_annotators == 0 {
            return Err(Error::InvalidPopulation("n_annotators must be >= 1".into()));
        }
        Ok(GaussianPopulation {
            mu,
            sigma,
            n_annotators,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn majority_examples() {
        assert_eq!(majority_label(&[2, 2, 3]).unwrap(), 2);
        assert_eq!(majority_label(&[1, 1, 4, 4]).unwrap(), 1);
        assert_eq!(majority_label(&[3]).unwrap(), 3);
        assert!(matches!(majority_label(&[]), Err(Error::EmptyJudgments)));
    }

    #[test]
    fn median_examples() {
        assert_eq!(median_label(&[1, 2, 4]).unwrap(), 2);
        assert_eq!(median_label(&[1, 2, 3, 4]).unwrap(), 2);
        assert_eq!(median_label(&[4, 4]).unwrap(), 4);
        assert!(matches!(median_label(&[]), Err(Error::EmptyJudgments)));
    }

    #[test]
    fn mpd_examples() {
        assert_eq!(mean_pairwise_difference(&[1, 1, 1]).unwrap(), 0.0);
        assert_eq!(mean_pairwise_difference(&[1, 4]).unwrap(), 3.0);
        assert_eq!(mean_pairwise_difference(&[1, 2, 4]).unwrap(), 2.0);
        assert!(matches!(
            mean_pairwise_difference(&[2]),
            Err(Error::InsufficientJudgments { found: 1 })
        ));
        assert!(matches!(
            mean_pairwise_difference(&[0, 2]),
            Err(Error::InvalidJudgment(0))
        ));
    }

    #[test]
    fn code_examples() {
        let a = parse_annotator_code("AjY").unwrap();
        assert_eq!(a.model, BaseModel::Llama7b);
        assert_eq!(a.layer(), 24);
        assert_eq!(a.transform, TransformKind::Standardize);

        let b = parse_annotator_code("BkW").unwrap();
        assert_eq!(b.model, BaseModel::XlmRobertaBase);
        assert_eq!(b.layer(), 10);
        assert_eq!(b.transform, TransformKind::Abtt);

        match parse_annotator_code("Qx9") {
            Err(Error::CodeParse { position, .. }) => assert_eq!(position, 0),
            other => panic!("unexpected {other:?}"),
        }
        match parse_annotator_code("AxY") {
            Err(Error::CodeParse { position, .. }) => assert_eq!(position, 1),
            other => panic!("unexpected {other:?}"),
        }
        assert!(parse_annotator_code("AjYX").is_err());
        assert!(parse_annotator_code("").is_err());
    }

    #[test]
    fn code_grid_round_trip() {
        let grid = AnnotatorConfig::grid();
        assert_eq!(grid.len(), 64);
        let mut codes: Vec<String> = grid.iter().map(format_annotator_code).collect();
        for (cfg, code) in grid.iter().zip(&codes) {
            assert_eq!(&parse_annotator_code(code).unwrap(), cfg);
            assert_eq!(&format_annotator_code(&parse_annotator_code(code).unwrap()), code);
        }
        codes.sort();
        codes.dedup();
        assert_eq!(codes.len(), 64);
    }

    #[test]
    fn group_round_trip() {
        let g = parse_annotator_group("AiX-AkX-AhX-AkW").unwrap();
        assert_eq!(g.len(), 4);
        assert_eq!(format_annotator_group(&g), "AiX-AkX-AhX-AkW");
    }

    #[test]
    fn threshold_set_validation() {
        assert!(ThresholdSet::new([-0.5, 0.0, 0.5]).is_ok());
        assert!(ThresholdSet::new([0.0, 0.0, 0.5]).is_err());
        assert!(ThresholdSet::new([-0.5, 0.0, 1.5]).is_err());
        let t: ThresholdSet = serde_json::from_str("[-0.5, 0.0, 0.5]").unwrap();
        assert_eq!(t.edges(), [-0.5, 0.0, 0.5]);
        assert!(serde_json::from_str::<ThresholdSet>("[0.5, 0.0]").is_err());
    }

    #[test]
    fn gold_single_judgment() {
        let g = GoldLabels::from_judgments(&[3]).unwrap();
        assert_eq!(g.median_label, Some(3));
        assert_eq!(g.disagreement, Some(0.0));
        assert_eq!(GoldLabels::from_judgments(&[]).unwrap(), GoldLabels::default());
    }

    fn judgments() -> impl Strategy<Value = Vec<u8>> {
        prop::collection::vec(1u8..=4, 2..30)
    }

    proptest! {
        #[test]
        fn aggregates_are_permutation_invariant(mut j in judgments(), seed in any::<u64>()) {
            let maj = majority_label(&j).unwrap();
            let med = median_label(&j).unwrap();
            let mpd = mean_pairwise_difference(&j).unwrap();
            // deterministic shuffle via rotation + reversal
            let k = (seed as usize) % j.len();
            j.rotate_left(k);
            if seed % 2 == 0 { j.reverse(); }
            prop_assert_eq!(majority_label(&j).unwrap(), maj);
            prop_assert_eq!(median_label(&j).unwrap(), med);
            prop_assert!((mean_pairwise_difference(&j).unwrap() - mpd).abs() < 1e-12);
            prop_assert!((0.0..=3.0).contains(&mpd));
        }

        #[test]
        fn mpd_matches_pairwise_definition(j in judgments()) {
            let mut sum = 0.0;
            let mut pairs = 0.0;
            for a in 0..j.len() {
                for b in (a + 1)..j.len() {
                    sum += (j[a] as f64 - j[b] as f64).abs();
                    pairs += 1.0;
                }
            }
            prop_assert!((mean_pairwise_difference(&j).unwrap() - sum / pairs).abs() < 1e-12);
        }

        #[test]
        fn constant_judgments(v in 1u8..=4, n in 2usize..20) {
            let j = vec![v; n];
            prop_assert_eq!(majority_label(&j).unwrap(), v);
            prop_assert_eq!(median_label(&j).unwrap(), v);
            prop_assert_eq!(mean_pairwise_difference(&j).unwrap(), 0.0);
        }
    }
}
