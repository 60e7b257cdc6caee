use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;

use disagree_kit::corpus::read_corpus;
use disagree_kit::ensemble::{build_annotation_matrix, predict_disagreement, Measure};
use disagree_kit::metrics::{krippendorff_alpha as alpha_impl, spearman_rho, AlphaLevel, AlphaSpec};
use disagree_kit::model::{
    mean_pairwise_difference as mpd_impl, parse_annotator_group, AnnotatorConfig, ThresholdSet, TransformKind,
};
use disagree_kit::optim::SimplexConfig;
use disagree_kit::pipeline::{
    build_bank, fit_layer_transform, open_layer_store, score_corpus as score_impl, FitOptions, FitScope,
};
use disagree_kit::simulator::{simulate_corpus, write_truth, SimConfig};
use disagree_kit::threshold::{fit_thresholds as fit_impl, map_score_to_label as map_impl};
use disagree_kit::Error;

create_exception!(disagree_kit, DisagreeKitError, PyException);

fn err(e: Error) -> PyErr {
    match e {
        Error::InvalidConfig(_) | Error::CodeParse { .. } => PyValueError::new_err(e.to_string()),
        _ => DisagreeKitError::new_err(e.to_string()),
    }
}

fn parse<T: std::str::FromStr<Err = Error>>(s: &str) -> PyResult<T> {
    s.parse().map_err(err)
}

/// Krippendorff's alpha over an items x raters matrix; `None` marks a missing rating.
#[pyfunction]
#[pyo3(signature = (ratings, level = "ordinal", num_categories = 4))]
fn krippendorff_alpha(ratings: Vec<Vec<Option<u8>>>, level: &str, num_categories: u8) -> PyResult<f64> {
    let spec = AlphaSpec::new(parse::<AlphaLevel>(level)?, num_categories).map_err(err)?;
    alpha_impl(&ratings, spec).map_err(err)
}

/// Spearman's rho with average ranks for ties.
#[pyfunction]
fn spearman(x: Vec<f64>, y: Vec<f64>) -> PyResult<f64> {
    spearman_rho(&x, &y).map_err(err)
}

/// Mean absolute difference over all unordered pairs of judgments.
#[pyfunction]
fn mean_pairwise_difference(judgments: Vec<u8>) -> PyResult<f64> {
    mpd_impl(&judgments).map_err(err)
}

/// Fits three label thresholds; returns `(edges, alpha_train)`.
#[pyfunction]
#[pyo3(signature = (scores, gold, level = "ordinal"))]
fn fit_thresholds(scores: BTreeMap<String, f64>, gold: BTreeMap<String, u8>, level: &str) -> PyResult<([f64; 3], f64)> {
    let spec = AlphaSpec::new(parse::<AlphaLevel>(level)?, 4).map_err(err)?;
    let fit = fit_impl(&scores, &gold, spec, &SimplexConfig::default()).map_err(err)?;
    Ok((fit.edges.edges(), fit.alpha_train))
}

/// Label 1..=4 of a score under ascending thresholds.
#[pyfunction]
fn map_score_to_label(score: f64, edges: [f64; 3]) -> PyResult<u8> {
    Ok(map_impl(score, &ThresholdSet::new(edges).map_err(err)?))
}

/// Splits a dashed annotator group into `(model_id, layer, transform)` tuples.
#[pyfunction]
fn parse_annotators(codes: &str) -> PyResult<Vec<(String, u32, String)>> {
    Ok(parse_annotator_group(codes)
        .map_err(err)?
        .into_iter()
        .map(|c: AnnotatorConfig| (c.model.model_id().to_string(), c.layer(), c.transform.to_string()))
        .collect())
}

/// Simulates a corpus with virtual-annotator stores under `out_dir`.
/// Writes `corpus.tsv`, `truth.tsv` and `stores/`; returns the pool codes.
#[pyfunction]
#[pyo3(signature = (out_dir, n_items = 200, mu_range = (1.0, 4.0), sigma_range = (0.0, 0.8), n_annotators = 10, n_virtual = 8, dim = 32, seed = 0))]
#[allow(clippy::too_many_arguments)]
fn simulate(
    py: Python<'_>,
    out_dir: PathBuf,
    n_items: usize,
    mu_range: (f64, f64),
    sigma_range: (f64, f64),
    n_annotators: usize,
    n_virtual: usize,
    dim: usize,
    seed: u64,
) -> PyResult<String> {
    let cfg = SimConfig {
        n_items,
        mu_range,
        sigma_range,
        n_annotators,
        n_virtual,
        seed,
    };
    py.detach(|| {
        std::fs::create_dir_all(&out_dir).map_err(|e| Error::Io {
            path: out_dir.clone(),
            source: e,
        })?;
        let corpus = simulate_corpus(cfg)?;
        disagree_kit::corpus::write_corpus(&corpus.pairs, out_dir.join("corpus.tsv"))?;
        write_truth(&corpus.truth, out_dir.join("truth.tsv"))?;
        if n_virtual > 0 {
            corpus.write_stores(out_dir.join("stores"), dim)?;
        }
        Ok(disagree_kit::model::format_annotator_group(&corpus.virtual_configs()))
    })
    .map_err(err)
}

/// Cosine scores of every corpus pair on one layer store.
#[pyfunction]
#[pyo3(signature = (store_root, corpus, model_id, layer, transform = "none"))]
fn score_corpus(
    py: Python<'_>,
    store_root: PathBuf,
    corpus: PathBuf,
    model_id: &str,
    layer: u32,
    transform: &str,
) -> PyResult<BTreeMap<String, f64>> {
    let kind = parse::<TransformKind>(transform)?;
    py.detach(|| {
        let rows = read_corpus(&corpus, false)?.rows;
        let store = open_layer_store(&store_root, model_id, layer)?;
        let stats = fit_layer_transform(&store, kind, FitScope::Train, &rows)?;
        Ok(score_impl(&store, &stats, &rows)?.0)
    })
    .map_err(err)
}

/// Disagreement scores from an ensemble of virtual annotators.
#[pyfunction]
#[pyo3(signature = (store_root, corpus, configs, measure = "std", train_corpus = None))]
fn ensemble_disagreement(
    py: Python<'_>,
    store_root: PathBuf,
    corpus: PathBuf,
    configs: &str,
    measure: &str,
    train_corpus: Option<PathBuf>,
) -> PyResult<BTreeMap<String, f64>> {
    let configs = parse_annotator_group(configs).map_err(err)?;
    let measure = parse::<Measure>(measure)?;
    py.detach(|| {
        let rows = read_corpus(&corpus, false)?.rows;
        let train = match &train_corpus {
            Some(p) => read_corpus(p, false)?.rows,
            None => rows.clone(),
        };
        let opts = FitOptions {
            thresholds: measure != Measure::Std,
            ..FitOptions::default()
        };
        let bank = build_bank(&store_root, &configs, &train, &opts)?;
        let matrix = build_annotation_matrix(&configs, &bank, &rows)?;
        Ok(predict_disagreement(&matrix, measure).values)
    })
    .map_err(err)
}

#[pymodule]
#[pyo3(name = "disagree_kit")]
fn disagree_kit_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("DisagreeKitError", m.py().get_type::<DisagreeKitError>())?;
    m.add_function(wrap_pyfunction!(krippendorff_alpha, m)?)?;
    m.add_function(wrap_pyfunction!(spearman, m)?)?;
    m.add_function(wrap_pyfunction!(mean_pairwise_difference, m)?)?;
    m.add_function(wrap_pyfunction!(fit_thresholds, m)?)?;
    m.add_function(wrap_pyfunction!(map_score_to_label, m)?)?;
    m.add_function(wrap_pyfunction!(parse_annotators, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(score_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(ensemble_disagreement, m)?)?;
    Ok(())
}
