use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::manifest::Run;
use super::presets::LayerChoice;
use super::*;
use crate::corpus::{
    format_predictions, read_corpus, read_predictions, read_score_map, write_corpus, CorpusFile, Prediction,
    PredictionRow,
};
use crate::ensemble::{
    annotate_pool, build_annotation_matrix, format_sweep, mean_spearman, predict_disagreement, sample_subset,
    sample_subsets, sweep_subsets, top_k, EnsembleSpec, SweepRow,
};
use crate::geometry::TransformStats;
use crate::metrics::AlphaSpec;
use crate::mlp::{build_feature_matrix, pooled_layers, train, MlpConfig, MlpModel, Targets, Task};
use crate::model::{
    format_annotator_group, parse_annotator_group, AnnotatorConfig, BaseModel, ThresholdSet, TransformKind, UsagePair,
};
use crate::optim::SimplexConfig;
use crate::pipeline::{
    available_configs, build_bank, by_language, evaluate_labels, evaluate_scores, fit_layer_transform, gold_labels_for,
    open_layer_store, score_corpus, FitOptions,
};
use crate::rng::fresh_seed;
use crate::simulator::{read_truth, simulate_corpus, write_truth, SimConfig};
use crate::store::{available_layers, store_dir, EmbeddingStore};
use crate::threshold::{fit_thresholds, fit_thresholds_per_language, map_score_to_label, ThresholdFit};

type CliResult<T = ()> = std::result::Result<T, CliError>;

/// Thresholds as written by `fit-thresholds`: one pooled set or one per language.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ThresholdFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pooled: Option<ThresholdFit>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub per_language: BTreeMap<String, ThresholdFit>,
}

/// How an MLP's input features are assembled; saved next to the model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub model_id: String,
    pub layers: Vec<u32>,
    pub pool: LayerPool,
    pub features: FeatureMode,
    /// One fitted transform per layer, in `layers` order.
    pub transforms: Vec<TransformStats>,
}

pub(super) fn dispatch(cli: Cli) -> CliResult {
    let seed = cli.seed;
    match cli.command {
        Command::Simulate(a) => simulate(a, seed),
        Command::FitTransform(a) => fit_transform_cmd(a, seed),
        Command::Score(a) => score(a, seed),
        Command::FitThresholds(a) => fit_thresholds_cmd(a, seed),
        Command::PredictLabels(a) => predict_labels(a, seed),
        Command::MlpTrain(a) => mlp_train(a, seed),
        Command::MlpPredict(a) => mlp_predict(a, seed),
        Command::EnsemblePredict(a) => ensemble_predict(a, seed),
        Command::SweepLayers(a) => {
            let transforms = [a.transform];
            sweep_grid("sweep-layers", &a, &a.grid, &transforms, "layers.tsv", &a.out, seed)
        }
        Command::SweepTransforms(a) => sweep_grid(
            "sweep-transforms",
            &a,
            &a.grid,
            &a.transforms,
            "transforms.tsv",
            &a.out,
            seed,
        ),
        Command::SweepMeasures(a) => sweep_measures(a, seed),
        Command::SweepStrategies(a) => sweep_strategies(a, seed),
        Command::Evaluate(a) => evaluate(a, seed),
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

/// Errors raised while validating user-supplied options.
fn check<T>(r: crate::Result<T>) -> CliResult<T> {
    r.map_err(|e| CliError::Usage(e.to_string()))
}

fn options<T: Serialize>(args: &T) -> CliResult<serde_json::Value> {
    Ok(serde_json::to_value(args).map_err(Error::from)?)
}

fn round6(x: f64) -> f64 {
    (x * 1e6).round() / 1e6
}

fn fmt6(x: Option<f64>, missing: &str) -> String {
    x.map(|v| format!("{v:.6}")).unwrap_or_else(|| missing.to_string())
}

/// Accepts a store model id or a model letter.
fn model_id(s: &str) -> String {
    let mut chars = s.chars();
    match (chars.next(), chars.next()) {
        (Some(c), None) => BaseModel::from_letter(c.to_ascii_uppercase())
            .map(|m| m.model_id().to_string())
            .unwrap_or_else(|| s.to_string()),
        _ => s.to_string(),
    }
}

fn load_corpus(run: &mut Run, path: &Path) -> CliResult<CorpusFile> {
    run.input(path)?;
    let corpus = read_corpus(path, false)?;
    if corpus.skipped > 0 {
        log::warn!(
            "{}: skipped {} malformed or duplicate rows",
            path.display(),
            corpus.skipped
        );
    }
    if corpus.rows.is_empty() {
        return Err(Error::EmptyData(format!("{} has no usable rows", path.display())).into());
    }
    Ok(corpus)
}

fn load_train(run: &mut Run, train: Option<&PathBuf>, corpus: &CorpusFile) -> CliResult<Vec<UsagePair>> {
    match train {
        Some(p) => Ok(load_corpus(run, p)?.rows),
        None => Ok(corpus.rows.clone()),
    }
}

fn open_store(run: &mut Run, root: &Path, model_id: &str, layer: u32) -> CliResult<EmbeddingStore> {
    let store = open_layer_store(root, model_id, layer)?;
    run.input(store.dir())?;
    Ok(store)
}

fn record_stores(run: &mut Run, root: &Path, configs: &[AnnotatorConfig]) -> CliResult {
    let mut dirs: Vec<PathBuf> = configs
        .iter()
        .map(|c| store_dir(root, c.model.model_id(), c.layer()))
        .collect();
    dirs.sort();
    dirs.dedup();
    for d in dirs {
        if d.is_dir() {
            run.input(&d)?;
        }
    }
    Ok(())
}

fn write_predictions(run: &mut Run, rows: &[PredictionRow]) -> CliResult {
    run.write("predictions.tsv", format_predictions(rows)?)?;
    Ok(())
}

fn simulate(a: SimulateArgs, seed: Option<u64>) -> CliResult {
    let seed = seed.unwrap_or_else(fresh_seed);
    let cfg = SimConfig {
        n_items: a.n_items,
        mu_range: (a.mu_min, a.mu_max),
        sigma_range: (a.sigma_min, a.sigma_max),
        n_annotators: a.n_annotators,
        n_virtual: a.n_virtual,
        seed,
    };
    check(cfg.validate())?;
    if a.n_virtual > 0 && a.dim < 2 {
        return Err(usage("--dim must be at least 2"));
    }
    if a.train_items.is_some_and(|n| n > a.n_items) {
        return Err(usage("--train-items exceeds --n-items"));
    }
    let mut run = Run::new(&a.out.out)?;
    let corpus = simulate_corpus(cfg)?;
    write_corpus(&corpus.pairs, run.path("corpus.tsv"))?;
    run.record_output("corpus.tsv");
    write_truth(&corpus.truth, run.path("truth.tsv"))?;
    run.record_output("truth.tsv");
    if let Some(n) = a.train_items {
        write_corpus(&corpus.pairs[..n], run.path("train.tsv"))?;
        run.record_output("train.tsv");
        write_corpus(&corpus.pairs[n..], run.path("test.tsv"))?;
        run.record_output("test.tsv");
    }
    if a.n_virtual > 0 {
        corpus.write_stores(run.path("stores"), a.dim)?;
        run.record_output("stores");
        run.write(
            "pool.txt",
            format!("{}\n", format_annotator_group(&corpus.virtual_configs())),
        )?;
    }
    println!("simulated {} items (seed {seed})", corpus.pairs.len());
    run.finish("simulate", options(&a)?, Some(seed))?;
    Ok(())
}

fn fit_transform_cmd(a: FitTransformArgs, seed: Option<u64>) -> CliResult {
    let mut run = Run::new(&a.out.out)?;
    let corpus = load_corpus(&mut run, &a.corpus)?;
    let store = open_store(&mut run, &a.store.store_root, &model_id(&a.model), a.layer)?;
    let stats = fit_layer_transform(&store, a.transform, a.fit_on, &corpus.rows)?;
    run.write_json("transform.json", &stats)?;
    println!("fitted {} on {} vectors", stats.kind, stats.fitted_on);
    run.finish("fit-transform", options(&a)?, seed)?;
    Ok(())
}

fn score(a: ScoreArgs, seed: Option<u64>) -> CliResult {
    let mut run = Run::new(&a.out.out)?;
    let corpus = load_corpus(&mut run, &a.corpus)?;
    let train_rows = load_train(&mut run, a.train_corpus.as_ref(), &corpus)?;
    let root = a.store.store_root.as_path();
    let mut scores = BTreeMap::new();
    let mut skipped = 0;
    if let Some(preset) = a.preset {
        if preset.layer_for("").is_none() {
            return Err(usage(format!("preset {} does not route layers", preset.name())));
        }
        for (lang, pairs) in by_language(&corpus.rows) {
            let LayerChoice {
                model_id,
                layer,
                transform,
            } = preset.layer_for(&lang).expect("routing preset");
            let store = open_store(&mut run, root, model_id, layer)?;
            let train_lang: Vec<UsagePair> = train_rows.iter().filter(|p| p.language == lang).cloned().collect();
            let stats = fit_layer_transform(&store, transform, a.fit_on, &train_lang)?;
            let (s, k) = score_corpus(&store, &stats, &pairs)?;
            scores.extend(s);
            skipped += k;
        }
    } else {
        let model = a
            .model
            .as_deref()
            .ok_or_else(|| usage("--model is required without --preset"))?;
        let layer = a.layer.ok_or_else(|| usage("--layer is required without --preset"))?;
        let store = open_store(&mut run, root, &model_id(model), layer)?;
        let stats = match &a.transform_file {
            Some(p) => {
                run.input(p)?;
                let text = std::fs::read_to_string(p).map_err(|e| Error::Io {
                    path: p.clone(),
                    source: e,
                })?;
                let stats: TransformStats = serde_json::from_str(&text).map_err(Error::from)?;
                if stats.dim() != store.dim() {
                    return Err(Error::DimensionMismatch {
                        expected: store.dim(),
                        found: stats.dim(),
                    }
                    .into());
                }
                stats
            }
            None => fit_layer_transform(
                &store,
                a.transform.unwrap_or(TransformKind::None),
                a.fit_on,
                &train_rows,
            )?,
        };
        let (s, k) = score_corpus(&store, &stats, &corpus.rows)?;
        scores = s;
        skipped = k;
    }
    let rows: Vec<PredictionRow> = scores.iter().map(|(id, s)| PredictionRow::score(id, *s)).collect();
    write_predictions_named(&mut run, "scores.tsv", &rows)?;
    println!("scored {} pairs ({skipped} skipped)", rows.len());
    run.finish("score", options(&a)?, seed)?;
    Ok(())
}

fn write_predictions_named(run: &mut Run, name: &str, rows: &[PredictionRow]) -> CliResult {
    run.write(name, format_predictions(rows)?)?;
    Ok(())
}

fn fit_thresholds_cmd(a: FitThresholdsArgs, seed: Option<u64>) -> CliResult {
    let mut run = Run::new(&a.out.out)?;
    run.input(&a.scores)?;
    let scores = read_score_map(&a.scores)?;
    let corpus = load_corpus(&mut run, &a.corpus)?;
    let spec = check(AlphaSpec::new(a.level, 4))?;
    let simplex = SimplexConfig::default();
    let per_language = a.per_language || a.preset.is_some_and(|p| p.per_language_thresholds());
    let scored: Vec<UsagePair> = corpus
        .rows
        .iter()
        .filter(|p| scores.contains_key(&p.instance_id))
        .cloned()
        .collect();
    if scored.is_empty() {
        return Err(Error::EmptyData("no corpus row has a score".into()).into());
    }
    let file = if per_language {
        ThresholdFile {
            pooled: None,
            per_language: fit_thresholds_per_language(&scored, &scores, spec, &simplex)?,
        }
    } else {
        let gold = gold_labels_for(&scored, &scores);
        ThresholdFile {
            pooled: Some(fit_thresholds(&scores, &gold, spec, &simplex)?),
            per_language: BTreeMap::new(),
        }
    };
    if let Some(f) = &file.pooled {
        println!("alpha_train {:.6} edges {:?}", f.alpha_train, f.edges.edges());
    }
    for (lang, f) in &file.per_language {
        println!("{lang}: alpha_train {:.6} edges {:?}", f.alpha_train, f.edges.edges());
    }
    run.write_json("thresholds.json", &file)?;
    run.finish("fit-thresholds", options(&a)?, seed)?;
    Ok(())
}

fn predict_labels(a: PredictLabelsArgs, seed: Option<u64>) -> CliResult {
    let mut run = Run::new(&a.out.out)?;
    run.input(&a.scores)?;
    run.input(&a.thresholds)?;
    let scores = read_score_map(&a.scores)?;
    let text = std::fs::read_to_string(&a.thresholds).map_err(|e| Error::Io {
        path: a.thresholds.clone(),
        source: e,
    })?;
    let file: ThresholdFile = serde_json::from_str(&text).map_err(Error::from)?;
    let languages: Option<BTreeMap<String, String>> = match &a.corpus {
        Some(p) => Some(
            load_corpus(&mut run, p)?
                .rows
                .into_iter()
                .map(|r| (r.instance_id, r.language))
                .collect(),
        ),
        None => None,
    };
    let mut rows = Vec::with_capacity(scores.len());
    for (id, &s) in &scores {
        let set: ThresholdSet = match &file.pooled {
            Some(f) => f.edges,
            None => {
                let langs = languages
                    .as_ref()
                    .ok_or_else(|| usage("per-language thresholds need --corpus"))?;
                let lang = langs
                    .get(id)
                    .ok_or_else(|| Error::EmptyData(format!("instance {id} is not in the corpus")))?;
                file.per_language
                    .get(lang)
                    .ok_or_else(|| Error::MissingStore(format!("thresholds for language {lang} (instance {id})")))?
                    .edges
            }
        };
        rows.push(PredictionRow::label(id, map_score_to_label(s, &set)));
    }
    write_predictions(&mut run, &rows)?;
    println!("labelled {} pairs", rows.len());
    run.finish("predict-labels", options(&a)?, seed)?;
    Ok(())
}

fn open_feature_sources(run: &mut Run, root: &Path, model_id: &str, layers: &[u32]) -> CliResult<Vec<EmbeddingStore>> {
    layers.iter().map(|&l| open_store(run, root, model_id, l)).collect()
}

fn mlp_train(a: MlpTrainArgs, seed: Option<u64>) -> CliResult {
    let seed = seed.unwrap_or_else(fresh_seed);
    let task = a
        .task
        .or(a.preset.map(|p| p.task()))
        .ok_or_else(|| usage("--task is required without --preset"))?;
    let preset_config = match a.preset {
        Some(p) => Some(
            p.mlp_config()
                .ok_or_else(|| usage(format!("preset {} is not an MLP preset", p.name())))?,
        ),
        None => None,
    };
    let choice = a.preset.and_then(|p| p.layer_for(""));
    let base = preset_config.unwrap_or_else(|| match task {
        1 => MlpConfig::subtask1(),
        _ => MlpConfig::subtask2_mlp2(),
    });
    let config = MlpConfig {
        depth: a.depth.unwrap_or(base.depth),
        hidden_dim: a.hidden_dim.unwrap_or(base.hidden_dim),
        features: a.features,
        dropout: a.dropout.unwrap_or(base.dropout),
        epochs: a.epochs.unwrap_or(base.epochs),
        batch_size: a.batch_size.unwrap_or(base.batch_size),
        learning_rate: a.learning_rate.unwrap_or(base.learning_rate),
        warmup_ratio: a.warmup_ratio.unwrap_or(base.warmup_ratio),
        weighted_loss: a.weighted_loss || base.weighted_loss,
        seed,
    };
    check(config.validate())?;
    let model = a
        .model
        .as_deref()
        .map(model_id)
        .or(choice.map(|c| c.model_id.to_string()))
        .ok_or_else(|| usage("--model is required without --preset"))?;
    let transform = a
        .transform
        .or(choice.map(|c| c.transform))
        .unwrap_or(TransformKind::None);
    let layer = a.layer.or(choice.map(|c| c.layer));
    if a.pool == LayerPool::Single && layer.is_none() {
        return Err(usage("--layer is required with --pool single"));
    }

    let mut run = Run::new(&a.out.out)?;
    let corpus = load_corpus(&mut run, &a.corpus)?;
    let root = a.store.store_root.as_path();
    let available =
        available_layers(root, &model).map_err(|_| Error::MissingStore(format!("{model} under {}", root.display())))?;
    let layers = pooled_layers(&available, layer.unwrap_or(0), a.pool)?;
    let stores = open_feature_sources(&mut run, root, &model, &layers)?;
    let transforms = stores
        .iter()
        .map(|s| fit_layer_transform(s, transform, a.fit_on, &corpus.rows))
        .collect::<crate::Result<Vec<_>>>()?;

    let (ids, targets): (Vec<&str>, Targets) = if task == 1 {
        let (ids, labels): (Vec<&str>, Vec<u8>) = corpus
            .rows
            .iter()
            .filter_map(|p| p.gold.median_label.map(|l| (p.instance_id.as_str(), l)))
            .unzip();
        (ids, Targets::Labels(labels))
    } else {
        let (ids, values): (Vec<&str>, Vec<f64>) = corpus
            .rows
            .iter()
            .filter_map(|p| p.gold.disagreement.map(|d| (p.instance_id.as_str(), d)))
            .unzip();
        (ids, Targets::Values(values))
    };
    let sources: Vec<(&EmbeddingStore, &TransformStats)> = stores.iter().zip(&transforms).collect();
    let x = build_feature_matrix(&sources, &ids, config.features)?;
    let trained = train(x.view(), &targets, &config)?;

    trained.model.save(run.path("model"))?;
    run.record_output("model/model.json");
    run.record_output("model/weights.bin");
    let spec = FeatureSpec {
        model_id: model.clone(),
        layers: layers.clone(),
        pool: a.pool,
        features: config.features,
        transforms,
    };
    run.write_json("model/features.json", &spec)?;
    let mut loss = String::from("epoch\tloss\n");
    for (i, l) in trained.loss_trace.iter().enumerate() {
        let _ = writeln!(loss, "{}\t{l:.6}", i + 1);
    }
    run.write("loss.tsv", loss)?;
    println!(
        "trained {:?} on {} rows from {model} layers {layers:?}; final loss {:.6}",
        config.depth,
        ids.len(),
        trained.loss_trace.last().copied().unwrap_or(f64::NAN)
    );
    run.finish("mlp-train", options(&a)?, Some(seed))?;
    Ok(())
}

fn mlp_predict(a: MlpPredictArgs, seed: Option<u64>) -> CliResult {
    let mut run = Run::new(&a.out.out)?;
    let corpus = load_corpus(&mut run, &a.corpus)?;
    run.input(&a.model_dir)?;
    let model = MlpModel::load(&a.model_dir)?;
    let spec_path = a.model_dir.join("features.json");
    let text = std::fs::read_to_string(&spec_path).map_err(|e| Error::Io {
        path: spec_path.clone(),
        source: e,
    })?;
    let spec: FeatureSpec = serde_json::from_str(&text).map_err(Error::from)?;
    if spec.transforms.len() != spec.layers.len() {
        return Err(Error::CorruptStore {
            path: spec_path,
            reason: "one transform per layer expected".into(),
        }
        .into());
    }
    let stores = open_feature_sources(&mut run, &a.store.store_root, &spec.model_id, &spec.layers)?;
    let sources: Vec<(&EmbeddingStore, &TransformStats)> = stores.iter().zip(&spec.transforms).collect();
    let ids: Vec<&str> = corpus.rows.iter().map(|p| p.instance_id.as_str()).collect();
    let x = build_feature_matrix(&sources, &ids, spec.features)?;
    let preds = model.predict(x.view())?;
    let rows: Vec<PredictionRow> = ids
        .iter()
        .zip(&preds)
        .map(|(id, p)| match (model.task, p) {
            (Task::Classify4, Prediction::Label(l)) => PredictionRow::label(*id, *l),
            (_, p) => PredictionRow::score(*id, p.as_f64()),
        })
        .collect();
    write_predictions(&mut run, &rows)?;
    println!("predicted {} pairs", rows.len());
    run.finish("mlp-predict", options(&a)?, seed)?;
    Ok(())
}

fn resolve_pool(e: &EnsembleArgs) -> CliResult<Vec<AnnotatorConfig>> {
    let pool = match &e.pool {
        Some(codes) => check(parse_annotator_group(codes))?,
        None => available_configs(&e.store.store_root),
    };
    if pool.is_empty() {
        return Err(Error::MissingStore(format!("no annotator stores under {}", e.store.store_root.display())).into());
    }
    Ok(pool)
}

fn fit_options(e: &EnsembleArgs, thresholds: bool) -> FitOptions {
    FitOptions {
        scope: e.fit_on,
        thresholds,
        ..FitOptions::default()
    }
}

#[derive(Serialize)]
struct EnsembleSummary {
    configs: String,
    measure: Measure,
    predicted: usize,
    omitted: usize,
    missing_annotations: usize,
}

fn ensemble_predict(a: EnsemblePredictArgs, seed: Option<u64>) -> CliResult {
    let seed = seed.unwrap_or_else(fresh_seed);
    let e = &a.ensemble;
    let configs = if let Some(codes) = &a.configs {
        check(parse_annotator_group(codes))?
    } else if let Some(p) = a.preset {
        let codes = p
            .ensemble_codes()
            .ok_or_else(|| usage(format!("preset {} is not an ensemble preset", p.name())))?;
        check(parse_annotator_group(codes))?
    } else if let Some(strategy) = a.strategy {
        let spec = EnsembleSpec {
            strategy,
            subset_size: e.subset_size,
            pool: resolve_pool(e)?,
            seed,
            n_samples: 1,
        };
        check(sample_subset(&spec, a.sample))?
    } else {
        return Err(usage("one of --configs, --preset or --strategy is required"));
    };

    let mut run = Run::new(&a.out.out)?;
    let corpus = load_corpus(&mut run, &e.corpus)?;
    let train_rows = load_train(&mut run, e.train_corpus.as_ref(), &corpus)?;
    let root = e.store.store_root.as_path();
    record_stores(&mut run, root, &configs)?;
    let bank = build_bank(root, &configs, &train_rows, &fit_options(e, a.measure != Measure::Std))?;
    let matrix = build_annotation_matrix(&configs, &bank, &corpus.rows)?;
    let pred = predict_disagreement(&matrix, a.measure);
    if pred.values.is_empty() {
        return Err(Error::EmptyData("no instance has enough annotations for the measure".into()).into());
    }
    let rows: Vec<PredictionRow> = pred.values.iter().map(|(id, v)| PredictionRow::score(id, *v)).collect();
    write_predictions(&mut run, &rows)?;
    let summary = EnsembleSummary {
        configs: format_annotator_group(&configs),
        measure: a.measure,
        predicted: rows.len(),
        omitted: pred.omitted,
        missing_annotations: matrix.missing(),
    };
    run.write_json("ensemble.json", &summary)?;
    println!(
        "{} {}: {} predictions, {} omitted",
        summary.configs, a.measure, summary.predicted, summary.omitted
    );
    run.finish("ensemble-predict", options(&a)?, Some(seed))?;
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
struct GridRow {
    model: String,
    layer: u32,
    transform: crate::model::TransformKind,
    language: String,
    alpha: Option<f64>,
    n: usize,
}

/// Threshold path for one (store, transform): fit on `train`, label
/// `eval`, alpha pooled and optionally per language.
fn grid_cell(
    store: &EmbeddingStore,
    transform: crate::model::TransformKind,
    train: &[UsagePair],
    eval: &CorpusFile,
    g: &GridArgs,
) -> crate::Result<Vec<(String, Option<f64>, usize)>> {
    let spec = AlphaSpec::default();
    let stats = fit_layer_transform(store, transform, g.fit_on, train)?;
    let (train_scores, _) = score_corpus(store, &stats, train)?;
    let fit = fit_thresholds(
        &train_scores,
        &gold_labels_for(train, &train_scores),
        spec,
        &SimplexConfig::default(),
    )?;
    let (scores, _) = score_corpus(store, &stats, &eval.rows)?;
    let labels: BTreeMap<String, u8> = scores
        .iter()
        .map(|(id, s)| (id.clone(), map_score_to_label(*s, &fit.edges)))
        .collect();
    let gold = eval.gold_labels();
    let (alpha, n) = evaluate_labels(&labels, &gold, spec)?;
    let mut out = vec![("all".to_string(), Some(alpha), n)];
    if g.per_language {
        for (lang, pairs) in by_language(&eval.rows) {
            let sub: BTreeMap<String, u8> = pairs
                .iter()
                .filter_map(|p| labels.get(&p.instance_id).map(|l| (p.instance_id.clone(), *l)))
                .collect();
            let n = sub.keys().filter(|id| gold.contains_key(*id)).count();
            out.push((lang, evaluate_labels(&sub, &gold, spec).ok().map(|r| r.0), n));
        }
    }
    Ok(out)
}

fn sweep_grid<T: Serialize>(
    name: &str,
    args: &T,
    g: &GridArgs,
    transforms: &[crate::model::TransformKind],
    file: &str,
    out: &OutArg,
    seed: Option<u64>,
) -> CliResult {
    let mut run = Run::new(&out.out)?;
    let corpus = load_corpus(&mut run, &g.corpus)?;
    let train_rows = load_train(&mut run, g.train_corpus.as_ref(), &corpus)?;
    let root = g.store.store_root.as_path();
    let mut stores = Vec::new();
    for m in &g.models {
        let id = model_id(m);
        match available_layers(root, &id) {
            Ok(layers) => {
                for l in layers {
                    stores.push((id.clone(), l, open_store(&mut run, root, &id, l)?));
                }
            }
            Err(_) => log::warn!("no stores for {id} under {}", root.display()),
        }
    }
    if stores.is_empty() {
        return Err(Error::MissingStore(format!("no layer stores for {:?} under {}", g.models, root.display())).into());
    }
    let jobs: Vec<(usize, crate::model::TransformKind)> = (0..stores.len())
        .flat_map(|i| transforms.iter().map(move |t| (i, *t)))
        .collect();
    let rows: Vec<GridRow> = jobs
        .par_iter()
        .flat_map_iter(|&(i, t)| {
            let (id, layer, store) = &stores[i];
            let cells = grid_cell(store, t, &train_rows, &corpus, g).unwrap_or_else(|e| {
                log::warn!("{id} layer {layer} {t}: {e}");
                vec![("all".to_string(), None, 0)]
            });
            cells.into_iter().map(move |(language, alpha, n)| GridRow {
                model: id.clone(),
                layer: *layer,
                transform: t,
                language,
                alpha,
                n,
            })
        })
        .collect();
    let mut tsv = String::from("model\tlayer\ttransform\tlanguage\talpha\tn\n");
    for r in &rows {
        let _ = writeln!(
            tsv,
            "{}\t{}\t{}\t{}\t{}\t{}",
            r.model,
            r.layer,
            r.transform,
            r.language,
            fmt6(r.alpha, "failed"),
            r.n
        );
    }
    run.write(file, tsv)?;
    if let Some(best) = rows
        .iter()
        .filter(|r| r.language == "all" && r.alpha.is_some())
        .max_by(|a, b| a.alpha.unwrap_or(f64::MIN).total_cmp(&b.alpha.unwrap_or(f64::MIN)))
    {
        println!(
            "best: {} layer {} {} alpha {:.6}",
            best.model,
            best.layer,
            best.transform,
            best.alpha.unwrap_or(f64::NAN)
        );
    }
    run.finish(name, options(args)?, seed)?;
    Ok(())
}

fn gold_scores(run: &mut Run, corpus: &CorpusFile, truth: Option<&PathBuf>) -> CliResult<BTreeMap<String, f64>> {
    match truth {
        Some(p) => {
            run.input(p)?;
            Ok(read_truth(p)?.into_iter().map(|(id, t)| (id, t.sigma)).collect())
        }
        None => Ok(corpus.gold_disagreement()),
    }
}

#[derive(Serialize)]
struct MeasureSummary {
    strategy: Strategy,
    n_samples: usize,
    mean_spearman: BTreeMap<String, Option<f64>>,
    failed: BTreeMap<String, usize>,
}

fn sweep_measures(a: SweepMeasuresArgs, seed: Option<u64>) -> CliResult {
    let seed = seed.unwrap_or_else(fresh_seed);
    let e = &a.ensemble;
    let spec = EnsembleSpec {
        strategy: a.strategy,
        subset_size: e.subset_size,
        pool: resolve_pool(e)?,
        seed,
        n_samples: a.n_samples,
    };
    check(spec.validate())?;
    let mut run = Run::new(&a.out.out)?;
    let corpus = load_corpus(&mut run, &e.corpus)?;
    let train_rows = load_train(&mut run, e.train_corpus.as_ref(), &corpus)?;
    let gold = gold_scores(&mut run, &corpus, a.truth.as_ref())?;
    let root = e.store.store_root.as_path();
    record_stores(&mut run, root, &spec.pool)?;
    let bank = build_bank(root, &spec.pool, &train_rows, &fit_options(e, true))?;
    let columns = annotate_pool(&spec.pool, &bank, &corpus.rows)?;
    let subsets = sample_subsets(&spec)?;
    let by_measure = sweep_subsets(&subsets, &columns, &corpus.rows, &gold, &Measure::ALL)?;

    let mut per_sample: Vec<BTreeMap<Measure, Option<f64>>> = vec![BTreeMap::new(); subsets.len()];
    for (m, rows) in &by_measure {
        for r in rows {
            per_sample[r.sample].insert(*m, r.spearman);
        }
    }
    let mut tsv = String::from("sample\tsubset_code\tstd\tmpd\tvr\n");
    for (k, subset) in subsets.iter().enumerate() {
        let cell = |m: Measure| fmt6(per_sample[k].get(&m).copied().flatten(), "failed");
        let _ = writeln!(
            tsv,
            "{k}\t{}\t{}\t{}\t{}",
            format_annotator_group(subset),
            cell(Measure::Std),
            cell(Measure::Mpd),
            cell(Measure::Vr)
        );
    }
    run.write("measures.tsv", tsv)?;
    let summary = MeasureSummary {
        strategy: a.strategy,
        n_samples: subsets.len(),
        mean_spearman: by_measure
            .iter()
            .map(|(m, rows)| (m.name().to_string(), mean_spearman(rows).map(round6)))
            .collect(),
        failed: by_measure
            .iter()
            .map(|(m, rows)| {
                (
                    m.name().to_string(),
                    rows.iter().filter(|r| r.spearman.is_none()).count(),
                )
            })
            .collect(),
    };
    for (m, v) in &summary.mean_spearman {
        println!("{m}: mean rho {}", fmt6(*v, "undefined"));
    }
    run.write_json("summary.json", &summary)?;
    run.finish("sweep-measures", options(&a)?, Some(seed))?;
    Ok(())
}

#[derive(Serialize)]
struct TopRow {
    rank: usize,
    subset_code: String,
    spearman: f64,
}

#[derive(Serialize)]
struct StrategySummary {
    feasible: bool,
    n_samples: usize,
    failed: usize,
    mean_spearman: Option<f64>,
    max_spearman: Option<f64>,
    top: Vec<TopRow>,
}

fn sweep_strategies(a: SweepStrategiesArgs, seed: Option<u64>) -> CliResult {
    let seed = seed.unwrap_or_else(fresh_seed);
    let e = &a.ensemble;
    let pool = resolve_pool(e)?;
    let mut run = Run::new(&a.out.out)?;
    let corpus = load_corpus(&mut run, &e.corpus)?;
    let train_rows = load_train(&mut run, e.train_corpus.as_ref(), &corpus)?;
    let gold = gold_scores(&mut run, &corpus, a.truth.as_ref())?;
    let root = e.store.store_root.as_path();
    record_stores(&mut run, root, &pool)?;
    let bank = build_bank(root, &pool, &train_rows, &fit_options(e, a.measure != Measure::Std))?;
    let columns = annotate_pool(&pool, &bank, &corpus.rows)?;

    let mut summaries = BTreeMap::new();
    let mut tsv = String::from("strategy\tn_samples\tfailed\tmean_spearman\tmax_spearman\tbest_subset\n");
    for &strategy in &a.strategies {
        let spec = EnsembleSpec {
            strategy,
            subset_size: e.subset_size,
            pool: pool.clone(),
            seed,
            n_samples: a.n_samples,
        };
        let subsets = match sample_subsets(&spec) {
            Ok(s) => s,
            Err(Error::InfeasibleStrategy(msg)) => {
                log::warn!("{strategy}: {msg}");
                let _ = writeln!(tsv, "{strategy}\t0\t0\tinfeasible\tinfeasible\t-");
                summaries.insert(
                    strategy.name().to_string(),
                    StrategySummary {
                        feasible: false,
                        n_samples: 0,
                        failed: 0,
                        mean_spearman: None,
                        max_spearman: None,
                        top: Vec::new(),
                    },
                );
                continue;
            }
            Err(e) => return Err(e.into()),
        };
        let rows: Vec<SweepRow> = sweep_subsets(&subsets, &columns, &corpus.rows, &gold, &[a.measure])?
            .remove(&a.measure)
            .unwrap_or_default();
        run.write(&format!("ranked_{strategy}.tsv"), format_sweep(&rows))?;
        let failed = rows.iter().filter(|r| r.spearman.is_none()).count();
        let mean = mean_spearman(&rows);
        let best = rows.first().filter(|r| r.spearman.is_some());
        let _ = writeln!(
            tsv,
            "{strategy}\t{}\t{failed}\t{}\t{}\t{}",
            rows.len(),
            fmt6(mean, "failed"),
            fmt6(best.and_then(|r| r.spearman), "failed"),
            best.map_or("-", |r| r.subset_code.as_str())
        );
        println!("{strategy}: mean rho {}", fmt6(mean, "undefined"));
        summaries.insert(
            strategy.name().to_string(),
            StrategySummary {
                feasible: true,
                n_samples: rows.len(),
                failed,
                mean_spearman: mean.map(round6),
                max_spearman: best.and_then(|r| r.spearman).map(round6),
                top: top_k(&rows, a.top_k)
                    .into_iter()
                    .map(|r| TopRow {
                        rank: r.rank,
                        subset_code: r.subset_code.clone(),
                        spearman: round6(r.spearman.unwrap_or(f64::NAN)),
                    })
                    .collect(),
            },
        );
    }
    run.write("strategies.tsv", tsv)?;
    run.write_json(
        "summary.json",
        &serde_json::json!({ "measure": a.measure, "strategies": summaries }),
    )?;
    run.finish("sweep-strategies", options(&a)?, Some(seed))?;
    Ok(())
}

#[derive(Serialize)]
struct Score {
    value: Option<f64>,
    n: usize,
}

#[derive(Serialize)]
struct Evaluation {
    task: u8,
    metric: String,
    gold: &'static str,
    overall: Score,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    per_language: BTreeMap<String, Score>,
}

fn evaluate(a: EvaluateArgs, seed: Option<u64>) -> CliResult {
    let mut run = Run::new(&a.out.out)?;
    run.input(&a.predictions)?;
    let preds = read_predictions(&a.predictions)?;
    let corpus = load_corpus(&mut run, &a.gold)?;
    let spec = check(AlphaSpec::new(a.level, 4))?;
    let languages = by_language(&corpus.rows);

    let (metric, gold_name, overall, per_language) = if a.task == 1 {
        let predicted: BTreeMap<String, u8> = preds
            .iter()
            .map(|r| match r.value {
                Prediction::Label(l) => Ok((r.instance_id.clone(), l)),
                Prediction::Score(_) => Err(usage("task 1 predictions must be integer labels")),
            })
            .collect::<CliResult<_>>()?;
        let gold = corpus.gold_labels();
        let (value, n) = evaluate_labels(&predicted, &gold, spec)?;
        let mut per = BTreeMap::new();
        if a.per_language {
            for (lang, pairs) in &languages {
                let sub: BTreeMap<String, u8> = pairs
                    .iter()
                    .filter_map(|p| predicted.get(&p.instance_id).map(|l| (p.instance_id.clone(), *l)))
                    .collect();
                let n = sub.keys().filter(|id| gold.contains_key(*id)).count();
                per.insert(
                    lang.clone(),
                    Score {
                        value: evaluate_labels(&sub, &gold, spec).ok().map(|r| round6(r.0)),
                        n,
                    },
                );
            }
        }
        let level = serde_json::to_value(a.level).map_err(Error::from)?;
        (
            format!("krippendorff_alpha_{}", level.as_str().unwrap_or("ordinal")),
            "median_label",
            Score {
                value: Some(round6(value)),
                n,
            },
            per,
        )
    } else {
        let predicted: BTreeMap<String, f64> = preds
            .iter()
            .map(|r| (r.instance_id.clone(), r.value.as_f64()))
            .collect();
        let gold = gold_scores(&mut run, &corpus, a.truth.as_ref())?;
        let (value, n) = evaluate_scores(&predicted, &gold)?;
        let mut per = BTreeMap::new();
        if a.per_language {
            for (lang, pairs) in &languages {
                let sub: BTreeMap<String, f64> = pairs
                    .iter()
                    .filter_map(|p| predicted.get(&p.instance_id).map(|v| (p.instance_id.clone(), *v)))
                    .collect();
                let n = sub.keys().filter(|id| gold.contains_key(*id)).count();
                per.insert(
                    lang.clone(),
                    Score {
                        value: evaluate_scores(&sub, &gold).ok().map(|r| round6(r.0)),
                        n,
                    },
                );
            }
        }
        (
            "spearman".to_string(),
            if a.truth.is_some() {
                "true_sigma"
            } else {
                "disagreement"
            },
            Score {
                value: Some(round6(value)),
                n,
            },
            per,
        )
    };
    let mut tsv = String::from("scope\tmetric\tvalue\tn\n");
    let _ = writeln!(
        tsv,
        "all\t{metric}\t{}\t{}",
        fmt6(overall.value, "undefined"),
        overall.n
    );
    for (lang, s) in &per_language {
        let _ = writeln!(tsv, "{lang}\t{metric}\t{}\t{}", fmt6(s.value, "undefined"), s.n);
    }
    println!("{metric} {} (n = {})", fmt6(overall.value, "undefined"), overall.n);
    let result = Evaluation {
        task: a.task,
        metric,
        gold: gold_name,
        overall,
        per_language,
    };
    run.write_json("evaluation.json", &result)?;
    run.write("evaluation.tsv", tsv)?;
    run.finish("evaluate", options(&a)?, seed)?;
    Ok(())
}
