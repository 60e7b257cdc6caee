mod common;

use std::path::Path;

use common::{cli, cli_code, output_digests};

fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn p(dir: &Path, rel: &str) -> String {
    dir.join(rel).display().to_string()
}

fn simulate(dir: &Path, extra: &[&str]) {
    let out = p(dir, "sim");
    let mut args = vec!["--seed", "21", "simulate", "--n-items", "80", "--out", out.as_str()];
    args.extend_from_slice(extra);
    cli(&args).unwrap();
}

#[test]
fn noiseless_threshold_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    simulate(d, &["--sigma-min", "0", "--sigma-max", "0", "--train-items", "60"]);
    cli(&[
        "score",
        "--corpus",
        &p(d, "sim/corpus.tsv"),
        "--train-corpus",
        &p(d, "sim/train.tsv"),
        "--store-root",
        &p(d, "sim/stores"),
        "--model",
        "B",
        "--layer",
        "4",
        "--transform",
        "center",
        "--out",
        &p(d, "score"),
    ])
    .unwrap();
    cli(&[
        "fit-thresholds",
        "--corpus",
        &p(d, "sim/train.tsv"),
        "--scores",
        &p(d, "score/scores.tsv"),
        "--out",
        &p(d, "thr"),
    ])
    .unwrap();
    cli(&[
        "predict-labels",
        "--scores",
        &p(d, "score/scores.tsv"),
        "--thresholds",
        &p(d, "thr/thresholds.json"),
        "--out",
        &p(d, "lab"),
    ])
    .unwrap();
    let out = cli(&[
        "evaluate",
        "--task",
        "1",
        "--predictions",
        &p(d, "lab/predictions.tsv"),
        "--gold",
        &p(d, "sim/test.tsv"),
        "--out",
        &p(d, "ev"),
    ])
    .unwrap();
    let ev = read_json(&d.join("ev/evaluation.json"));
    assert!(ev["overall"]["value"].as_f64().unwrap() >= 0.9, "{out}");
    assert_eq!(ev["overall"]["n"], 20);

    let manifest = read_json(&d.join("score/run_manifest.json"));
    assert_eq!(manifest["command"], "score");
    assert_eq!(manifest["options"]["transform"], "center");
    let inputs = manifest["inputs"].as_object().unwrap();
    assert!(inputs.keys().any(|k| k.ends_with("corpus.tsv")));
    assert!(inputs.keys().any(|k| k.contains("layer-4")));
    assert!(inputs.values().all(|v| v.as_str().unwrap().len() == 64));
}

#[test]
fn transform_file_reuse_matches_inline_fit() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    simulate(d, &[]);
    let (corpus, store) = (p(d, "sim/corpus.tsv"), p(d, "sim/stores"));
    cli(&[
        "fit-transform",
        "--corpus",
        &corpus,
        "--store-root",
        &store,
        "--model",
        "llama-7b",
        "--layer",
        "16",
        "--transform",
        "abtt",
        "--out",
        &p(d, "tf"),
    ])
    .unwrap();
    cli(&[
        "score",
        "--corpus",
        &corpus,
        "--store-root",
        &store,
        "--model",
        "A",
        "--layer",
        "16",
        "--transform-file",
        &p(d, "tf/transform.json"),
        "--out",
        &p(d, "s1"),
    ])
    .unwrap();
    cli(&[
        "score",
        "--corpus",
        &corpus,
        "--store-root",
        &store,
        "--model",
        "A",
        "--layer",
        "16",
        "--transform",
        "abtt",
        "--out",
        &p(d, "s2"),
    ])
    .unwrap();
    assert_eq!(
        std::fs::read(d.join("s1/scores.tsv")).unwrap(),
        std::fs::read(d.join("s2/scores.tsv")).unwrap()
    );
}

#[test]
fn per_language_thresholds_need_corpus() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    simulate(d, &[]);
    let (corpus, store) = (p(d, "sim/corpus.tsv"), p(d, "sim/stores"));
    cli(&[
        "score",
        "--corpus",
        &corpus,
        "--store-root",
        &store,
        "--model",
        "A",
        "--layer",
        "8",
        "--out",
        &p(d, "s"),
    ])
    .unwrap();
    cli(&[
        "fit-thresholds",
        "--corpus",
        &corpus,
        "--scores",
        &p(d, "s/scores.tsv"),
        "--per-language",
        "--out",
        &p(d, "t"),
    ])
    .unwrap();
    let t = read_json(&d.join("t/thresholds.json"));
    assert!(t["per_language"]["synthetic"]["edges"].is_array());
    let base = [
        "predict-labels",
        "--scores",
        &p(d, "s/scores.tsv"),
        "--thresholds",
        &p(d, "t/thresholds.json"),
    ];
    let out = p(d, "l");
    assert_eq!(cli_code(&[&base[..], &["--out", &out]].concat()), 1);
    cli(&[&base[..], &["--corpus", &corpus, "--out", &out]].concat()).unwrap();
}

#[test]
fn mlp_train_and_predict() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    simulate(d, &["--train-items", "60"]);
    let store = p(d, "sim/stores");
    cli(&[
        "--seed",
        "1",
        "mlp-train",
        "--task",
        "1",
        "--corpus",
        &p(d, "sim/train.tsv"),
        "--store-root",
        &store,
        "--model",
        "A",
        "--layer",
        "24",
        "--transform",
        "standardize",
        "--depth",
        "mlp1",
        "--epochs",
        "10",
        "--weighted-loss",
        "--out",
        &p(d, "m"),
    ])
    .unwrap();
    let model = read_json(&d.join("m/model/model.json"));
    assert_eq!(model["task"], "classify4");
    let loss = std::fs::read_to_string(d.join("m/loss.tsv")).unwrap();
    assert_eq!(loss.lines().count(), 11);
    cli(&[
        "mlp-predict",
        "--corpus",
        &p(d, "sim/test.tsv"),
        "--store-root",
        &store,
        "--model-dir",
        &p(d, "m/model"),
        "--out",
        &p(d, "pr"),
    ])
    .unwrap();
    let preds = std::fs::read_to_string(d.join("pr/predictions.tsv")).unwrap();
    assert_eq!(preds.lines().count(), 21);
    assert!(preds
        .lines()
        .skip(1)
        .all(|l| matches!(l.split('\t').nth(1), Some("1" | "2" | "3" | "4"))));
    cli(&[
        "evaluate",
        "--task",
        "1",
        "--predictions",
        &p(d, "pr/predictions.tsv"),
        "--gold",
        &p(d, "sim/test.tsv"),
        "--out",
        &p(d, "ev"),
    ])
    .unwrap();
}

#[test]
fn ensemble_preset_and_strategy_sweep() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    simulate(d, &["--n-virtual", "4"]);
    let (corpus, store) = (p(d, "sim/corpus.tsv"), p(d, "sim/stores"));
    cli(&[
        "ensemble-predict",
        "--corpus",
        &corpus,
        "--store-root",
        &store,
        "--preset",
        "post-eval-task2",
        "--out",
        &p(d, "e"),
    ])
    .unwrap();
    assert_eq!(read_json(&d.join("e/ensemble.json"))["configs"], "AjY-AiX-AjZ-AiW");
    cli(&[
        "--seed",
        "2",
        "sweep-strategies",
        "--corpus",
        &corpus,
        "--store-root",
        &store,
        "--n-samples",
        "10",
        "--top-k",
        "3",
        "--out",
        &p(d, "s"),
    ])
    .unwrap();
    let summary = read_json(&d.join("s/summary.json"));
    // one base model only: hetero cannot be sampled
    assert_eq!(summary["strategies"]["hetero"]["feasible"], false);
    assert_eq!(summary["strategies"]["homo"]["top"].as_array().unwrap().len(), 3);
    let ranked = std::fs::read_to_string(d.join("s/ranked_mixed.tsv")).unwrap();
    assert!(ranked.starts_with("rank\tsubset_code\tmeasure\tspearman\n"));
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    simulate(d, &[]);
    let corpus = p(d, "sim/corpus.tsv");
    let out = p(d, "x");
    assert_eq!(cli_code(&["--help"]), 0);
    assert_eq!(cli_code(&["no-such-command"]), 1);
    assert_eq!(
        cli_code(&[
            "score",
            "--corpus",
            &corpus,
            "--store-root",
            &p(d, "sim/stores"),
            "--out",
            &out
        ]),
        1
    );
    assert_eq!(
        cli_code(&[
            "ensemble-predict",
            "--corpus",
            &corpus,
            "--store-root",
            &p(d, "sim/stores"),
            "--configs",
            "AqX",
            "--out",
            &out
        ]),
        1
    );
    assert_eq!(
        cli_code(&[
            "score",
            "--corpus",
            &corpus,
            "--store-root",
            &p(d, "missing"),
            "--model",
            "A",
            "--layer",
            "8",
            "--out",
            &out
        ]),
        2
    );
    assert_eq!(
        cli_code(&[
            "score",
            "--corpus",
            &p(d, "nope.tsv"),
            "--store-root",
            &p(d, "sim/stores"),
            "--model",
            "A",
            "--layer",
            "8",
            "--out",
            &out
        ]),
        2
    );
    assert_eq!(
        cli_code(&[
            "evaluate",
            "--task",
            "1",
            "--predictions",
            &corpus,
            "--gold",
            &corpus,
            "--out",
            &out
        ]),
        2
    );
}

#[test]
fn simulate_is_seed_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    for dir in ["a", "b"] {
        cli(&["--seed", "8", "simulate", "--n-items", "30", "--out", &p(d, dir)]).unwrap();
    }
    assert_eq!(
        output_digests(&d.join("a")).unwrap(),
        output_digests(&d.join("b")).unwrap()
    );
    cli(&["--seed", "9", "simulate", "--n-items", "30", "--out", &p(d, "c")]).unwrap();
    assert_ne!(
        output_digests(&d.join("a")).unwrap(),
        output_digests(&d.join("c")).unwrap()
    );
}

#[test]
fn omitted_seed_is_recorded() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    cli(&["simulate", "--n-items", "10", "--n-virtual", "0", "--out", &p(d, "a")]).unwrap();
    let seed = read_json(&d.join("a/run_manifest.json"))["seed"].as_u64().unwrap();
    cli(&[
        "--seed",
        &seed.to_string(),
        "simulate",
        "--n-items",
        "10",
        "--n-virtual",
        "0",
        "--out",
        &p(d, "b"),
    ])
    .unwrap();
    assert_eq!(
        std::fs::read(d.join("a/corpus.tsv")).unwrap(),
        std::fs::read(d.join("b/corpus.tsv")).unwrap()
    );
}
