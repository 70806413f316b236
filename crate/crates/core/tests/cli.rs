use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};
use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_tsgzsl");

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn fails(args: &[&str]) -> String {
    let out = run(args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Small 4-class dataset and a config tuned to train in about a second.
struct Toy {
    dir: TempDir,
}

impl Toy {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("Toy_TRAIN.tsv");
        ok(&["synth", "--out", p(&data), "--series", "48", "--length", "32", "--seed", "3"]);
        Toy { dir }
    }

    fn data(&self) -> PathBuf {
        self.dir.path().join("Toy_TRAIN.tsv")
    }

    fn config(&self, name: &str, extra: Value) -> PathBuf {
        let mut cfg = json!({
            "dataset": [self.data()],
            "seed": 5,
            "repr_dim": 4,
            "hidden_dim": 4,
            "num_blocks": 1,
            "encoder_epochs": 2,
            "encoder_batch_size": 8,
            "latent_filters": [2],
            "latent_dim": 4,
            "classifier_hidden": [4],
            "gzsl_epochs": 5,
            "gzsl_batch_size": 8,
            "out": self.dir.path().join(name),
        });
        for (k, v) in extra.as_object().unwrap() {
            cfg[k] = v.clone();
        }
        let path = self.dir.path().join(format!("{name}.json"));
        std::fs::write(&path, cfg.to_string()).unwrap();
        path
    }

    fn out(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn space(&self, trials: usize, single: bool) -> PathBuf {
        let space = if single {
            json!({
                "trials": trials,
                "repr_dim": [4], "hidden_dim": [4], "num_blocks": [1], "latent_dim": [4],
                "latent_blocks": [1], "latent_filters": [2], "latent_kernel_size": [3],
                "latent_pool": [2], "classifier_hidden": [4], "tau": [1.0],
            })
        } else {
            json!({
                "trials": trials,
                "repr_dim": [4, 6], "hidden_dim": [4], "num_blocks": [1], "latent_dim": [4, 8],
                "latent_blocks": [1], "latent_filters": [2, 3], "latent_kernel_size": [3],
                "latent_pool": [2], "classifier_hidden": [4], "tau": [0.5, 1.0, 2.0],
            })
        };
        let path = self.dir.path().join(format!("space_{trials}_{single}.json"));
        std::fs::write(&path, space.to_string()).unwrap();
        path
    }
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn train_and_eval(cfg: &Path) {
    ok(&["split", "--config", p(cfg)]);
    ok(&["train", "--config", p(cfg)]);
    ok(&["eval", "--config", p(cfg)]);
}

#[test]
fn full_run_writes_every_artifact_and_eval_is_reproducible() {
    let toy = Toy::new();
    let cfg = toy.config("full", json!({}));
    train_and_eval(&cfg);
    let out = toy.out("full");
    for f in [
        "config.json", "split.json", "encoder.bin", "model.bin", "model.json",
        "embed_curve.csv", "gzsl_curve.csv", "validation.json", "metrics.json",
        "sweep.csv", "sweep.svg",
    ] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let metrics: Value = serde_json::from_slice(&read(&out.join("metrics.json"))).unwrap();
    for key in ["selected", "best_h"] {
        let r = &metrics[key];
        let (s, u, h) = (r["acc_s"].as_f64().unwrap(), r["acc_u"].as_f64().unwrap(), r["H"].as_f64().unwrap());
        assert_eq!(h, tsgzsl::metrics::harmonic_mean(s, u));
    }
    let sweep = String::from_utf8(read(&out.join("sweep.csv"))).unwrap();
    assert_eq!(sweep.lines().count(), 1 + 1021);

    let before = (read(&out.join("metrics.json")), read(&out.join("sweep.csv")));
    ok(&["eval", "--config", p(&cfg)]);
    assert_eq!(before, (read(&out.join("metrics.json")), read(&out.join("sweep.csv"))));
}

#[test]
fn same_seed_gives_identical_metrics() {
    let toy = Toy::new();
    let a = toy.config("a", json!({}));
    let b = toy.config("b", json!({}));
    train_and_eval(&a);
    train_and_eval(&b);
    assert_eq!(read(&toy.out("a").join("split.json")), read(&toy.out("b").join("split.json")));
    assert_eq!(read(&toy.out("a").join("model.bin")), read(&toy.out("b").join("model.bin")));
    assert_eq!(read(&toy.out("a").join("metrics.json")), read(&toy.out("b").join("metrics.json")));
}

#[test]
fn split_is_byte_identical_across_invocations() {
    let toy = Toy::new();
    let cfg = toy.config("s", json!({}));
    ok(&["split", "--config", p(&cfg)]);
    let first = read(&toy.out("s").join("split.json"));
    ok(&["split", "--config", p(&cfg)]);
    assert_eq!(first, read(&toy.out("s").join("split.json")));
}

#[test]
fn no_embedder_mode_skips_the_encoder() {
    let toy = Toy::new();
    let cfg = toy.config("ne", json!({ "mode": "no_embedder" }));
    train_and_eval(&cfg);
    let out = toy.out("ne");
    assert!(!out.join("encoder.bin").exists());
    assert!(!out.join("embed_curve.csv").exists());
    assert!(out.join("model.bin").is_file());
    let err = fails(&["eval", "--config", p(&cfg), "--mode", "full"]);
    assert!(err.contains("mode"), "{err}");
}

#[test]
fn train_without_manifest_fails() {
    let toy = Toy::new();
    let cfg = toy.config("nomanifest", json!({}));
    let err = fails(&["train", "--config", p(&cfg)]);
    assert!(err.contains("split.json"), "{err}");
}

#[test]
fn two_class_dataset_is_rejected() {
    let toy = Toy::new();
    let data = toy.dir.path().join("Pair_TRAIN.tsv");
    std::fs::write(&data, "1\t0.1\t0.2\t0.3\n2\t0.3\t0.2\t0.1\n1\t0.0\t0.5\t0.1\n2\t0.2\t0.2\t0.9\n").unwrap();
    let cfg = toy.config("pair", json!({ "dataset": [data] }));
    fails(&["split", "--config", p(&cfg)]);
}

#[test]
fn unknown_config_key_is_rejected() {
    let toy = Toy::new();
    let cfg = toy.config("typo", json!({ "learning_rate": 0.1 }));
    let err = fails(&["split", "--config", p(&cfg)]);
    assert!(err.contains("learning_rate"), "{err}");
}

#[test]
fn eval_rejects_a_split_with_another_class_layout() {
    let toy = Toy::new();
    let cfg = toy.config("mm", json!({}));
    train_and_eval(&cfg);
    let original: Value = serde_json::from_slice(&read(&toy.out("mm").join("split.json"))).unwrap();
    let changed = (0..50).any(|seed| {
        ok(&["split", "--config", p(&cfg), "--seed", &seed.to_string()]);
        let s: Value = serde_json::from_slice(&read(&toy.out("mm").join("split.json"))).unwrap();
        s["seen_classes"] != original["seen_classes"]
    });
    assert!(changed, "no seed produced a different layout");
    let err = fails(&["eval", "--config", p(&cfg)]);
    assert!(err.contains("layout"), "{err}");
}

#[test]
fn diverging_training_aborts_with_diagnostic() {
    let toy = Toy::new();
    let cfg = toy.config("nan", json!({ "mode": "no_embedder", "tau": 1e-300, "gzsl_lr": 1e300 }));
    ok(&["split", "--config", p(&cfg)]);
    let err = fails(&["train", "--config", p(&cfg)]);
    assert!(err.contains("non-finite"), "{err}");
}

fn trials(out: &Path) -> Vec<f64> {
    let log: Value = serde_json::from_slice(&read(&out.join("search").join("trials.json"))).unwrap();
    log.as_array()
        .unwrap()
        .iter()
        .map(|t| t["validation_ausuc"].as_f64().unwrap())
        .collect()
}

#[test]
fn search_with_budget_one_returns_its_trial() {
    let toy = Toy::new();
    let cfg = toy.config("one", json!({}));
    let space = toy.space(1, false);
    ok(&["split", "--config", p(&cfg)]);
    ok(&["search", "--config", p(&cfg), "--space", p(&space)]);
    let log: Value = serde_json::from_slice(&read(&toy.out("one").join("search/trials.json"))).unwrap();
    let best: Value = serde_json::from_slice(&read(&toy.out("one").join("search/best_config.json"))).unwrap();
    assert_eq!(log.as_array().unwrap().len(), 1);
    assert_eq!(log[0]["config"], best);
}

#[test]
fn identical_trials_score_identically() {
    let toy = Toy::new();
    let cfg = toy.config("same", json!({}));
    let space = toy.space(3, true);
    ok(&["split", "--config", p(&cfg)]);
    ok(&["search", "--config", p(&cfg), "--space", p(&space)]);
    let scores = trials(&toy.out("same"));
    assert_eq!(scores.len(), 3);
    assert!(scores.iter().all(|s| s.to_bits() == scores[0].to_bits()), "{scores:?}");
}

#[test]
fn best_trial_beats_the_median() {
    let toy = Toy::new();
    let cfg = toy.config("five", json!({}));
    let space = toy.space(5, false);
    ok(&["split", "--config", p(&cfg)]);
    ok(&["search", "--config", p(&cfg), "--space", p(&space)]);
    let mut scores = trials(&toy.out("five"));
    let log: Value = serde_json::from_slice(&read(&toy.out("five").join("search/trials.json"))).unwrap();
    let best: Value = serde_json::from_slice(&read(&toy.out("five").join("search/best_config.json"))).unwrap();
    let best_score = log
        .as_array()
        .unwrap()
        .iter()
        .find(|t| t["config"] == best)
        .unwrap()["validation_ausuc"]
        .as_f64()
        .unwrap();
    scores.sort_by(f64::total_cmp);
    assert!(best_score >= scores[2]);
}

#[test]
fn pipeline_runs_end_to_end() {
    let toy = Toy::new();
    let cfg = toy.config("pipe", json!({}));
    let space = toy.space(1, true);
    let out = ok(&["pipeline", "--config", p(&cfg), "--space", p(&space)]);
    let metrics: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(metrics["grid_points"], 1021);
    assert!(toy.out("pipe").join("metrics.json").is_file());
}
