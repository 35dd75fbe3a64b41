use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use star_core::backbone::{BackboneConfig, PretrainConfig};
use star_core::cond_adapter::AdapterConfig;
use star_core::config::{DatasetConfig, ExperimentConfig};
use star_core::dataset::SyntheticConfig;
use star_core::pipeline::ModelConfig;
use star_core::state_encoder::StateEncoderConfig;
use star_core::temporal_encoder::TemporalEncoderConfig;

fn tiny_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        dataset: DatasetConfig::Synthetic(SyntheticConfig {
            regime_counts: vec![2, 2],
            n_state_vars: 2,
            dwell_min: 32,
            dwell_max: 64,
            patch_len: 8,
            t_train: 400,
            t_test: 256,
            ..SyntheticConfig::benchmark(0)
        }),
        backbone: BackboneConfig {
            patch_len: 8,
            window_len: 32,
            d_model: 16,
            ff_hidden: 16,
            n_blocks: 1,
            pretrain: PretrainConfig {
                steps: 10,
                batch_windows: 4,
                ..Default::default()
            },
        },
        model: ModelConfig {
            state: StateEncoderConfig {
                dim: 8,
                memory_size: 6,
                top_k: 2,
                router_hidden: 8,
                ..Default::default()
            },
            temporal: TemporalEncoderConfig {
                f1_hidden: 8,
                f2_hidden: 4,
                agg_hidden: 8,
                softmax_weights: false,
            },
            adapter: AdapterConfig {
                hidden: 8,
                ..Default::default()
            },
            ..Default::default()
        },
        seeds: vec![0, 1],
        ..Default::default()
    };
    cfg.train.steps = 4;
    cfg.train.batch_windows = 2;
    cfg
}

struct Env {
    dir: tempfile::TempDir,
    config: PathBuf,
}

impl Env {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let config = dir.path().join("config.json");
        fs::write(
            &config,
            serde_json::to_string_pretty(&tiny_config()).unwrap(),
        )
        .unwrap();
        Env { dir, config }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn star(&self, args: &[&str]) -> Output {
        let out = Command::new(env!("CARGO_BIN_EXE_star"))
            .arg("--config")
            .arg(&self.config)
            .args(args)
            .env("STAR_NUM_THREADS", "2")
            .output()
            .unwrap();
        out
    }

    fn ok(&self, args: &[&str]) {
        let out = self.star(args);
        assert!(
            out.status.success(),
            "star {args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }

    fn p(&self, name: &str) -> String {
        self.path(name).display().to_string()
    }
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

/// pretrain → finetune → score → eval for one mode, returning the metrics file.
fn pipeline(env: &Env, mode: &str, tag: &str) -> PathBuf {
    let (bb, ck, sc, ev) = (
        env.p(&format!("{tag}.backbone")),
        env.p(&format!("{tag}.ckpt")),
        env.p(&format!("{tag}.scores.csv")),
        env.p(&format!("{tag}.metrics.json")),
    );
    env.ok(&["pretrain", "--out", &bb]);
    env.ok(&["finetune", "--backbone", &bb, "--out", &ck, "--mode", mode]);
    env.ok(&["score", "--checkpoint", &ck, "--out", &sc]);
    env.ok(&["eval", "--scores", &sc, "--out", &ev]);
    PathBuf::from(ev)
}

#[test]
fn usage_errors_exit_nonzero() {
    let env = Env::new();
    for args in [
        &["frobnicate"][..],
        &["ablate", "--out", "x", "--bogus"],
        &[],
    ] {
        let out = env.star(args);
        assert!(!out.status.success(), "{args:?} should fail");
        assert_eq!(out.status.code(), Some(2));
        assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    }
}

#[test]
fn bad_overrides_and_missing_checkpoints_are_reported() {
    let env = Env::new();
    let out = env.star(&[
        "--set",
        "model.state.nope=3",
        "gen-data",
        "--out",
        &env.p("d"),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown config key"));

    let out = env.star(&[
        "score",
        "--checkpoint",
        &env.p("absent.ckpt"),
        "--out",
        &env.p("s.csv"),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("checkpoint not found"));
    assert!(!env.path("s.csv").exists());
}

#[test]
fn gen_data_writes_loadable_csvs_with_provenance() {
    let env = Env::new();
    env.ok(&["gen-data", "--out", &env.p("data"), "--seed", "3"]);
    let train = fs::read_to_string(env.path("data/train.csv")).unwrap();
    let first = train.lines().next().unwrap();
    let meta: Value = serde_json::from_str(first.strip_prefix("# ").unwrap()).unwrap();
    assert_eq!(meta["seed"], 3);
    assert!(meta["version"].as_str().unwrap().starts_with("star-core "));
    assert_eq!(meta["config"]["backbone"]["patch_len"], 8);
    let schema = read_json(&env.path("data/test.schema.json"));
    assert_eq!(schema["meta"]["seed"], 3);
    assert_eq!(schema["label_column"], "label");

    let ds = star_core::dataset::load_csv(
        &env.path("data/train.csv"),
        &env.path("data/train.schema.json"),
        None,
    )
    .unwrap();
    assert_eq!((ds.len(), ds.n_state(), ds.n_numeric()), (400, 2, 2));

    // the generated files drive a run through the file-backed dataset source
    let d = |f: &str| format!("\"{}\"", env.p(&format!("data/{f}")));
    let source = format!(
        "dataset={{\"source\":\"files\",\"train\":{},\"train_schema\":{},\"test\":{},\"test_schema\":{}}}",
        d("train.csv"),
        d("train.schema.json"),
        d("test.csv"),
        d("test.schema.json")
    );
    env.ok(&[
        "--set",
        &source,
        "pretrain",
        "--out",
        &env.p("files.backbone"),
    ]);
    env.ok(&[
        "--set",
        &source,
        "finetune",
        "--backbone",
        &env.p("files.backbone"),
        "--out",
        &env.p("files.ckpt"),
    ]);
    env.ok(&[
        "--set",
        &source,
        "score",
        "--checkpoint",
        &env.p("files.ckpt"),
        "--out",
        &env.p("files.csv"),
    ]);
    let (scores, labels) = star_core::pipeline::read_scores_csv(&env.path("files.csv")).unwrap();
    assert_eq!(scores.len(), 256);
    assert!(labels.is_some());
}

#[test]
fn pipeline_artifacts_carry_config_and_metrics_are_deterministic() {
    let env = Env::new();
    let a = pipeline(&env, "star", "a");
    let b = pipeline(&env, "star", "b");
    assert_eq!(
        fs::read(&a).unwrap(),
        fs::read(&b).unwrap().as_slice(),
        "metric JSON differs between runs"
    );
    assert_eq!(
        fs::read_to_string(env.path("a.scores.csv")).unwrap(),
        fs::read_to_string(env.path("b.scores.csv")).unwrap()
    );

    let doc = read_json(&a);
    assert_eq!(doc["config"], serde_json::to_value(tiny_config()).unwrap());
    let auc = doc["metrics"]["auc_roc"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&auc));

    let ck = star_core::pipeline::load_checkpoint(
        &env.path("a.ckpt"),
        Some(star_core::pipeline::Mode::Star),
    )
    .unwrap();
    assert_eq!(ck.meta["config"], doc["config"]);
    let scores = fs::read_to_string(env.path("a.scores.csv")).unwrap();
    assert!(scores.starts_with("# {"));
    assert_eq!(
        scores.lines().nth(1).unwrap(),
        "t,score_rec,score_match_interp,score_total,label"
    );
}

#[test]
fn overrides_reach_the_artifacts() {
    let env = Env::new();
    let out = env.star(&[
        "--set",
        "eval.buffer_l=3",
        "eval",
        "--scores",
        &env.p("none.csv"),
        "--out",
        &env.p("m.json"),
    ]);
    assert!(!out.status.success());
    pipeline(&env, "frozen", "f");
    env.ok(&[
        "--set",
        "eval.buffer_l=3",
        "eval",
        "--scores",
        &env.p("f.scores.csv"),
        "--out",
        &env.p("m.json"),
    ]);
    let doc = read_json(&env.path("m.json"));
    assert_eq!(doc["metrics"]["buffer_l"], 3);
    assert_eq!(doc["config"]["eval"]["buffer_l"], 3);
}

#[test]
fn ablation_has_six_rows_and_row_one_is_the_frozen_backbone() {
    let env = Env::new();
    env.ok(&["--set", "seeds=[0]", "ablate", "--out", &env.p("abl")]);
    let doc = read_json(&env.path("abl/ablation.json"));
    let rows = doc["results"].as_array().unwrap();
    let labels: Vec<&str> = rows.iter().map(|r| r["label"].as_str().unwrap()).collect();
    assert_eq!(labels, ["row1", "row2", "row3", "row4", "row5", "row6"]);
    assert_eq!(rows[0]["variant"], "frozen");
    assert_eq!(
        rows[5]["variant"]["star"],
        serde_json::json!({"state_encoder": true, "adapter": true, "matching": true})
    );
    let csv = fs::read_to_string(env.path("abl/ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 7);

    let frozen = read_json(&pipeline(&env, "frozen", "fz"));
    assert_eq!(rows[0]["per_seed"][0], frozen["metrics"]);
}

#[test]
fn sweep_emits_one_row_per_value_and_parallel_matches_serial() {
    let env = Env::new();
    env.ok(&[
        "sweep",
        "--param",
        "k",
        "--values",
        "1,3,5",
        "--out",
        &env.p("serial"),
    ]);
    env.ok(&[
        "--parallel",
        "sweep",
        "--param",
        "k",
        "--values",
        "1,3,5",
        "--out",
        &env.p("par"),
    ]);
    let serial = fs::read_to_string(env.path("serial/sweep.json")).unwrap();
    assert_eq!(
        serial,
        fs::read_to_string(env.path("par/sweep.json")).unwrap()
    );
    let doc: Value = serde_json::from_str(&serial).unwrap();
    let values: Vec<u64> = doc["rows"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["value"].as_u64().unwrap())
        .collect();
    assert_eq!(values, [1, 3, 5]);
    assert_eq!(doc["rows"][0]["per_seed"].as_array().unwrap().len(), 2);
    assert!(env.path("par/seed-1/sweep.json").is_file());
    assert_eq!(
        fs::read_to_string(env.path("serial/sweep.csv"))
            .unwrap()
            .lines()
            .count(),
        4
    );

    let out = env.star(&[
        "sweep",
        "--param",
        "k",
        "--values",
        "99",
        "--out",
        &env.p("bad"),
    ]);
    assert_eq!(out.status.code(), Some(1));
}
