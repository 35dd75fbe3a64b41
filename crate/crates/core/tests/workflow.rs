use star_core::backbone::{BackboneConfig, PretrainConfig};
use star_core::config::{DatasetConfig, ExperimentConfig};
use star_core::dataset::{load_csv, write_csv, SyntheticConfig};
use star_core::experiment::{
    ablation_variants, artifact_meta, assemble, load_data, run_seed, run_variants,
};
use star_core::pipeline::{load_checkpoint, read_scores_csv, save_checkpoint, write_scores_csv};
use star_core::state_encoder::StateEncoderConfig;

fn tiny() -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        dataset: DatasetConfig::Synthetic(SyntheticConfig {
            regime_counts: vec![2, 2],
            n_state_vars: 2,
            dwell_min: 32,
            dwell_max: 64,
            patch_len: 8,
            t_train: 320,
            t_test: 200,
            ..SyntheticConfig::benchmark(0)
        }),
        backbone: BackboneConfig {
            patch_len: 8,
            window_len: 32,
            d_model: 16,
            ff_hidden: 16,
            n_blocks: 1,
            pretrain: PretrainConfig {
                steps: 5,
                batch_windows: 2,
                ..Default::default()
            },
        },
        seeds: vec![4, 9],
        ..Default::default()
    };
    cfg.model.state = StateEncoderConfig {
        dim: 8,
        memory_size: 6,
        top_k: 2,
        router_hidden: 8,
        ..Default::default()
    };
    cfg.model.matching.proj_hidden = 8;
    cfg.train.steps = 3;
    cfg.train.batch_windows = 2;
    cfg
}

#[test]
fn csv_round_trip_preserves_the_split() {
    let cfg = tiny();
    let (train, test) = load_data(&cfg, 4).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let meta = artifact_meta(&cfg);
    let p = |f: &str| dir.path().join(f);
    write_csv(&train, &p("train.csv"), &p("train.json"), Some(&meta)).unwrap();
    write_csv(&test, &p("test.csv"), &p("test.json"), None).unwrap();
    let tr = load_csv(&p("train.csv"), &p("train.json"), None).unwrap();
    let te = load_csv(&p("test.csv"), &p("test.json"), Some(&tr)).unwrap();
    assert_eq!(tr, train);
    assert_eq!(te.labels(), test.labels());
    assert_eq!(te.state_ids(), test.state_ids());
    for c in te.numeric_indices() {
        assert_eq!(te.column(c), test.column(c));
    }
}

#[test]
fn seed_runs_assemble_into_the_serial_report() {
    let cfg = tiny();
    let variants = ablation_variants();
    let serial = run_variants(&cfg, &variants).unwrap();
    let per_seed = cfg
        .seeds
        .iter()
        .rev()
        .map(|&s| run_seed(&cfg, s, &variants).unwrap())
        .rev()
        .collect();
    let merged = assemble(&cfg, &variants, per_seed).unwrap();
    assert_eq!(serial.to_json().unwrap(), merged.to_json().unwrap());
    assert_eq!(serial.results.len(), 6);
    assert!(serial.results.iter().all(|r| r.per_seed.len() == 2));
}

#[test]
fn checkpoint_and_score_files_carry_metadata() {
    let cfg = tiny();
    let prep = star_core::experiment::prepare(&cfg, 9).unwrap();
    let (mut ckpt, _) = star_core::experiment::train_variant(
        &prep,
        &cfg,
        star_core::experiment::Variant::ablation_row(6).unwrap(),
    )
    .unwrap();
    ckpt.meta = artifact_meta(&cfg);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&ckpt, &path).unwrap();
    let back = load_checkpoint(&path, None).unwrap();
    assert_eq!(back.meta, ckpt.meta);

    let scores = back.score(&prep.test).unwrap();
    let csv = dir.path().join("s.csv");
    write_scores_csv(&csv, &scores, prep.test.labels(), Some(&ckpt.meta)).unwrap();
    let (total, labels) = read_scores_csv(&csv).unwrap();
    assert_eq!(total, scores.score_total);
    assert_eq!(labels.as_deref(), prep.test.labels());
}
