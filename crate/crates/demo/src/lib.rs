//! Browser bindings: soft top-K routing, low-rank reconstruction of a weight
//! matrix through its SVD, and end-to-end scoring of a small synthetic
//! series. Every export returns a JSON string.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use wasm_bindgen::prelude::*;

use star_core::backbone::{BackboneConfig, PretrainConfig};
use star_core::cond_adapter::AdapterConfig;
use star_core::config::{DatasetConfig, ExperimentConfig};
use star_core::dataset::SyntheticConfig;
use star_core::experiment::{prepare, train_variant, Variant};
use star_core::linalg::svd;
use star_core::metrics::auc_roc;
use star_core::pipeline::{ModelConfig, ModuleFlags};
use star_core::state_encoder::{soft_topk_values, StateEncoderConfig};
use star_core::temporal_encoder::TemporalEncoderConfig;
use star_core::Mat;

type Res<T> = std::result::Result<T, String>;

fn to_json(v: &impl Serialize) -> Res<String> {
    serde_json::to_string(v).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct TopK {
    theta: f64,
    weights: Vec<f64>,
    /// Entries whose gate is above one half.
    selected: Vec<bool>,
}

pub fn soft_topk_json(logits: &[f64], k: usize, epsilon: f64) -> Res<String> {
    if logits.is_empty() || epsilon.is_nan() || epsilon <= 0.0 {
        return Err("need at least one logit and a positive epsilon".into());
    }
    let row = Mat::row_vector(logits);
    let (theta, w) = soft_topk_values(&row, k, epsilon).map_err(|e| e.to_string())?;
    let theta = theta.item();
    let selected = logits.iter().map(|&l| l >= theta).collect();
    to_json(&TopK {
        theta,
        weights: w.data,
        selected,
    })
}

#[derive(Serialize)]
struct LowRank {
    sigma: Vec<f64>,
    rank: usize,
    /// ‖W − W_r‖_F / ‖W‖_F of the rank-`rank` reconstruction.
    relative_error: f64,
    /// Same quantity from the discarded singular values alone.
    tail_bound: f64,
}

pub fn low_rank_json(rows: usize, cols: usize, rank: usize, seed: u64) -> Res<String> {
    if rows == 0 || cols == 0 || rows > 64 || cols > 64 {
        return Err("matrix sides must lie in 1..=64".into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Mat::randn(rows, cols, 1.0, &mut rng);
    let dec = svd(&w).map_err(|e| e.to_string())?;
    let r = rank.min(dec.sigma.len());
    let mut approx = Mat::zeros(rows, cols);
    for k in 0..r {
        for i in 0..rows {
            for j in 0..cols {
                let v = approx.get(i, j) + dec.u.get(i, k) * dec.sigma[k] * dec.vt.get(k, j);
                approx.set(i, j, v);
            }
        }
    }
    let norm = |m: &Mat| m.data.iter().map(|v| v * v).sum::<f64>().sqrt();
    let diff = w.zip_map(&approx, |a, b| a - b);
    let total: f64 = dec.sigma.iter().map(|s| s * s).sum();
    let tail: f64 = dec.sigma[r..].iter().map(|s| s * s).sum();
    to_json(&LowRank {
        relative_error: norm(&diff) / norm(&w),
        tail_bound: (tail / total).sqrt(),
        sigma: dec.sigma,
        rank: r,
    })
}

#[derive(Serialize)]
struct Scored {
    /// First numerical variable of the test split.
    series: Vec<f64>,
    labels: Vec<u8>,
    score_rec: Vec<f64>,
    score_total: Vec<f64>,
    auc_rec: f64,
    auc_total: f64,
}

fn demo_config(steps: usize) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        dataset: DatasetConfig::Synthetic(SyntheticConfig {
            n_state_vars: 2,
            regime_counts: vec![2, 3],
            dwell_min: 32,
            dwell_max: 96,
            patch_len: 8,
            t_train: 1200,
            t_test: 600,
            ..SyntheticConfig::benchmark(0)
        }),
        backbone: BackboneConfig {
            patch_len: 8,
            window_len: 64,
            d_model: 16,
            ff_hidden: 32,
            n_blocks: 1,
            pretrain: PretrainConfig {
                steps: 150,
                batch_windows: 8,
                ..Default::default()
            },
        },
        model: ModelConfig {
            state: StateEncoderConfig {
                dim: 8,
                memory_size: 12,
                top_k: 3,
                router_hidden: 16,
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
        seeds: vec![0],
        ..Default::default()
    };
    cfg.model.matching.proj_hidden = 32;
    cfg.train.steps = steps;
    cfg.train.batch_windows = 4;
    cfg
}

pub fn score_synthetic_json(seed: u64, steps: usize, with_star: bool) -> Res<String> {
    let cfg = demo_config(steps.min(2000));
    let prep = prepare(&cfg, seed).map_err(|e| e.to_string())?;
    let variant = if with_star {
        Variant::Star(ModuleFlags::default())
    } else {
        Variant::Frozen
    };
    let (ckpt, _) = train_variant(&prep, &cfg, variant).map_err(|e| e.to_string())?;
    let scores = ckpt.score(&prep.test).map_err(|e| e.to_string())?;
    let labels = prep
        .test
        .labels()
        .ok_or("synthetic test split has no labels")?
        .to_vec();
    let auc = |s: &[f64]| auc_roc(s, &labels).map_err(|e| e.to_string());
    to_json(&Scored {
        series: prep.test.column(prep.test.numeric_indices()[0]).to_vec(),
        auc_rec: auc(&scores.score_rec)?,
        auc_total: auc(&scores.score_total)?,
        score_rec: scores.score_rec,
        score_total: scores.score_total,
        labels,
    })
}

#[wasm_bindgen]
pub fn soft_topk(logits: Vec<f64>, k: usize, epsilon: f64) -> std::result::Result<String, JsError> {
    soft_topk_json(&logits, k, epsilon).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn low_rank(
    rows: usize,
    cols: usize,
    rank: usize,
    seed: u32,
) -> std::result::Result<String, JsError> {
    low_rank_json(rows, cols, rank, seed as u64).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn score_synthetic(
    seed: u32,
    steps: usize,
    with_star: bool,
) -> std::result::Result<String, JsError> {
    score_synthetic_json(seed as u64, steps, with_star).map_err(|e| JsError::new(&e))
}
