//! End-to-end runs over a seed list: benchmark comparison, the module
//! ablation grid and one-parameter sweeps.

use serde::{Deserialize, Serialize};

use crate::autograd::ParamStore;
use crate::backbone::{pretrain, Backbone};
use crate::config::{DatasetConfig, ExperimentConfig};
use crate::dataset::{generate_synthetic, load_csv, SeriesDataset};
use crate::error::{Result, StarError};
use crate::metrics::{evaluate, MetricReport};
use crate::pipeline::{finetune, Checkpoint, Mode, ModuleFlags, TrainHistory};

pub const VERSION: &str = concat!("star-core ", env!("CARGO_PKG_VERSION"));

/// Provenance stamped into every written artifact.
pub fn artifact_meta(cfg: &ExperimentConfig) -> serde_json::Value {
    serde_json::json!({ "version": VERSION, "config": cfg })
}

/// Data and pretrained backbone for one seed, shared by every variant.
#[derive(Clone)]
pub struct PreparedSeed {
    pub seed: u64,
    pub train: SeriesDataset,
    pub test: SeriesDataset,
    pub backbone: Backbone,
    pub store: ParamStore,
}

pub fn load_data(cfg: &ExperimentConfig, seed: u64) -> Result<(SeriesDataset, SeriesDataset)> {
    match &cfg.dataset {
        DatasetConfig::Synthetic(s) => {
            generate_synthetic(&crate::dataset::SyntheticConfig { seed, ..s.clone() })
        }
        DatasetConfig::Files {
            train,
            train_schema,
            test,
            test_schema,
        } => {
            let tr = load_csv(train, train_schema, None)?;
            let te = load_csv(test, test_schema, Some(&tr))?;
            Ok((tr, te))
        }
    }
}

pub fn prepare(cfg: &ExperimentConfig, seed: u64) -> Result<PreparedSeed> {
    let (train, test) = load_data(cfg, seed)?;
    let mut bc = cfg.backbone.clone();
    bc.pretrain.seed = seed;
    let (store, backbone, _) = pretrain(&train, &bc)?;
    Ok(PreparedSeed {
        seed,
        train,
        test,
        backbone,
        store,
    })
}

/// One trained configuration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Frozen,
    Lora,
    Full,
    Star(ModuleFlags),
}

impl Variant {
    /// Rows of the module ablation grid, numbered from 1. Row 1 (no module)
    /// is the frozen backbone.
    pub fn ablation_row(row: usize) -> Option<Variant> {
        let (state_encoder, adapter, matching) = match row {
            1 => return Some(Variant::Frozen),
            2 => (false, true, false),
            3 => (false, false, true),
            4 => (true, true, false),
            5 => (true, false, true),
            6 => (true, true, true),
            _ => return None,
        };
        Some(Variant::Star(ModuleFlags {
            state_encoder,
            adapter,
            matching,
        }))
    }

    pub fn flags(&self) -> ModuleFlags {
        match self {
            Variant::Star(f) => *f,
            _ => ModuleFlags {
                state_encoder: false,
                adapter: false,
                matching: false,
            },
        }
    }

    fn mode(&self) -> Mode {
        match self {
            Variant::Frozen => Mode::Frozen,
            Variant::Lora => Mode::Lora,
            Variant::Full => Mode::Full,
            Variant::Star(_) => Mode::Star,
        }
    }
}

pub fn train_variant(
    prep: &PreparedSeed,
    cfg: &ExperimentConfig,
    variant: Variant,
) -> Result<(Checkpoint, TrainHistory)> {
    let mut model = cfg.model.clone();
    if let Variant::Star(flags) = variant {
        model.modules = flags;
    }
    let mut train = cfg.train.clone();
    train.mode = variant.mode();
    train.seed = prep.seed;
    finetune(&prep.backbone, &prep.store, &prep.train, &model, &train)
}

pub fn score_metrics(
    ckpt: &Checkpoint,
    test: &SeriesDataset,
    cfg: &ExperimentConfig,
) -> Result<MetricReport> {
    let labels = test
        .labels()
        .ok_or_else(|| StarError::Input("test split has no labels".into()))?;
    let scores = ckpt.score(test)?;
    evaluate(
        &scores.score_total,
        labels,
        cfg.buffer_l(),
        cfg.max_buffer_l(),
    )
}

pub fn run_variant(
    prep: &PreparedSeed,
    cfg: &ExperimentConfig,
    variant: Variant,
) -> Result<MetricReport> {
    let (ckpt, _) = train_variant(prep, cfg, variant)?;
    score_metrics(&ckpt, &prep.test, cfg)
}

/// Field-wise mean of several reports (buffers taken from the first).
pub fn mean_report(reports: &[MetricReport]) -> Result<MetricReport> {
    let first = reports
        .first()
        .ok_or_else(|| StarError::EmptyInput("no reports to average".into()))?;
    let n = reports.len() as f64;
    let avg = |f: fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    Ok(MetricReport {
        auc_roc: avg(|r| r.auc_roc),
        auc_pr: avg(|r| r.auc_pr),
        r_auc_roc: avg(|r| r.r_auc_roc),
        r_auc_pr: avg(|r| r.r_auc_pr),
        vus_roc: avg(|r| r.vus_roc),
        vus_pr: avg(|r| r.vus_pr),
        buffer_l: first.buffer_l,
        max_buffer_l: first.max_buffer_l,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub variant: Variant,
    pub label: String,
    pub per_seed: Vec<MetricReport>,
    pub mean: MetricReport,
}

/// Results of several variants over the config's seeds, with the resolved
/// config and crate version embedded.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub version: String,
    pub config: ExperimentConfig,
    pub seeds: Vec<u64>,
    pub results: Vec<VariantResult>,
}

impl ExperimentReport {
    pub fn get(&self, label: &str) -> Option<&VariantResult> {
        self.results.iter().find(|r| r.label == label)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// One row per variant with its mean metrics.
    pub fn to_csv(&self) -> String {
        let mut out = format!("variant,{}\n", MetricReport::CSV_HEADER);
        for r in &self.results {
            out.push_str(&format!("{},{}\n", r.label, r.mean.csv_row()));
        }
        out
    }
}

/// Metrics of every variant on one seed; the backbone is pretrained once
/// and shared by all variants.
pub fn run_seed(
    cfg: &ExperimentConfig,
    seed: u64,
    variants: &[(String, Variant)],
) -> Result<Vec<MetricReport>> {
    let prep = prepare(cfg, seed)?;
    variants
        .iter()
        .map(|(label, v)| {
            let m = run_variant(&prep, cfg, *v)?;
            log::info!(
                "seed {seed} {label}: auc_roc {:.4} vus_roc {:.4}",
                m.auc_roc,
                m.vus_roc
            );
            Ok(m)
        })
        .collect()
}

/// Combine per-seed results (in seed order) into a report.
pub fn assemble(
    cfg: &ExperimentConfig,
    variants: &[(String, Variant)],
    per_seed: Vec<Vec<MetricReport>>,
) -> Result<ExperimentReport> {
    let results = variants
        .iter()
        .enumerate()
        .map(|(i, (label, v))| {
            let runs: Vec<MetricReport> = per_seed.iter().map(|s| s[i].clone()).collect();
            Ok(VariantResult {
                variant: *v,
                label: label.clone(),
                mean: mean_report(&runs)?,
                per_seed: runs,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ExperimentReport {
        version: VERSION.into(),
        config: cfg.clone(),
        seeds: cfg.seeds.clone(),
        results,
    })
}

/// Run labelled variants on every seed, one seed after another.
pub fn run_variants(
    cfg: &ExperimentConfig,
    variants: &[(String, Variant)],
) -> Result<ExperimentReport> {
    cfg.validate()?;
    let per_seed = cfg
        .seeds
        .iter()
        .map(|&s| run_seed(cfg, s, variants))
        .collect::<Result<Vec<_>>>()?;
    assemble(cfg, variants, per_seed)
}

pub fn benchmark_variants() -> Vec<(String, Variant)> {
    vec![
        ("frozen".into(), Variant::Frozen),
        ("lora".into(), Variant::Lora),
        ("star".into(), Variant::Star(ModuleFlags::default())),
    ]
}

/// The six-row module grid, labelled `row1`..`row6`.
pub fn ablation_variants() -> Vec<(String, Variant)> {
    (1..=6)
        .map(|r| {
            (
                format!("row{r}"),
                Variant::ablation_row(r).expect("rows 1..=6 exist"),
            )
        })
        .collect()
}

/// Frozen backbone, LoRA and full STAR.
pub fn benchmark(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    run_variants(cfg, &benchmark_variants())
}

pub fn ablate(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    run_variants(cfg, &ablation_variants())
}

/// Hyperparameters that `sweep` can vary.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    /// Number of selected memory entries K.
    TopK,
    /// Memory size N.
    MemorySize,
    RankDivisor,
    /// State embedding width d.
    Hidden,
}

impl std::str::FromStr for SweepParam {
    type Err = StarError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "k" | "top_k" => Ok(SweepParam::TopK),
            "n" | "memory_size" => Ok(SweepParam::MemorySize),
            "rank_divisor" | "rank" => Ok(SweepParam::RankDivisor),
            "hidden" | "dim" => Ok(SweepParam::Hidden),
            _ => Err(StarError::Config(format!(
                "unknown sweep parameter '{s}' (k, n, rank_divisor, hidden)"
            ))),
        }
    }
}

impl SweepParam {
    fn apply(&self, cfg: &mut ExperimentConfig, value: usize) {
        match self {
            SweepParam::TopK => cfg.model.state.top_k = value,
            SweepParam::MemorySize => cfg.model.state.memory_size = value,
            SweepParam::RankDivisor => cfg.model.adapter.rank_divisor = value,
            SweepParam::Hidden => cfg.model.state.dim = value,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: usize,
    pub per_seed: Vec<MetricReport>,
    pub mean: MetricReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub version: String,
    pub config: ExperimentConfig,
    pub param: SweepParam,
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    pub fn to_csv(&self) -> String {
        let mut out = format!("value,{}\n", MetricReport::CSV_HEADER);
        for r in &self.rows {
            out.push_str(&format!("{},{}\n", r.value, r.mean.csv_row()));
        }
        out
    }
}

/// Full STAR with one hyperparameter set to each value in turn.
pub fn sweep(cfg: &ExperimentConfig, param: SweepParam, values: &[usize]) -> Result<SweepReport> {
    let per_seed = cfg
        .seeds
        .iter()
        .map(|&s| sweep_seed(cfg, param, values, s))
        .collect::<Result<Vec<_>>>()?;
    assemble_sweep(cfg, param, values, per_seed)
}

fn swept_configs(
    cfg: &ExperimentConfig,
    param: SweepParam,
    values: &[usize],
) -> Result<Vec<ExperimentConfig>> {
    cfg.validate()?;
    if values.is_empty() {
        return Err(StarError::Config("sweep needs at least one value".into()));
    }
    values
        .iter()
        .map(|&v| {
            let mut c = cfg.clone();
            param.apply(&mut c, v);
            c.validate().map(|_| c)
        })
        .collect()
}

/// Full-STAR metrics for every swept value on one seed.
pub fn sweep_seed(
    cfg: &ExperimentConfig,
    param: SweepParam,
    values: &[usize],
    seed: u64,
) -> Result<Vec<MetricReport>> {
    let configs = swept_configs(cfg, param, values)?;
    let prep = prepare(cfg, seed)?;
    configs
        .iter()
        .map(|c| run_variant(&prep, c, Variant::Star(ModuleFlags::default())))
        .collect()
}

/// Combine per-seed sweep results (in seed order) into a report.
pub fn assemble_sweep(
    cfg: &ExperimentConfig,
    param: SweepParam,
    values: &[usize],
    per_seed: Vec<Vec<MetricReport>>,
) -> Result<SweepReport> {
    let rows = values
        .iter()
        .enumerate()
        .map(|(i, &value)| {
            let runs: Vec<MetricReport> = per_seed.iter().map(|s| s[i].clone()).collect();
            Ok(SweepRow {
                value,
                mean: mean_report(&runs)?,
                per_seed: runs,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepReport {
        version: VERSION.into(),
        config: cfg.clone(),
        param,
        rows,
    })
}
