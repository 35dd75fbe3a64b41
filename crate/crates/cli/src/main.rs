//! `star`: data generation, pretraining, fine-tuning, scoring, evaluation
//! and the ablation/sweep runners behind one binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::Value;

use star_core::config::ExperimentConfig;
use star_core::dataset::write_csv;
use star_core::experiment::{
    ablation_variants, artifact_meta, assemble, assemble_sweep, load_data, prepare, run_seed,
    sweep_seed, ExperimentReport, SweepParam, SweepReport,
};
use star_core::metrics::evaluate;
use star_core::pipeline::{
    finetune, load_checkpoint, read_scores_csv, save_checkpoint, write_scores_csv, FinetuneConfig,
    Mode,
};

#[derive(Parser)]
#[command(
    name = "star",
    version,
    about = "State-aware adapters for time-series anomaly detection"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (JSON). Omitted keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set model.state.top_k=3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Run each seed of a seed list in its own process.
    #[arg(long, global = true)]
    parallel: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write train/test CSVs and the schema for one seed.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Pretrain the backbone and write it as a frozen checkpoint.
    Pretrain {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fine-tune on top of a pretrained backbone checkpoint.
    Finetune {
        #[arg(long)]
        backbone: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Defaults to `train.mode` of the config.
        #[arg(long)]
        mode: Option<Mode>,
    },
    /// Score the test split with a checkpoint.
    Score {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Compute metrics from a score CSV with labels.
    Eval {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the six-row module grid over the seed list.
    Ablate {
        #[arg(long)]
        out: PathBuf,
    },
    /// Vary one hyperparameter of full STAR over the seed list.
    Sweep {
        /// k, n, rank_divisor or hidden.
        #[arg(long)]
        param: SweepParam,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Err(e) = configure_threads().and_then(|_| run(&cli)) {
        eprintln!("error: {e:#}");
        return ExitCode::FAILURE;
    }
    ExitCode::SUCCESS
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("STAR_NUM_THREADS") {
        let n: usize = v
            .parse()
            .with_context(|| format!("STAR_NUM_THREADS='{v}' is not a thread count"))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()?;
    }
    Ok(())
}

fn resolve_config(common: &Common) -> Result<ExperimentConfig> {
    let base = match &common.config {
        Some(p) => ExperimentConfig::from_path(p)
            .with_context(|| format!("loading config {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    Ok(base.with_overrides(&common.overrides)?)
}

fn pick_seed(cfg: &ExperimentConfig, seed: Option<u64>) -> u64 {
    seed.unwrap_or(cfg.seeds[0])
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn existing_checkpoint(path: &Path) -> Result<()> {
    if !path.is_file() {
        bail!("checkpoint not found: {}", path.display());
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = resolve_config(&cli.common)?;
    let meta = artifact_meta(&cfg);
    match &cli.command {
        Cmd::GenData { out, seed } => {
            let seed = pick_seed(&cfg, *seed);
            let (train, test) = load_data(&cfg, seed)?;
            fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
            let meta = with_seed(&meta, seed);
            write_csv(
                &train,
                &out.join("train.csv"),
                &out.join("train.schema.json"),
                Some(&meta),
            )?;
            write_csv(
                &test,
                &out.join("test.csv"),
                &out.join("test.schema.json"),
                Some(&meta),
            )?;
        }
        Cmd::Pretrain { out, seed } => {
            let seed = pick_seed(&cfg, *seed);
            let prep = prepare(&cfg, seed)?;
            let frozen = FinetuneConfig {
                mode: Mode::Frozen,
                steps: 0,
                seed,
                ..cfg.train.clone()
            };
            let (mut ckpt, _) = finetune(
                &prep.backbone,
                &prep.store,
                &prep.train,
                &cfg.model,
                &frozen,
            )?;
            ckpt.meta = with_seed(&meta, seed);
            save_checkpoint(&ckpt, out)?;
        }
        Cmd::Finetune {
            backbone,
            out,
            seed,
            mode,
        } => {
            existing_checkpoint(backbone)?;
            let seed = pick_seed(&cfg, *seed);
            let base = load_checkpoint(backbone, None)?;
            let (train, _) = load_data(&cfg, seed)?;
            let tc = FinetuneConfig {
                mode: mode.unwrap_or(cfg.train.mode),
                seed,
                ..cfg.train.clone()
            };
            let (mut ckpt, hist) =
                finetune(&base.model.backbone, &base.store, &train, &cfg.model, &tc)?;
            if let Some(last) = hist.total.last() {
                log::info!("final training loss {last:.6}");
            }
            ckpt.meta = with_seed(&meta, seed);
            save_checkpoint(&ckpt, out)?;
        }
        Cmd::Score {
            checkpoint,
            out,
            seed,
        } => {
            existing_checkpoint(checkpoint)?;
            let seed = pick_seed(&cfg, *seed);
            let ckpt = load_checkpoint(checkpoint, None)?;
            let (_, test) = load_data(&cfg, seed)?;
            let scores = ckpt.score(&test)?;
            let meta =
                serde_json::json!({ "run": with_seed(&meta, seed), "checkpoint": ckpt.meta });
            write_scores_csv(out, &scores, test.labels(), Some(&meta))?;
        }
        Cmd::Eval { scores, out } => {
            let (total, labels) = read_scores_csv(scores)?;
            let labels =
                labels.with_context(|| format!("{} has no label column", scores.display()))?;
            let report = evaluate(&total, &labels, cfg.buffer_l(), cfg.max_buffer_l())?;
            let mut doc = meta.clone();
            doc["metrics"] = serde_json::to_value(&report)?;
            write_json(out, &doc)?;
        }
        Cmd::Ablate { out } => {
            let variants = ablation_variants();
            let per_seed = if cli.common.parallel {
                fan_out(&cli.common, &cfg, out, &["ablate"], |dir| {
                    let r: ExperimentReport = read_report(&dir.join("ablation.json"))?;
                    Ok(r.results
                        .into_iter()
                        .map(|v| v.per_seed[0].clone())
                        .collect())
                })?
            } else {
                cfg.seeds
                    .iter()
                    .map(|&s| run_seed(&cfg, s, &variants))
                    .collect::<star_core::Result<_>>()?
            };
            let report = assemble(&cfg, &variants, per_seed)?;
            fs::create_dir_all(out)?;
            fs::write(out.join("ablation.json"), report.to_json()? + "\n")?;
            fs::write(out.join("ablation.csv"), report.to_csv())?;
        }
        Cmd::Sweep { param, values, out } => {
            let per_seed = if cli.common.parallel {
                let list = values
                    .iter()
                    .map(usize::to_string)
                    .collect::<Vec<_>>()
                    .join(",");
                let name = param_name(*param);
                fan_out(
                    &cli.common,
                    &cfg,
                    out,
                    &["sweep", "--param", name, "--values", &list],
                    |dir| {
                        let r: SweepReport = read_report(&dir.join("sweep.json"))?;
                        Ok(r.rows
                            .into_iter()
                            .map(|row| row.per_seed[0].clone())
                            .collect())
                    },
                )?
            } else {
                cfg.seeds
                    .iter()
                    .map(|&s| sweep_seed(&cfg, *param, values, s))
                    .collect::<star_core::Result<_>>()?
            };
            let report = assemble_sweep(&cfg, *param, values, per_seed)?;
            fs::create_dir_all(out)?;
            write_json(&out.join("sweep.json"), &report)?;
            fs::write(out.join("sweep.csv"), report.to_csv())?;
        }
    }
    Ok(())
}

fn with_seed(meta: &Value, seed: u64) -> Value {
    let mut m = meta.clone();
    m["seed"] = seed.into();
    m
}

fn param_name(p: SweepParam) -> &'static str {
    match p {
        SweepParam::TopK => "k",
        SweepParam::MemorySize => "n",
        SweepParam::RankDivisor => "rank_divisor",
        SweepParam::Hidden => "hidden",
    }
}

fn read_report<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_str(&text)?)
}

/// Rerun this binary once per seed (same config and overrides, seed list
/// narrowed to that seed), wait for all of them and collect each seed's
/// metrics with `collect`.
fn fan_out(
    common: &Common,
    cfg: &ExperimentConfig,
    out: &Path,
    args: &[&str],
    collect: impl Fn(&Path) -> Result<Vec<star_core::metrics::MetricReport>>,
) -> Result<Vec<Vec<star_core::metrics::MetricReport>>> {
    let exe = std::env::current_exe()?;
    let mut children = Vec::new();
    for &seed in &cfg.seeds {
        let dir = out.join(format!("seed-{seed}"));
        let mut cmd = Command::new(&exe);
        if let Some(c) = &common.config {
            cmd.arg("--config").arg(c);
        }
        for o in &common.overrides {
            cmd.arg("--set").arg(o);
        }
        cmd.arg("--set")
            .arg(format!("seeds=[{seed}]"))
            .args(args)
            .arg("--out")
            .arg(&dir);
        children.push((seed, dir, cmd.spawn().context("spawning seed worker")?));
    }
    let mut results = Vec::new();
    let mut failed = Vec::new();
    for (seed, dir, mut child) in children {
        if child.wait()?.success() {
            results.push(collect(&dir)?);
        } else {
            failed.push(seed);
        }
    }
    if !failed.is_empty() {
        bail!("seed workers failed: {failed:?}");
    }
    Ok(results)
}
