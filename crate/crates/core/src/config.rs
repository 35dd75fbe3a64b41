//! Experiment configuration: one JSON document, every field defaulted,
//! unknown keys rejected, overridable by dotted paths.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::backbone::BackboneConfig;
use crate::dataset::SyntheticConfig;
use crate::error::{Result, StarError};
use crate::optim::{OptimizerConfig, OptimizerKind};
use crate::pipeline::{FinetuneConfig, ModelConfig};

/// Where the train/test series come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    /// Generated per seed; the config's own `seed` is replaced by the run seed.
    Synthetic(SyntheticConfig),
    Files {
        train: PathBuf,
        train_schema: PathBuf,
        test: PathBuf,
        test_schema: PathBuf,
    },
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig::Synthetic(SyntheticConfig::benchmark(0))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Buffer for the reported R-AUC; `None` uses the patch length.
    pub buffer_l: Option<usize>,
    /// Largest buffer for VUS; `None` uses the patch length.
    pub max_buffer_l: Option<usize>,
}

/// Defaults:
///
/// * `dataset`: the synthetic benchmark (3 state, 2 numerical variables,
///   8000/4000 points, 5% anomalies).
/// * `backbone`: patch 16, window 128, width 32, two mixer blocks, 1500
///   Adam pretraining steps.
/// * `model`: memory N = 25, K = 7, d = 16, ε = 0.05, τ = 0.1, rank divisor 2,
///   two-layer numeral projection.
/// * `train`: λ1 = 0.01, λ2 = 0.1, 1000 Adam steps at lr 3e-3 over 8 windows.
/// * `eval`: buffers equal to the patch length.
/// * `seeds`: 0..5.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub backbone: BackboneConfig,
    pub model: ModelConfig,
    pub train: FinetuneConfig,
    pub eval: EvalConfig,
    pub seeds: Vec<u64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetConfig::default(),
            backbone: BackboneConfig::default(),
            model: ModelConfig::default(),
            train: FinetuneConfig {
                steps: 1000,
                optimizer: OptimizerConfig {
                    kind: OptimizerKind::Adam,
                    lr: 3e-3,
                    ..Default::default()
                },
                ..Default::default()
            },
            eval: EvalConfig::default(),
            seeds: (0..5).collect(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| StarError::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.model.state.validate()?;
        self.train.validate()?;
        if let DatasetConfig::Synthetic(s) = &self.dataset {
            s.validate()?;
            if s.patch_len != self.backbone.patch_len {
                return Err(StarError::Config(format!(
                    "synthetic patch length {} differs from backbone patch length {}",
                    s.patch_len, self.backbone.patch_len
                )));
            }
        }
        if self.seeds.is_empty() {
            return Err(StarError::Config("seed list is empty".into()));
        }
        Ok(())
    }

    /// Apply `key.path=value` overrides. Values are parsed as JSON when
    /// possible and taken as strings otherwise.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut doc = serde_json::to_value(self)?;
        for raw in overrides {
            let raw = raw.as_ref();
            let (key, value) = raw.split_once('=').ok_or_else(|| {
                StarError::Config(format!("override '{raw}' is not of the form key=value"))
            })?;
            let value =
                serde_json::from_str(value).unwrap_or_else(|_| Value::String(value.to_string()));
            set_path(&mut doc, key, value)?;
        }
        let cfg: Self = serde_json::from_value(doc)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn buffer_l(&self) -> usize {
        self.eval.buffer_l.unwrap_or(self.backbone.patch_len)
    }

    pub fn max_buffer_l(&self) -> usize {
        self.eval.max_buffer_l.unwrap_or(self.backbone.patch_len)
    }
}

fn set_path(doc: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut cur = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        cur = match cur {
            Value::Object(map) => {
                if !map.contains_key(*part) {
                    return Err(StarError::Config(format!("unknown config key '{key}'")));
                }
                let slot = map.get_mut(*part).expect("checked");
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            Value::Array(items) => {
                let idx: usize = part.parse().map_err(|_| {
                    StarError::Config(format!("'{part}' in '{key}' is not an array index"))
                })?;
                let len = items.len();
                let slot = items.get_mut(idx).ok_or_else(|| {
                    StarError::Config(format!(
                        "index {idx} out of range for '{key}' (length {len})"
                    ))
                })?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            _ => return Err(StarError::Config(format!("'{key}' descends into a scalar"))),
        };
    }
    Err(StarError::Config("empty override key".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_validate() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let text = serde_json::to_string(&cfg).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        let sparse: ExperimentConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(sparse, cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"bogus": 1}"#).is_err());
        assert!(
            serde_json::from_str::<ExperimentConfig>(r#"{"model": {"state": {"k": 3}}}"#).is_err()
        );
        let cfg = ExperimentConfig::default();
        assert!(matches!(
            cfg.with_overrides(&["model.state.kk=3"]),
            Err(StarError::Config(_))
        ));
    }

    #[test]
    fn dotted_overrides() {
        let cfg = ExperimentConfig::default()
            .with_overrides(&[
                "model.state.top_k=3",
                "train.mode=lora",
                "seeds=[7]",
                "dataset.t_test=2000",
            ])
            .unwrap();
        assert_eq!(cfg.model.state.top_k, 3);
        assert_eq!(cfg.train.mode, crate::pipeline::Mode::Lora);
        assert_eq!(cfg.seeds, vec![7]);
        match cfg.dataset {
            DatasetConfig::Synthetic(s) => assert_eq!(s.t_test, 2000),
            _ => panic!("dataset source changed"),
        }
        assert!(ExperimentConfig::default()
            .with_overrides(&["model.state.top_k"])
            .is_err());
        assert!(ExperimentConfig::default()
            .with_overrides(&["model.state.top_k=99"])
            .is_err());
    }
}
