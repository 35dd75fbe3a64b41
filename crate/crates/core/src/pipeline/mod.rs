//! Model assembly, fine-tuning, fused scoring and checkpoints.

mod checkpoint;
mod score;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, FORMAT_VERSION};
pub use score::{fuse, interpolate_patch_scores, read_scores_csv, write_scores_csv, AnomalyScores};

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamId, ParamStore, Var};
use crate::backbone::{Backbone, BackboneVars, SiteAdapter};
use crate::cond_adapter::{AdapterConfig, ConditionalAdapter, LoraAdapter};
use crate::dataset::{SeriesDataset, WindowBatch};
use crate::error::{Result, StarError};
use crate::matching::{cosine_rows, info_nce, Matcher, MatchingConfig};
use crate::optim::{Optimizer, OptimizerConfig};
use crate::state_encoder::{LinearStateEmbedding, StateEncoder, StateEncoderConfig};
use crate::temporal_encoder::{PatchGeometry, TemporalEncoder, TemporalEncoderConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Train the state modules, adapters and matching projection.
    Star,
    /// Train LoRA factors on the backbone sites.
    Lora,
    /// Train every backbone parameter.
    Full,
    /// Train nothing.
    Frozen,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Mode::Star => "star",
            Mode::Lora => "lora",
            Mode::Full => "full",
            Mode::Frozen => "frozen",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for Mode {
    type Err = StarError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "star" => Ok(Mode::Star),
            "lora" => Ok(Mode::Lora),
            "full" => Ok(Mode::Full),
            "frozen" => Ok(Mode::Frozen),
            _ => Err(StarError::Config(format!(
                "unknown mode '{s}' (star, lora, full, frozen)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchSign {
    /// Patch score `−cos`, so mismatched patches are amplified.
    Negated,
    /// Patch score `cos`.
    Plain,
}

/// Which STAR modules are active in `star` mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModuleFlags {
    pub state_encoder: bool,
    pub adapter: bool,
    pub matching: bool,
}

impl Default for ModuleFlags {
    fn default() -> Self {
        Self {
            state_encoder: true,
            adapter: true,
            matching: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub state: StateEncoderConfig,
    pub temporal: TemporalEncoderConfig,
    pub adapter: AdapterConfig,
    pub matching: MatchingConfig,
    pub modules: ModuleFlags,
    pub match_sign: MatchSign,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            state: Default::default(),
            temporal: Default::default(),
            adapter: Default::default(),
            matching: Default::default(),
            modules: Default::default(),
            match_sign: MatchSign::Negated,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub steps: usize,
    pub batch_windows: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    pub mode: Mode,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            lambda1: 0.01,
            lambda2: 0.1,
            steps: 500,
            batch_windows: 8,
            optimizer: OptimizerConfig::default(),
            seed: 0,
            mode: Mode::Star,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 >= 0.0) || !(self.lambda2 >= 0.0) {
            return Err(StarError::Config(
                "loss weights must be non-negative".into(),
            ));
        }
        if self.batch_windows == 0 {
            return Err(StarError::Config("batch_windows must be at least 1".into()));
        }
        if !(self.optimizer.lr > 0.0) {
            return Err(StarError::Config("learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// How point-wise state embeddings are produced.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub enum StateEmbedder {
    Memory(StateEncoder),
    Linear(LinearStateEmbedding),
}

impl StateEmbedder {
    fn params(&self) -> Vec<ParamId> {
        match self {
            StateEmbedder::Memory(e) => e.params(),
            StateEmbedder::Linear(e) => e.params(),
        }
    }
}

/// The state pathway shared by the adapter and the matching module.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StatePath {
    pub embedder: StateEmbedder,
    pub temporal: TemporalEncoder,
}

/// Everything but the parameter values. Parameter ids index a [`ParamStore`].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StarModel {
    pub mode: Mode,
    pub config: ModelConfig,
    pub n_state: usize,
    pub backbone: Backbone,
    pub state: Option<StatePath>,
    pub adapter: Option<ConditionalAdapter>,
    pub lora: Option<LoraAdapter>,
    pub matcher: Option<Matcher>,
}

/// Scalar loss nodes of one training step.
pub struct LossParts {
    pub total: Var,
    pub rec: Var,
    pub balance: Option<Var>,
    pub matching: Option<Var>,
}

/// Per-batch graph outputs used by training and scoring.
pub struct ForwardVars {
    pub backbone: BackboneVars,
    pub s_patch: Option<Var>,
    pub balance: Option<Var>,
    /// Projected numeral embeddings, rows `(window, patch)`.
    pub numeral: Option<Var>,
}

impl StarModel {
    /// Attach the modules required by `mode` to a pretrained backbone whose
    /// weights are already in `store`.
    pub fn build<R: Rng + ?Sized>(
        store: &mut ParamStore,
        backbone: Backbone,
        config: ModelConfig,
        mode: Mode,
        n_state: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut model = StarModel {
            mode,
            config: config.clone(),
            n_state,
            backbone,
            state: None,
            adapter: None,
            lora: None,
            matcher: None,
        };
        match mode {
            Mode::Star => {
                let flags = config.modules;
                if n_state == 0 {
                    return Err(StarError::Config(
                        "star mode needs at least one state column".into(),
                    ));
                }
                if flags.adapter || flags.matching {
                    let d = config.state.dim;
                    let embedder = if flags.state_encoder {
                        StateEmbedder::Memory(StateEncoder::new(store, config.state.clone(), rng)?)
                    } else {
                        config.state.validate()?;
                        StateEmbedder::Linear(LinearStateEmbedding::new(store, d, rng))
                    };
                    let bc = &model.backbone.config;
                    let temporal = TemporalEncoder::new(
                        store,
                        config.temporal.clone(),
                        d,
                        bc.patch_len,
                        bc.n_patches(),
                        rng,
                    )?;
                    model.state = Some(StatePath { embedder, temporal });
                }
                if flags.adapter {
                    let sites = model.backbone.sites();
                    model.adapter = Some(ConditionalAdapter::new(
                        store,
                        config.adapter.clone(),
                        config.state.dim,
                        &sites,
                        rng,
                    )?);
                }
                if flags.matching {
                    let db = model.backbone.config.d_model;
                    model.matcher = Some(Matcher::new(
                        store,
                        config.matching.clone(),
                        db,
                        config.state.dim,
                        rng,
                    )?);
                }
            }
            Mode::Lora => {
                let sites = model.backbone.sites();
                model.lora = Some(LoraAdapter::new(store, &config.adapter, &sites, rng)?);
            }
            Mode::Full | Mode::Frozen => {}
        }
        Ok(model)
    }

    /// Parameters updated by fine-tuning in this model's mode.
    pub fn trainable_params(&self) -> Vec<ParamId> {
        match self.mode {
            Mode::Star => {
                let mut out = Vec::new();
                if let Some(sp) = &self.state {
                    out.extend(sp.embedder.params());
                    out.extend(sp.temporal.params());
                }
                if let Some(a) = &self.adapter {
                    out.extend(a.params());
                }
                if let Some(m) = &self.matcher {
                    out.extend(m.params());
                }
                out
            }
            Mode::Lora => self
                .lora
                .as_ref()
                .map(LoraAdapter::params)
                .unwrap_or_default(),
            Mode::Full => self.backbone.params(),
            Mode::Frozen => Vec::new(),
        }
    }

    pub fn trainable_mask(&self, store: &ParamStore) -> Rc<Vec<bool>> {
        let mut mask = vec![false; store.len()];
        for id in self.trainable_params() {
            mask[id.0] = true;
        }
        Rc::new(mask)
    }

    fn check_batch(&self, batch: &WindowBatch) -> Result<()> {
        let bc = &self.backbone.config;
        if batch.window_len != bc.window_len || batch.patch_len != bc.patch_len {
            return Err(StarError::Shape(format!(
                "batch windows are {}/{} (window/patch), model expects {}/{}",
                batch.window_len, batch.patch_len, bc.window_len, bc.patch_len
            )));
        }
        if batch.n_numeric == 0 {
            return Err(StarError::Input(
                "no numerical variables to reconstruct".into(),
            ));
        }
        if self.state.is_some() && batch.n_state != self.n_state {
            return Err(StarError::Shape(format!(
                "model has {} state variables, data has {}",
                self.n_state, batch.n_state
            )));
        }
        Ok(())
    }

    /// Forward pass over a window batch. The numeral embeddings come from a
    /// separate pass through the unadapted backbone.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        batch: &WindowBatch,
    ) -> Result<ForwardVars> {
        self.check_batch(batch)?;
        let (nw, cn) = (batch.n_windows(), batch.n_numeric);
        let patches = self.backbone.patchify(&batch.numeric, nw, cn);

        let mut s_patch = None;
        let mut balance = None;
        if let Some(sp) = &self.state {
            let point = match &sp.embedder {
                StateEmbedder::Memory(enc) => {
                    let out = enc.encode(g, store, &batch.state_ids, batch.n_state);
                    balance = Some(out.balance);
                    out.point
                }
                StateEmbedder::Linear(lin) => lin.encode(g, store, &batch.state_ids),
            };
            let geo = PatchGeometry {
                n_windows: nw,
                window_len: batch.window_len,
                patch_len: batch.patch_len,
                n_state: batch.n_state,
            };
            s_patch = Some(sp.temporal.forward(g, store, point, geo).s_patch);
        }

        let numeral = match &self.matcher {
            Some(matcher) => {
                let x = g.constant(patches.clone());
                let plain = self.backbone.forward(g, store, x, nw, cn, None);
                let pooled = self.backbone.pooled_hidden(g, &plain);
                Some(matcher.project(g, store, pooled))
            }
            None => None,
        };

        let x = g.constant(patches);
        let backbone = match (&self.adapter, s_patch, &self.lora) {
            (Some(adapter), Some(sp), _) => {
                let generated = adapter.generate_graph(g, store, sp);
                let bound = adapter.bind(generated);
                self.backbone
                    .forward(g, store, x, nw, cn, Some(&bound as &dyn SiteAdapter))
            }
            (_, _, Some(lora)) => {
                self.backbone
                    .forward(g, store, x, nw, cn, Some(lora as &dyn SiteAdapter))
            }
            _ => self.backbone.forward(g, store, x, nw, cn, None),
        };
        Ok(ForwardVars {
            backbone,
            s_patch,
            balance,
            numeral,
        })
    }

    /// `L_total = L_rec + λ1·L_bal + λ2·L_match` (absent terms are skipped).
    pub fn loss(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        batch: &WindowBatch,
        lambda1: f64,
        lambda2: f64,
    ) -> Result<LossParts> {
        let fv = self.forward(g, store, batch)?;
        let target = g.constant(self.backbone.patchify(
            &batch.numeric,
            batch.n_windows(),
            batch.n_numeric,
        ));
        let diff = g.sub(fv.backbone.recon, target);
        let sq = g.square(diff);
        let rec = g.mean_all(sq);
        let mut total = rec;
        if let Some(b) = fv.balance {
            let w = g.scale(b, lambda1);
            total = g.add(total, w);
        }
        let matching = match (fv.numeral, fv.s_patch, &self.matcher) {
            (Some(n), Some(s), Some(m)) => {
                let l = info_nce(g, n, s, m.config.tau);
                let w = g.scale(l, lambda2);
                total = g.add(total, w);
                Some(l)
            }
            _ => None,
        };
        Ok(LossParts {
            total,
            rec,
            balance: fv.balance,
            matching,
        })
    }

    /// Per-patch cosine between numeral and state embeddings, rows `(window, patch)`.
    pub fn patch_cosines(&self, g: &mut Graph, fv: &ForwardVars) -> Option<Var> {
        match (fv.numeral, fv.s_patch) {
            (Some(n), Some(s)) => Some(cosine_rows(g, n, s)),
            _ => None,
        }
    }
}

/// Losses recorded during fine-tuning.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub total: Vec<f64>,
    pub rec: Vec<f64>,
    pub balance: Vec<f64>,
    pub matching: Vec<f64>,
}

/// Fine-tune the modules selected by `cfg.mode` on top of a pretrained
/// backbone. `store` must hold the backbone weights; it is cloned, so the
/// caller's copy stays untouched.
pub fn finetune(
    backbone: &Backbone,
    backbone_store: &ParamStore,
    train: &SeriesDataset,
    model_config: &ModelConfig,
    cfg: &FinetuneConfig,
) -> Result<(Checkpoint, TrainHistory)> {
    cfg.validate()?;
    let mut store = backbone_store.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let model = StarModel::build(
        &mut store,
        backbone.clone(),
        model_config.clone(),
        cfg.mode,
        train.n_state(),
        &mut rng,
    )?;
    let checksum = backbone.checksum(&store);
    let tw = backbone.config.window_len;
    if train.len() < tw {
        return Err(StarError::SeriesTooShort {
            len: train.len(),
            needed: tw,
        });
    }
    let params = model.trainable_params();
    let mask = model.trainable_mask(&store);
    let mut opt = Optimizer::new(cfg.optimizer.clone(), params.clone());
    let mut history = TrainHistory::default();
    let steps = if params.is_empty() { 0 } else { cfg.steps };
    let max_start = train.len() - tw;
    for step in 0..steps {
        let offsets: Vec<usize> = (0..cfg.batch_windows)
            .map(|_| rng.random_range(0..=max_start))
            .collect();
        let batch = WindowBatch::gather(train, &offsets, tw, backbone.config.patch_len)?;
        let mut g = Graph::with_trainable(mask.clone());
        let parts = model.loss(&mut g, &store, &batch, cfg.lambda1, cfg.lambda2)?;
        let total = g.value(parts.total).item();
        if !total.is_finite() {
            return Err(StarError::Numeric(format!(
                "loss became {total} at step {step} (rec {}, balance {:?}, matching {:?})",
                g.value(parts.rec).item(),
                parts.balance.map(|v| g.value(v).item()),
                parts.matching.map(|v| g.value(v).item()),
            )));
        }
        history.total.push(total);
        history.rec.push(g.value(parts.rec).item());
        if let Some(b) = parts.balance {
            history.balance.push(g.value(b).item());
        }
        if let Some(m) = parts.matching {
            history.matching.push(g.value(m).item());
        }
        let grads = g.backward(parts.total);
        opt.step(&mut store, &grads);
        if step % 100 == 0 {
            log::debug!("step {step}: total {total:.5}");
        }
    }
    if cfg.mode != Mode::Full && backbone.checksum(&store) != checksum {
        return Err(StarError::Numeric(
            "frozen backbone weights changed during fine-tuning".into(),
        ));
    }
    Ok((
        Checkpoint {
            model,
            store,
            seed: cfg.seed,
            finetune: cfg.clone(),
            meta: serde_json::Value::Null,
        },
        history,
    ))
}
