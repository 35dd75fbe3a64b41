//! Numeral/state matching: an in-batch InfoNCE loss that pulls each patch's
//! numeral embedding towards its own state embedding, and the per-patch
//! cosine score used at inference.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamId, ParamStore, Unary, Var};
use crate::error::{Result, StarError};
use crate::nn::Mlp;
use crate::tensor::Mat;

/// Row norms are computed as `sqrt(‖x‖² + NORM_GUARD²)`.
pub const NORM_GUARD: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MatchingConfig {
    pub tau: f64,
    /// Layers of the numeral projection; 1 is a plain linear map.
    pub proj_depth: usize,
    pub proj_hidden: usize,
}

impl Default for MatchingConfig {
    fn default() -> Self {
        Self {
            tau: 0.1,
            proj_depth: 2,
            proj_hidden: 64,
        }
    }
}

/// Aligned numeral and state embeddings of `M` patches.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchBatch {
    pub numeral: Mat,
    pub state: Mat,
    pub tau: f64,
}

impl MatchBatch {
    pub fn new(numeral: Mat, state: Mat, tau: f64) -> Result<Self> {
        if numeral.shape() != state.shape() || numeral.rows == 0 {
            return Err(StarError::Shape(format!(
                "numeral {:?} and state {:?} embeddings must be non-empty and aligned",
                numeral.shape(),
                state.shape()
            )));
        }
        if !(tau > 0.0) {
            return Err(StarError::Config(format!(
                "temperature must be positive, got {tau}"
            )));
        }
        Ok(Self {
            numeral,
            state,
            tau,
        })
    }
}

/// Rows scaled to unit length (up to the norm guard).
pub fn normalize_rows(g: &mut Graph, x: Var) -> Var {
    let sq = g.square(x);
    let ss = g.sum_rows(sq);
    let guarded = g.add_scalar(ss, NORM_GUARD * NORM_GUARD);
    let norm = g.unary(guarded, Unary::Sqrt);
    let inv = g.unary(norm, Unary::Recip);
    g.mul_col(x, inv)
}

/// `M × 1` cosine similarity of aligned rows.
pub fn cosine_rows(g: &mut Graph, a: Var, b: Var) -> Var {
    let an = normalize_rows(g, a);
    let bn = normalize_rows(g, b);
    let prod = g.mul(an, bn);
    g.sum_rows(prod)
}

/// `−(1/M) Σ_t log( exp(sim(N_t,S_t)/τ) / Σ_k exp(sim(N_k,S_t)/τ) )`.
pub fn info_nce(g: &mut Graph, numeral: Var, state: Var, tau: f64) -> Var {
    let (m, _) = g.shape(numeral);
    let nn = normalize_rows(g, numeral);
    let sn = normalize_rows(g, state);
    let nt = g.transpose(nn);
    // logits[t, k] = sim(N_k, S_t) / τ
    let sims = g.matmul(sn, nt);
    let logits = g.scale(sims, 1.0 / tau);
    let logp = g.log_softmax_rows(logits);
    let diag = g.row_select(logp, Rc::new((0..m).collect()));
    let mean = g.mean_all(diag);
    g.scale(mean, -1.0)
}

pub fn match_loss(batch: &MatchBatch) -> f64 {
    let mut g = Graph::inference();
    let n = g.constant(batch.numeral.clone());
    let s = g.constant(batch.state.clone());
    let loss = info_nce(&mut g, n, s, batch.tau);
    g.value(loss).item()
}

/// Cosine similarity of each aligned row pair.
pub fn match_score(numeral: &Mat, state: &Mat) -> Result<Vec<f64>> {
    if numeral.shape() != state.shape() {
        return Err(StarError::Shape(format!(
            "{:?} vs {:?}",
            numeral.shape(),
            state.shape()
        )));
    }
    let mut g = Graph::inference();
    let n = g.constant(numeral.clone());
    let s = g.constant(state.clone());
    let c = cosine_rows(&mut g, n, s);
    Ok(g.value(c).data.clone())
}

/// Trainable map from backbone patch embeddings into the state space.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Matcher {
    pub config: MatchingConfig,
    pub projection: Mlp,
}

impl Matcher {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        config: MatchingConfig,
        d_backbone: usize,
        d_state: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if !(config.tau > 0.0) {
            return Err(StarError::Config(format!(
                "temperature must be positive, got {}",
                config.tau
            )));
        }
        if config.proj_depth == 0 {
            return Err(StarError::Config(
                "numeral projection needs at least one layer".into(),
            ));
        }
        let projection = Mlp::new(
            store,
            "matching.projection",
            d_backbone,
            config.proj_hidden,
            d_state,
            config.proj_depth,
            1.0,
            rng,
        );
        Ok(Self { config, projection })
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.projection.params()
    }

    pub fn project(&self, g: &mut Graph, store: &ParamStore, pooled: Var) -> Var {
        self.projection.forward(g, store, pooled)
    }
}
