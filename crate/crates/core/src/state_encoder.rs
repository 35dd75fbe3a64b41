//! Identity-guided state encoding.
//!
//! Every (state variable, state value) pair is described by two sinusoidal
//! identity codes. A router perceptron scores the `N` rows of a learnable
//! state memory from the concatenated codes, a soft top-K mask keeps about
//! `K` of them, and the point-wise state embedding is the resulting convex
//! combination of memory rows.

use std::collections::HashMap;
use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamId, ParamStore, Var};
use crate::error::{Result, StarError};
use crate::nn::{Linear, Mlp};
use crate::tensor::Mat;

/// Additive guard on the coefficient-of-variation denominators.
const BALANCE_GUARD: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BalanceDenominator {
    /// Each coefficient of variation uses its own mean.
    Corrected,
    /// Both terms divide by the mean selection frequency.
    SharedMean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StateEncoderConfig {
    /// Embedding width `d` (even).
    pub dim: usize,
    /// Memory size `N`.
    pub memory_size: usize,
    /// Soft selection count `K`.
    pub top_k: usize,
    pub epsilon: f64,
    /// Wavelength base of the sinusoidal identity codes.
    pub lambda: f64,
    pub router_hidden: usize,
    pub router_depth: usize,
    pub memory_init_std: f64,
    pub balance_denominator: BalanceDenominator,
}

impl Default for StateEncoderConfig {
    fn default() -> Self {
        Self {
            dim: 16,
            memory_size: 25,
            top_k: 7,
            epsilon: 0.05,
            lambda: 10_000.0,
            router_hidden: 64,
            router_depth: 2,
            memory_init_std: 0.02,
            balance_denominator: BalanceDenominator::Corrected,
        }
    }
}

impl StateEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || !self.dim.is_multiple_of(2) {
            return Err(StarError::Config(format!(
                "state dim must be even and positive, got {}",
                self.dim
            )));
        }
        if self.top_k == 0 || self.top_k > self.memory_size {
            return Err(StarError::Config(format!(
                "top_k must lie in 1..={} (memory size), got {}",
                self.memory_size, self.top_k
            )));
        }
        if !(self.epsilon > 0.0) || !(self.lambda > 0.0) {
            return Err(StarError::Config(
                "epsilon and lambda must be positive".into(),
            ));
        }
        if self.router_depth == 0 {
            return Err(StarError::Config("router depth must be at least 1".into()));
        }
        Ok(())
    }
}

/// Entry `2k` is `sin(index / λ^(2k/d))`, entry `2k+1` the matching cosine.
pub fn sinusoidal_encode(index: usize, dim: usize, lambda: f64) -> Result<Vec<f64>> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(StarError::Shape(format!(
            "sinusoidal dimension must be even and positive, got {dim}"
        )));
    }
    if !(lambda > 0.0) {
        return Err(StarError::Config(format!(
            "lambda must be positive, got {lambda}"
        )));
    }
    let mut out = vec![0.0; dim];
    let x = index as f64;
    for k in 0..dim / 2 {
        let freq = lambda.powf(-(2.0 * k as f64) / dim as f64);
        out[2 * k] = (x * freq).sin();
        out[2 * k + 1] = (x * freq).cos();
    }
    Ok(out)
}

/// Variable-identity and state-identity codes, rows ordered `(t, i)`.
#[derive(Clone, Debug, PartialEq)]
pub struct IdentityEncodings {
    pub var_codes: Mat,
    pub state_codes: Mat,
    pub n_state: usize,
    pub lambda: f64,
}

impl IdentityEncodings {
    pub fn len(&self) -> usize {
        self.var_codes.rows / self.n_state.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.var_codes.rows == 0
    }
}

/// Build identity codes for a row-major `T × C_s` grid of state ids.
pub fn build_identities(
    state_ids: &[i64],
    n_state: usize,
    dim: usize,
    lambda: f64,
) -> Result<IdentityEncodings> {
    if n_state == 0 || !state_ids.len().is_multiple_of(n_state) {
        return Err(StarError::Shape(format!(
            "{} ids do not tile {n_state} state variables",
            state_ids.len()
        )));
    }
    if let Some(bad) = state_ids.iter().find(|&&v| v < 0) {
        return Err(StarError::Input(format!("negative state id {bad}")));
    }
    let rows = state_ids.len();
    let mut var_codes = Mat::zeros(rows, dim);
    let mut state_codes = Mat::zeros(rows, dim);
    let var_table: Vec<Vec<f64>> = (0..n_state)
        .map(|i| sinusoidal_encode(i, dim, lambda))
        .collect::<Result<_>>()?;
    for (r, &id) in state_ids.iter().enumerate() {
        var_codes
            .row_mut(r)
            .copy_from_slice(&var_table[r % n_state]);
        state_codes
            .row_mut(r)
            .copy_from_slice(&sinusoidal_encode(id as usize, dim, lambda)?);
    }
    Ok(IdentityEncodings {
        var_codes,
        state_codes,
        n_state,
        lambda,
    })
}

/// Plain-value routing result; rows are `(t, i)` pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct RouterOutput {
    /// Routing logits `W_s`, `rows × N`.
    pub logits: Mat,
    /// K-th largest logit per row, `rows × 1`.
    pub theta: Mat,
    /// Soft-masked routing weights, `rows × N`.
    pub weights: Mat,
    pub epsilon: f64,
    pub top_k: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BalanceStats {
    pub e_sel: Vec<f64>,
    pub e_imp: Vec<f64>,
    pub loss: f64,
}

/// Graph handles produced by [`soft_topk`].
pub struct SoftTopK {
    pub theta: Var,
    /// `sigmoid((W_s − θ)/ε)`
    pub selection: Var,
    pub weights: Var,
}

/// `W_mask = softmax(W_s + log σ((W_s − θ)/ε))` with `θ` the K-th largest
/// logit of each row.
pub fn soft_topk(g: &mut Graph, logits: Var, top_k: usize, epsilon: f64) -> SoftTopK {
    let theta = g.kth_largest_rows(logits, top_k);
    let neg_theta = g.scale(theta, -1.0);
    let centered = g.add_col(logits, neg_theta);
    let z = g.scale(centered, 1.0 / epsilon);
    let log_gate = g.log_sigmoid(z);
    let selection = g.sigmoid(z);
    let masked = g.add(logits, log_gate);
    let weights = g.softmax_rows(masked);
    SoftTopK {
        theta,
        selection,
        weights,
    }
}

/// Plain-value soft top-K on a logit matrix; returns `(θ, W_mask)`.
pub fn soft_topk_values(logits: &Mat, top_k: usize, epsilon: f64) -> Result<(Mat, Mat)> {
    if top_k == 0 || top_k > logits.cols {
        return Err(StarError::Config(format!(
            "K={top_k} must lie in 1..={}",
            logits.cols
        )));
    }
    let mut g = Graph::inference();
    let l = g.constant(logits.clone());
    let out = soft_topk(&mut g, l, top_k, epsilon);
    Ok((g.value(out.theta).clone(), g.value(out.weights).clone()))
}

/// Coefficient-of-variation balance loss. `row_weights` is a `1 × rows`
/// constant giving each routed row's share of the average (sums to 1).
/// Returns `(E_sel, E_imp, L_bal)`.
pub fn balance_loss(
    g: &mut Graph,
    selection: Var,
    weights: Var,
    row_weights: Var,
    denominator: BalanceDenominator,
) -> (Var, Var, Var) {
    let e_sel = g.matmul(row_weights, selection);
    let e_imp = g.matmul(row_weights, weights);
    let (var_sel, avg_sel) = mean_and_variance(g, e_sel);
    let (var_imp, avg_imp) = mean_and_variance(g, e_imp);
    let sel_term = cv_term(g, var_sel, avg_sel);
    let imp_denominator = match denominator {
        BalanceDenominator::Corrected => avg_imp,
        BalanceDenominator::SharedMean => avg_sel,
    };
    let imp_term = cv_term(g, var_imp, imp_denominator);
    let loss = g.add(sel_term, imp_term);
    (e_sel, e_imp, loss)
}

/// Population variance and mean of a `1 × N` row, both `1 × 1`.
fn mean_and_variance(g: &mut Graph, row: Var) -> (Var, Var) {
    let mean = g.mean_all(row);
    let neg = g.scale(mean, -1.0);
    let centered = g.add_col(row, neg);
    let sq = g.square(centered);
    (g.mean_all(sq), mean)
}

fn cv_term(g: &mut Graph, variance: Var, mean: Var) -> Var {
    let guarded = g.add_scalar(mean, BALANCE_GUARD);
    let inv = g.unary(guarded, crate::autograd::Unary::Recip);
    let ratio = g.mul(variance, inv);
    g.square(ratio)
}

/// Plain-value balance statistics for a router output (uniform row weights).
pub fn load_balance_loss(router: &RouterOutput, denominator: BalanceDenominator) -> BalanceStats {
    let rows = router.logits.rows;
    let mut g = Graph::inference();
    let logits = g.constant(router.logits.clone());
    let theta = g.constant(router.theta.clone());
    let neg_theta = g.scale(theta, -1.0);
    let centered = g.add_col(logits, neg_theta);
    let z = g.scale(centered, 1.0 / router.epsilon);
    let selection = g.sigmoid(z);
    let weights = g.constant(router.weights.clone());
    let rw = g.constant(Mat::filled(1, rows, 1.0 / rows as f64));
    let (e_sel, e_imp, loss) = balance_loss(&mut g, selection, weights, rw, denominator);
    BalanceStats {
        e_sel: g.value(e_sel).data.clone(),
        e_imp: g.value(e_imp).data.clone(),
        loss: g.value(loss).item(),
    }
}

/// Balance loss computed straight from mean selection/importance vectors.
pub fn balance_from_means(e_sel: &[f64], e_imp: &[f64], denominator: BalanceDenominator) -> f64 {
    let stats = |v: &[f64]| {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64;
        (m, var)
    };
    let (m_sel, v_sel) = stats(e_sel);
    let (m_imp, v_imp) = stats(e_imp);
    let d_imp = match denominator {
        BalanceDenominator::Corrected => m_imp,
        BalanceDenominator::SharedMean => m_sel,
    };
    (v_sel / (m_sel + BALANCE_GUARD)).powi(2) + (v_imp / (d_imp + BALANCE_GUARD)).powi(2)
}

/// `S_point[r] = Σ_n W_mask[r, n] · S[n]`.
pub fn point_state_embed(router: &RouterOutput, memory: &Mat) -> Result<Mat> {
    if router.weights.cols != memory.rows {
        return Err(StarError::Shape(format!(
            "routing over {} rows but memory has {}",
            router.weights.cols, memory.rows
        )));
    }
    Ok(router.weights.matmul(memory))
}

/// The learnable memory plus its router.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StateEncoder {
    pub config: StateEncoderConfig,
    pub memory: ParamId,
    pub router: Mlp,
}

/// Graph outputs of [`StateEncoder::encode`].
pub struct EncodedStates {
    /// `rows × d`, rows ordered `(t, i)`.
    pub point: Var,
    pub balance: Var,
    pub e_sel: Var,
    pub e_imp: Var,
}

impl StateEncoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        config: StateEncoderConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let memory = store.add(
            "state.memory",
            Mat::randn(config.memory_size, config.dim, config.memory_init_std, rng),
        );
        let router = Mlp::new(
            store,
            "state.router",
            2 * config.dim,
            config.router_hidden,
            config.memory_size,
            config.router_depth,
            1.0,
            rng,
        );
        Ok(Self {
            config,
            memory,
            router,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        std::iter::once(self.memory)
            .chain(self.router.params())
            .collect()
    }

    fn codes(&self, var: usize, id: usize) -> Vec<f64> {
        let d = self.config.dim;
        let mut row = sinusoidal_encode(var, d, self.config.lambda).expect("validated dim");
        row.extend(sinusoidal_encode(id, d, self.config.lambda).expect("validated dim"));
        row
    }

    /// Point-wise state embeddings for a row-major `rows/C_s × C_s` id grid.
    ///
    /// Routing depends only on the (variable, id) pair, so the router runs
    /// once per distinct pair and results are gathered back to every row.
    pub fn encode(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        state_ids: &[usize],
        n_state: usize,
    ) -> EncodedStates {
        let mut table: HashMap<(usize, usize), usize> = HashMap::new();
        let mut pairs: Vec<(usize, usize)> = Vec::new();
        let mut counts: Vec<f64> = Vec::new();
        let mut gather = Vec::with_capacity(state_ids.len());
        for (r, &id) in state_ids.iter().enumerate() {
            let key = (r % n_state, id);
            let u = *table.entry(key).or_insert_with(|| {
                pairs.push(key);
                counts.push(0.0);
                pairs.len() - 1
            });
            counts[u] += 1.0;
            gather.push(u);
        }
        let d2 = 2 * self.config.dim;
        let mut codes = Mat::zeros(pairs.len(), d2);
        for (u, &(var, id)) in pairs.iter().enumerate() {
            codes.row_mut(u).copy_from_slice(&self.codes(var, id));
        }
        let total = state_ids.len() as f64;
        let rw = Mat::from_vec(1, pairs.len(), counts.iter().map(|c| c / total).collect());

        let codes = g.constant(codes);
        let logits = self.router.forward(g, store, codes);
        let topk = soft_topk(g, logits, self.config.top_k, self.config.epsilon);
        let rw = g.constant(rw);
        let (e_sel, e_imp, balance) = balance_loss(
            g,
            topk.selection,
            topk.weights,
            rw,
            self.config.balance_denominator,
        );
        let memory = g.param(store, self.memory);
        let unique_point = g.matmul(topk.weights, memory);
        let point = g.gather_rows(unique_point, Rc::new(gather));
        EncodedStates {
            point,
            balance,
            e_sel,
            e_imp,
        }
    }

    /// Plain-value routing of explicit identity codes (one router pass per row).
    pub fn route(&self, store: &ParamStore, ids: &IdentityEncodings) -> Result<RouterOutput> {
        if ids.var_codes.cols != self.config.dim {
            return Err(StarError::Shape(format!(
                "identity codes have width {}, encoder expects {}",
                ids.var_codes.cols, self.config.dim
            )));
        }
        let mut g = Graph::inference();
        let iv = g.constant(ids.var_codes.clone());
        let is = g.constant(ids.state_codes.clone());
        let x = g.concat_cols(&[iv, is]);
        let logits = self.router.forward(&mut g, store, x);
        let topk = soft_topk(&mut g, logits, self.config.top_k, self.config.epsilon);
        Ok(RouterOutput {
            logits: g.value(logits).clone(),
            theta: g.value(topk.theta).clone(),
            weights: g.value(topk.weights).clone(),
            epsilon: self.config.epsilon,
            top_k: self.config.top_k,
        })
    }
}

/// Linear embedding of the raw category index, the stand-in used when the
/// memory-routed encoder is switched off.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LinearStateEmbedding {
    pub map: Linear,
}

impl LinearStateEmbedding {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, dim: usize, rng: &mut R) -> Self {
        Self {
            map: Linear::new(store, "state.linear", 1, dim, true, 1.0, rng),
        }
    }

    pub fn encode(&self, g: &mut Graph, store: &ParamStore, state_ids: &[usize]) -> Var {
        let x = g.constant(Mat::from_vec(
            state_ids.len(),
            1,
            state_ids.iter().map(|&v| v as f64).collect(),
        ));
        self.map.forward(g, store, x)
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.map.params()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sinusoid_values() {
        assert_eq!(
            sinusoidal_encode(0, 4, 10_000.0).unwrap(),
            vec![0.0, 1.0, 0.0, 1.0]
        );
        let v = sinusoidal_encode(1, 2, 10_000.0).unwrap();
        assert!((v[0] - 0.841_470_984_807_896_5).abs() < 1e-12);
        assert!((v[1] - 0.540_302_305_868_139_8).abs() < 1e-12);
        let v = sinusoidal_encode(3, 4, 10_000.0).unwrap();
        let expect = [3f64.sin(), 3f64.cos(), 0.03f64.sin(), 0.03f64.cos()];
        for (a, b) in v.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(matches!(
            sinusoidal_encode(1, 3, 10_000.0),
            Err(StarError::Shape(_))
        ));
    }

    #[test]
    fn identities_depend_on_the_right_inputs() {
        // two variables, both in state 2 at t=0; state 0 for both at t=1
        let enc = build_identities(&[2, 2, 0, 0], 2, 6, 10_000.0).unwrap();
        assert_eq!(enc.state_codes.row(0), enc.state_codes.row(1));
        assert_ne!(enc.var_codes.row(0), enc.var_codes.row(1));
        assert_eq!(enc.var_codes.row(0), enc.var_codes.row(2));
        assert_eq!(enc.var_codes.row(2), enc.state_codes.row(2));
        assert!(enc
            .var_codes
            .data
            .iter()
            .chain(&enc.state_codes.data)
            .all(|v| v.abs() <= 1.0));
        assert!(matches!(
            build_identities(&[0, -1], 2, 4, 10_000.0),
            Err(StarError::Input(_))
        ));
    }

    #[test]
    fn soft_topk_examples() {
        let (theta, w) = soft_topk_values(&Mat::row_vector(&[2.0, 1.0, 0.0]), 1, 1e-3).unwrap();
        assert_eq!(theta.item(), 2.0);
        assert!((w.data[0] - 1.0).abs() < 1e-12 && w.data[1] < 1e-12 && w.data[2] < 1e-12);

        let (theta, w) = soft_topk_values(&Mat::row_vector(&[0.7; 5]), 3, 0.05).unwrap();
        assert_eq!(theta.item(), 0.7);
        assert!(w.data.iter().all(|&v| (v - 0.2).abs() < 1e-12));

        // K = N: the minimum gets log σ(0) = log ½, every other term → 0
        let logits = Mat::row_vector(&[0.3, -0.4, 1.2, 0.1]);
        let (theta, w) = soft_topk_values(&logits, 4, 1e-6).unwrap();
        assert_eq!(theta.item(), -0.4);
        let mut expect: Vec<f64> = logits.data.clone();
        expect[1] += 0.5f64.ln();
        crate::autograd::softmax_in_place(&mut expect);
        for (a, b) in w.data.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-9);
        }
        assert!((w.sum() - 1.0).abs() < 1e-12);
        assert!(matches!(
            soft_topk_values(&logits, 5, 0.1),
            Err(StarError::Config(_))
        ));
    }

    #[test]
    fn balance_loss_examples() {
        assert_eq!(
            balance_from_means(&[0.25; 4], &[0.25; 4], BalanceDenominator::Corrected),
            0.0
        );
        let l = balance_from_means(
            &[0.25; 4],
            &[1.0, 0.0, 0.0, 0.0],
            BalanceDenominator::Corrected,
        );
        assert!((l - 0.5625).abs() < 1e-9, "{l}");
    }

    #[test]
    fn point_embed_examples() {
        let memory = Mat::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]);
        let mut router = RouterOutput {
            logits: Mat::zeros(1, 3),
            theta: Mat::zeros(1, 1),
            weights: Mat::row_vector(&[0.0, 0.0, 1.0]),
            epsilon: 0.05,
            top_k: 1,
        };
        assert_eq!(
            point_state_embed(&router, &memory).unwrap().data,
            vec![5.0, 6.0]
        );
        router.weights = Mat::row_vector(&[1.0 / 3.0; 3]);
        let p = point_state_embed(&router, &memory).unwrap();
        assert!((p.data[0] - 3.0).abs() < 1e-12 && (p.data[1] - 4.0).abs() < 1e-12);
        assert_eq!(
            point_state_embed(&router, &Mat::zeros(3, 2)).unwrap().data,
            vec![0.0, 0.0]
        );
    }

    #[test]
    fn encode_matches_route_then_embed() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let cfg = StateEncoderConfig {
            dim: 8,
            memory_size: 6,
            top_k: 2,
            ..Default::default()
        };
        let enc = StateEncoder::new(&mut store, cfg, &mut rng).unwrap();
        let ids = [0usize, 1, 2, 1, 0, 0, 3, 1, 2];
        let mut g = Graph::inference();
        let out = enc.encode(&mut g, &store, &ids, 3);
        let signed: Vec<i64> = ids.iter().map(|&v| v as i64).collect();
        let codes = build_identities(&signed, 3, 8, 10_000.0).unwrap();
        let router = enc.route(&store, &codes).unwrap();
        let expect = point_state_embed(&router, store.get(enc.memory)).unwrap();
        assert!(g.value(out.point).max_abs_diff(&expect) < 1e-12);
        let stats = load_balance_loss(&router, BalanceDenominator::Corrected);
        assert!((g.value(out.balance).item() - stats.loss).abs() < 1e-12);
        for row in 0..router.weights.rows {
            assert!((router.weights.row(row).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}
