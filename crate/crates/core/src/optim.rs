//! First-order optimizers over a [`ParamStore`].

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, ParamId, ParamStore};
use crate::tensor::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    /// Decoupled weight decay, applied as `p -= lr · wd · p`.
    pub weight_decay: f64,
    /// Rescale the joint gradient when its L2 norm exceeds this value.
    pub max_grad_norm: Option<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            lr: 1e-2,
            weight_decay: 0.0,
            max_grad_norm: None,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

pub struct Optimizer {
    config: OptimizerConfig,
    params: Vec<ParamId>,
    first: HashMap<ParamId, Mat>,
    second: HashMap<ParamId, Mat>,
    steps: u64,
}

impl Optimizer {
    /// Updates touch only `params`, in the given order.
    pub fn new(config: OptimizerConfig, params: Vec<ParamId>) -> Self {
        Self {
            config,
            params,
            first: HashMap::new(),
            second: HashMap::new(),
            steps: 0,
        }
    }

    pub fn params(&self) -> &[ParamId] {
        &self.params
    }

    /// Global L2 norm of the gradient restricted to the optimized parameters.
    pub fn grad_norm(&self, grads: &Gradients) -> f64 {
        self.params
            .iter()
            .filter_map(|&id| grads.param(id))
            .flat_map(|g| g.data.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        self.steps += 1;
        let c = self.config.clone();
        let clip = match c.max_grad_norm {
            Some(max) => {
                let n = self.grad_norm(grads);
                if n > max {
                    max / n
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let bias1 = 1.0 - c.beta1.powi(self.steps as i32);
        let bias2 = 1.0 - c.beta2.powi(self.steps as i32);
        for &id in &self.params {
            let Some(grad) = grads.param(id) else {
                continue;
            };
            let p = store.get_mut(id);
            if c.weight_decay > 0.0 {
                let f = 1.0 - c.lr * c.weight_decay;
                p.data.iter_mut().for_each(|v| *v *= f);
            }
            match c.kind {
                OptimizerKind::Sgd => {
                    for (v, g) in p.data.iter_mut().zip(&grad.data) {
                        *v -= c.lr * clip * g;
                    }
                }
                OptimizerKind::Adam => {
                    let m = self
                        .first
                        .entry(id)
                        .or_insert_with(|| Mat::zeros(p.rows, p.cols));
                    let s = self
                        .second
                        .entry(id)
                        .or_insert_with(|| Mat::zeros(p.rows, p.cols));
                    for i in 0..p.data.len() {
                        let g = grad.data[i] * clip;
                        m.data[i] = c.beta1 * m.data[i] + (1.0 - c.beta1) * g;
                        s.data[i] = c.beta2 * s.data[i] + (1.0 - c.beta2) * g * g;
                        let mh = m.data[i] / bias1;
                        let sh = s.data[i] / bias2;
                        p.data[i] -= c.lr * mh / (sh.sqrt() + c.adam_eps);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Graph;

    fn quadratic_descent(kind: OptimizerKind, lr: f64) -> f64 {
        let mut store = ParamStore::new();
        let id = store.add("x", Mat::row_vector(&[3.0, -2.0]));
        let mut opt = Optimizer::new(
            OptimizerConfig {
                kind,
                lr,
                ..Default::default()
            },
            vec![id],
        );
        for _ in 0..500 {
            let mut g = Graph::new();
            let x = g.param(&store, id);
            let sq = g.square(x);
            let loss = g.sum_all(sq);
            let grads = g.backward(loss);
            opt.step(&mut store, &grads);
        }
        store.get(id).frobenius_norm()
    }

    #[test]
    fn minimizes_a_quadratic() {
        assert!(quadratic_descent(OptimizerKind::Sgd, 0.1) < 1e-8);
        assert!(quadratic_descent(OptimizerKind::Adam, 0.05) < 1e-2);
    }

    #[test]
    fn clipping_bounds_the_step() {
        let mut store = ParamStore::new();
        let id = store.add("x", Mat::row_vector(&[100.0]));
        let cfg = OptimizerConfig {
            lr: 1.0,
            max_grad_norm: Some(1.0),
            ..Default::default()
        };
        let mut opt = Optimizer::new(cfg, vec![id]);
        let mut g = Graph::new();
        let x = g.param(&store, id);
        let loss = g.square(x);
        let grads = g.backward(loss);
        opt.step(&mut store, &grads);
        assert!((store.get(id).item() - 99.0).abs() < 1e-12);
    }
}
