//! Small perceptron building blocks registered in a [`ParamStore`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamId, ParamStore, Var};
use crate::tensor::Mat;

/// `y = x·W + b` in row-vector convention (`x: n×d_in`, `W: d_in×d_out`).
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    /// Weights drawn from `N(0, 1/d_in)` scaled by `gain`; zero bias.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let std = gain / (d_in as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), Mat::randn(d_in, d_out, std, rng));
        let bias = bias.then(|| store.add(format!("{name}.bias"), Mat::zeros(1, d_out)));
        Self {
            weight,
            bias,
            d_in,
            d_out,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let y = g.matmul(x, w);
        match self.bias {
            Some(b) => {
                let bv = g.param(store, b);
                g.add_row(y, bv)
            }
            None => y,
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }
}

/// Perceptron with GELU between layers. `layers == 1` is a plain linear map.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `depth` linear layers: `d_in → hidden → … → hidden → d_out`.
    /// The last layer is scaled by `out_gain`.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        hidden: usize,
        d_out: usize,
        depth: usize,
        out_gain: f64,
        rng: &mut R,
    ) -> Self {
        assert!(depth >= 1, "an MLP needs at least one layer");
        let mut layers = Vec::with_capacity(depth);
        let mut width = d_in;
        for i in 0..depth {
            let last = i + 1 == depth;
            let out = if last { d_out } else { hidden };
            let gain = if last { out_gain } else { 1.0 };
            layers.push(Linear::new(
                store,
                &format!("{name}.{i}"),
                width,
                out,
                true,
                gain,
                rng,
            ));
            width = out;
        }
        Self { layers }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, store, h);
            if i + 1 < self.layers.len() {
                h = g.gelu(h);
            }
        }
        h
    }

    pub fn d_out(&self) -> usize {
        self.layers.last().map_or(0, |l| l.d_out)
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(Linear::params).collect()
    }

    pub fn output_bias(&self) -> Option<ParamId> {
        self.layers.last().and_then(|l| l.bias)
    }
}

/// Plain-value forward pass, for callers that do not need gradients.
pub fn eval_mlp(mlp: &Mlp, store: &ParamStore, x: &Mat) -> Mat {
    let mut g = Graph::inference();
    let xv = g.constant(x.clone());
    let y = mlp.forward(&mut g, store, xv);
    g.value(y).clone()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mlp_shapes_and_param_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "f", 6, 8, 3, 2, 1.0, &mut rng);
        assert_eq!(mlp.params().len(), 4);
        assert_eq!(store.num_scalars(), 6 * 8 + 8 + 8 * 3 + 3);
        let y = eval_mlp(&mlp, &store, &Mat::zeros(5, 6));
        assert_eq!(y.shape(), (5, 3));
    }

    #[test]
    fn zero_output_layer_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "f", 4, 8, 4, 2, 0.0, &mut rng);
        let y = eval_mlp(&mlp, &store, &Mat::randn(3, 4, 1.0, &mut rng));
        assert!(y.data.iter().all(|&v| v == 0.0));
    }
}
