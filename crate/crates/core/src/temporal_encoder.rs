//! Patch-level fusion of point-wise state embeddings.
//!
//! `f1` folds each length-`l` patch into one vector, `f2` mixes along the
//! patch axis with a residual connection, and `f3`/`f4` weight and fuse the
//! state variables into one embedding per patch.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamId, ParamStore, Var};
use crate::error::{Result, StarError};
use crate::nn::Mlp;
use crate::tensor::Mat;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TemporalEncoderConfig {
    pub f1_hidden: usize,
    pub f2_hidden: usize,
    /// Hidden width of `f3` and `f4`.
    pub agg_hidden: usize,
    /// Normalize `W_agg` across state variables with a softmax.
    pub softmax_weights: bool,
}

impl Default for TemporalEncoderConfig {
    fn default() -> Self {
        Self {
            f1_hidden: 32,
            f2_hidden: 16,
            agg_hidden: 32,
            softmax_weights: false,
        }
    }
}

/// Patch layout shared by every window of a batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchGeometry {
    pub n_windows: usize,
    pub window_len: usize,
    pub patch_len: usize,
    pub n_state: usize,
}

impl PatchGeometry {
    pub fn n_patches(&self) -> usize {
        self.window_len / self.patch_len
    }

    fn check(&self) -> Result<()> {
        if self.patch_len == 0 || !self.window_len.is_multiple_of(self.patch_len) {
            return Err(StarError::Config(format!(
                "patch length {} does not divide window length {}",
                self.patch_len, self.window_len
            )));
        }
        if self.n_state == 0 {
            return Err(StarError::Config(
                "temporal encoder needs at least one state variable".into(),
            ));
        }
        Ok(())
    }
}

/// Plain-value intra/inter patch representations, rows ordered `(window, patch, var)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchTensor {
    pub intra: Mat,
    pub inter: Mat,
    pub geometry: PatchGeometry,
}

/// Plain-value fused output: `s_patch` rows `(window, patch)`, `w_agg` rows `(window, patch, var)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchStateEmbedding {
    pub s_patch: Mat,
    pub w_agg: Mat,
}

pub struct PatchVars {
    pub intra: Var,
    pub inter: Var,
    pub w_agg: Var,
    pub s_patch: Var,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TemporalEncoder {
    pub config: TemporalEncoderConfig,
    pub dim: usize,
    pub patch_len: usize,
    pub n_patches: usize,
    pub f1: Mlp,
    pub f2: Mlp,
    pub f3: Mlp,
    pub f4: Mlp,
}

impl TemporalEncoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        config: TemporalEncoderConfig,
        dim: usize,
        patch_len: usize,
        n_patches: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if dim == 0 || patch_len == 0 || n_patches == 0 {
            return Err(StarError::Config(
                "temporal encoder dimensions must be positive".into(),
            ));
        }
        if n_patches == 1 {
            log::warn!("a single patch per window reduces the inter-patch map to a 1x1 transform");
        }
        let f1 = Mlp::new(
            store,
            "temporal.f1",
            patch_len * dim,
            config.f1_hidden,
            dim,
            2,
            1.0,
            rng,
        );
        let f2 = Mlp::new(
            store,
            "temporal.f2",
            n_patches,
            config.f2_hidden,
            n_patches,
            2,
            0.5,
            rng,
        );
        let f3 = Mlp::new(store, "temporal.f3", dim, config.agg_hidden, 1, 2, 1.0, rng);
        // start from an unweighted sum over variables
        if let Some(b) = f3.output_bias() {
            store.get_mut(b).data[0] = 1.0;
        }
        let f4 = Mlp::new(
            store,
            "temporal.f4",
            dim,
            config.agg_hidden,
            dim,
            2,
            1.0,
            rng,
        );
        Ok(Self {
            config,
            dim,
            patch_len,
            n_patches,
            f1,
            f2,
            f3,
            f4,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        [&self.f1, &self.f2, &self.f3, &self.f4]
            .into_iter()
            .flat_map(Mlp::params)
            .collect()
    }

    fn geometry_ok(&self, geo: &PatchGeometry) -> Result<()> {
        geo.check()?;
        if geo.patch_len != self.patch_len || geo.n_patches() != self.n_patches {
            return Err(StarError::Shape(format!(
                "encoder built for {} patches of {}, got {} of {}",
                self.n_patches,
                self.patch_len,
                geo.n_patches(),
                geo.patch_len
            )));
        }
        Ok(())
    }

    /// `point`: rows `(window, t, var)`, width `d`. Returns `(P_intra, P_inter)`,
    /// both with rows `(window, patch, var)`.
    pub fn intra_inter_graph(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        point: Var,
        geo: PatchGeometry,
    ) -> (Var, Var) {
        let (b, m, l, cs, d) = (
            geo.n_windows,
            self.n_patches,
            self.patch_len,
            geo.n_state,
            self.dim,
        );
        let tw = geo.window_len;

        let mut patches = Vec::with_capacity(b * m * cs * l * d);
        for w in 0..b {
            for p in 0..m {
                for i in 0..cs {
                    for j in 0..l {
                        let base = ((w * tw + p * l + j) * cs + i) * d;
                        patches.extend(base..base + d);
                    }
                }
            }
        }
        let flat = g.gather_flat(point, Rc::new(patches), b * m * cs, l * d);
        let intra = self.f1.forward(g, store, flat);

        let mut to_axis = Vec::with_capacity(b * m * cs * d);
        for w in 0..b {
            for i in 0..cs {
                for c in 0..d {
                    to_axis.extend((0..m).map(|p| ((w * m + p) * cs + i) * d + c));
                }
            }
        }
        let along = g.gather_flat(intra, Rc::new(to_axis), b * cs * d, m);
        let mixed = self.f2.forward(g, store, along);
        let mut back = Vec::with_capacity(b * m * cs * d);
        for w in 0..b {
            for p in 0..m {
                for i in 0..cs {
                    back.extend((0..d).map(|c| ((w * cs + i) * d + c) * m + p));
                }
            }
        }
        let mixed = g.gather_flat(mixed, Rc::new(back), b * m * cs, d);
        let inter = g.add(mixed, intra);
        (intra, inter)
    }

    /// Returns `(W_agg, S_patch)`; `S_patch` rows are `(window, patch)`.
    pub fn aggregate_graph(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        inter: Var,
        geo: PatchGeometry,
    ) -> (Var, Var) {
        let rows = geo.n_windows * self.n_patches;
        let cs = geo.n_state;
        let mut w_agg = self.f3.forward(g, store, inter);
        if self.config.softmax_weights {
            let grid = g.reshape(w_agg, rows, cs);
            let norm = g.softmax_rows(grid);
            w_agg = g.reshape(norm, rows * cs, 1);
        }
        let weighted = g.mul_col(inter, w_agg);
        let wide = g.reshape(weighted, rows, cs * self.dim);
        let mut sum = g.slice_cols(wide, 0, self.dim);
        for i in 1..cs {
            let part = g.slice_cols(wide, i * self.dim, (i + 1) * self.dim);
            sum = g.add(sum, part);
        }
        let s_patch = self.f4.forward(g, store, sum);
        (w_agg, s_patch)
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        point: Var,
        geo: PatchGeometry,
    ) -> PatchVars {
        let (intra, inter) = self.intra_inter_graph(g, store, point, geo);
        let (w_agg, s_patch) = self.aggregate_graph(g, store, inter, geo);
        PatchVars {
            intra,
            inter,
            w_agg,
            s_patch,
        }
    }

    pub fn intra_inter(
        &self,
        store: &ParamStore,
        s_point: &Mat,
        geo: PatchGeometry,
    ) -> Result<PatchTensor> {
        self.geometry_ok(&geo)?;
        let expected = geo.n_windows * geo.window_len * geo.n_state;
        if s_point.rows != expected || s_point.cols != self.dim {
            return Err(StarError::Shape(format!(
                "point embeddings are {}x{}, expected {expected}x{}",
                s_point.rows, s_point.cols, self.dim
            )));
        }
        let mut g = Graph::inference();
        let p = g.constant(s_point.clone());
        let (intra, inter) = self.intra_inter_graph(&mut g, store, p, geo);
        Ok(PatchTensor {
            intra: g.value(intra).clone(),
            inter: g.value(inter).clone(),
            geometry: geo,
        })
    }

    pub fn aggregate(
        &self,
        store: &ParamStore,
        patches: &PatchTensor,
    ) -> Result<PatchStateEmbedding> {
        let geo = patches.geometry;
        self.geometry_ok(&geo)?;
        if patches.inter.rows != geo.n_windows * self.n_patches * geo.n_state
            || patches.inter.cols != self.dim
        {
            return Err(StarError::Shape(
                "inter-patch tensor does not match its geometry".into(),
            ));
        }
        let mut g = Graph::inference();
        let inter = g.constant(patches.inter.clone());
        let (w_agg, s_patch) = self.aggregate_graph(&mut g, store, inter, geo);
        Ok(PatchStateEmbedding {
            s_patch: g.value(s_patch).clone(),
            w_agg: g.value(w_agg).clone(),
        })
    }
}
