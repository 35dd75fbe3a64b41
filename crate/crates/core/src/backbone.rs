//! Channel-independent patch-reconstruction backbone.
//!
//! Every numerical variable of a window is cut into `m` patches of length
//! `l`, embedded into `d_b` dimensions, passed through residual mixer blocks
//! (a token-mixing map along the patch axis followed by a feed-forward pair)
//! and decoded back to patch values. The two feed-forward maps of each block
//! are the adapter sites.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Graph, ParamId, ParamStore, Var};
use crate::dataset::{SeriesDataset, WindowBatch};
use crate::error::{Result, StarError};
use crate::nn::Linear;
use crate::optim::{Optimizer, OptimizerConfig, OptimizerKind};
use crate::tensor::Mat;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub patch_len: usize,
    pub window_len: usize,
    pub d_model: usize,
    pub ff_hidden: usize,
    pub n_blocks: usize,
    pub pretrain: PretrainConfig,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            patch_len: 16,
            window_len: 128,
            d_model: 32,
            ff_hidden: 64,
            n_blocks: 2,
            pretrain: Default::default(),
        }
    }
}

impl BackboneConfig {
    pub fn n_patches(&self) -> usize {
        self.window_len / self.patch_len
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_len == 0
            || self.window_len == 0
            || !self.window_len.is_multiple_of(self.patch_len)
        {
            return Err(StarError::Config(format!(
                "window length {} must be a positive multiple of patch length {}",
                self.window_len, self.patch_len
            )));
        }
        if self.d_model == 0 || self.ff_hidden == 0 || self.n_blocks == 0 {
            return Err(StarError::Config(
                "backbone widths and depth must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_windows: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 1500,
            batch_windows: 16,
            optimizer: OptimizerConfig {
                kind: OptimizerKind::Adam,
                lr: 3e-3,
                max_grad_norm: Some(1.0),
                ..Default::default()
            },
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MixerBlock {
    pub token: Linear,
    pub ff1: Linear,
    pub ff2: Linear,
}

/// One adapted linear map inside the backbone.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterSite {
    pub site_id: usize,
    pub host: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

/// Supplies the additive low-rank update at adapter sites.
pub trait SiteAdapter {
    /// `x` has rows `(window, var, patch)`; `slots[row] = window·m + patch`
    /// selects the per-patch parameters. `None` leaves the site untouched.
    fn delta(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        site: usize,
        x: Var,
        slots: &Rc<Vec<usize>>,
    ) -> Option<Var>;
}

/// Graph outputs of a backbone pass. `recon` and `hidden` have rows
/// `(window, var, patch)`.
pub struct BackboneVars {
    pub recon: Var,
    pub hidden: Var,
    pub n_windows: usize,
    pub n_numeric: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub embed: Linear,
    pub blocks: Vec<MixerBlock>,
    pub decode: Linear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainReport {
    pub losses: Vec<f64>,
}

impl Backbone {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        config: BackboneConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let (l, d, h, m) = (
            config.patch_len,
            config.d_model,
            config.ff_hidden,
            config.n_patches(),
        );
        let embed = Linear::new(store, "backbone.embed", l, d, true, 1.0, rng);
        let blocks = (0..config.n_blocks)
            .map(|b| MixerBlock {
                token: Linear::new(
                    store,
                    &format!("backbone.block{b}.token"),
                    m,
                    m,
                    true,
                    0.5,
                    rng,
                ),
                ff1: Linear::new(
                    store,
                    &format!("backbone.block{b}.ff1"),
                    d,
                    h,
                    true,
                    1.0,
                    rng,
                ),
                ff2: Linear::new(
                    store,
                    &format!("backbone.block{b}.ff2"),
                    h,
                    d,
                    true,
                    0.5,
                    rng,
                ),
            })
            .collect();
        let decode = Linear::new(store, "backbone.decode", d, l, true, 1.0, rng);
        Ok(Self {
            config,
            embed,
            blocks,
            decode,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut out = self.embed.params();
        for b in &self.blocks {
            out.extend(b.token.params());
            out.extend(b.ff1.params());
            out.extend(b.ff2.params());
        }
        out.extend(self.decode.params());
        out
    }

    /// Site `2b` is block `b`'s first feed-forward map, `2b + 1` its second.
    pub fn sites(&self) -> Vec<AdapterSite> {
        self.blocks
            .iter()
            .flat_map(|b| [b.ff1, b.ff2])
            .enumerate()
            .map(|(site_id, lin)| AdapterSite {
                site_id,
                host: lin.weight,
                d_in: lin.d_in,
                d_out: lin.d_out,
            })
            .collect()
    }

    /// Windows `[w][t][c]` to patch rows `(w, c, p)` of width `l`.
    pub fn patchify(&self, numeric: &[f64], n_windows: usize, n_numeric: usize) -> Mat {
        let (tw, l, m) = (
            self.config.window_len,
            self.config.patch_len,
            self.config.n_patches(),
        );
        let mut out = Mat::zeros(n_windows * n_numeric * m, l);
        for w in 0..n_windows {
            for c in 0..n_numeric {
                for p in 0..m {
                    let row = out.row_mut((w * n_numeric + c) * m + p);
                    for (j, v) in row.iter_mut().enumerate() {
                        *v = numeric[(w * tw + p * l + j) * n_numeric + c];
                    }
                }
            }
        }
        out
    }

    /// Inverse of [`Backbone::patchify`].
    pub fn unpatchify(&self, patches: &Mat, n_windows: usize, n_numeric: usize) -> Vec<f64> {
        let (tw, l, m) = (
            self.config.window_len,
            self.config.patch_len,
            self.config.n_patches(),
        );
        let mut out = vec![0.0; n_windows * tw * n_numeric];
        for w in 0..n_windows {
            for c in 0..n_numeric {
                for p in 0..m {
                    for (j, &v) in patches.row((w * n_numeric + c) * m + p).iter().enumerate() {
                        out[(w * tw + p * l + j) * n_numeric + c] = v;
                    }
                }
            }
        }
        out
    }

    /// Patch slot `w·m + p` of every `(w, c, p)` row.
    pub fn slots(&self, n_windows: usize, n_numeric: usize) -> Rc<Vec<usize>> {
        let m = self.config.n_patches();
        let mut s = Vec::with_capacity(n_windows * n_numeric * m);
        for w in 0..n_windows {
            for _ in 0..n_numeric {
                s.extend((0..m).map(|p| w * m + p));
            }
        }
        Rc::new(s)
    }

    fn hosted(
        g: &mut Graph,
        store: &ParamStore,
        lin: &Linear,
        x: Var,
        site: usize,
        adapter: Option<&dyn SiteAdapter>,
        slots: &Rc<Vec<usize>>,
    ) -> Var {
        let base = lin.forward(g, store, x);
        match adapter.and_then(|a| a.delta(g, store, site, x, slots)) {
            Some(delta) => g.add(base, delta),
            None => base,
        }
    }

    /// Forward pass over patch rows produced by [`Backbone::patchify`].
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        patches: Var,
        n_windows: usize,
        n_numeric: usize,
        adapter: Option<&dyn SiteAdapter>,
    ) -> BackboneVars {
        let (m, d) = (self.config.n_patches(), self.config.d_model);
        let seqs = n_windows * n_numeric;
        let slots = self.slots(n_windows, n_numeric);

        let mut to_axis = Vec::with_capacity(seqs * m * d);
        for s in 0..seqs {
            for ch in 0..d {
                to_axis.extend((0..m).map(|p| (s * m + p) * d + ch));
            }
        }
        let to_axis = Rc::new(to_axis);
        let mut back = Vec::with_capacity(seqs * m * d);
        for s in 0..seqs {
            for p in 0..m {
                back.extend((0..d).map(|ch| (s * d + ch) * m + p));
            }
        }
        let back = Rc::new(back);

        let mut h = self.embed.forward(g, store, patches);
        for (b, block) in self.blocks.iter().enumerate() {
            let along = g.gather_flat(h, to_axis.clone(), seqs * d, m);
            let mixed = block.token.forward(g, store, along);
            let mixed = g.gelu(mixed);
            let mixed = g.gather_flat(mixed, back.clone(), seqs * m, d);
            h = g.add(h, mixed);

            let a = Self::hosted(g, store, &block.ff1, h, 2 * b, adapter, &slots);
            let a = g.gelu(a);
            let f = Self::hosted(g, store, &block.ff2, a, 2 * b + 1, adapter, &slots);
            h = g.add(h, f);
        }
        let recon = self.decode.forward(g, store, h);
        BackboneVars {
            recon,
            hidden: h,
            n_windows,
            n_numeric,
        }
    }

    /// Final hidden states averaged over numerical variables; rows `(window, patch)`.
    pub fn pooled_hidden(&self, g: &mut Graph, out: &BackboneVars) -> Var {
        let (m, d, cn) = (self.config.n_patches(), self.config.d_model, out.n_numeric);
        let mut idx = Vec::with_capacity(out.n_windows * m * cn * d);
        for w in 0..out.n_windows {
            for p in 0..m {
                for c in 0..cn {
                    let base = ((w * cn + c) * m + p) * d;
                    idx.extend(base..base + d);
                }
            }
        }
        let wide = g.gather_flat(out.hidden, Rc::new(idx), out.n_windows * m, cn * d);
        let mut sum = g.slice_cols(wide, 0, d);
        for c in 1..cn {
            let part = g.slice_cols(wide, c * d, (c + 1) * d);
            sum = g.add(sum, part);
        }
        g.scale(sum, 1.0 / cn as f64)
    }

    fn check_window(&self, numeric: &Mat) -> Result<()> {
        if numeric.rows != self.config.window_len || numeric.cols == 0 {
            return Err(StarError::Shape(format!(
                "expected a {}-step window with at least one variable, got {}x{}",
                self.config.window_len, numeric.rows, numeric.cols
            )));
        }
        Ok(())
    }

    /// Reconstruct one `T_w × C_n` window.
    pub fn reconstruct(
        &self,
        store: &ParamStore,
        numeric: &Mat,
        adapter: Option<&dyn SiteAdapter>,
    ) -> Result<Mat> {
        self.check_window(numeric)?;
        let cn = numeric.cols;
        let mut g = Graph::inference();
        let x = g.constant(self.patchify(&numeric.data, 1, cn));
        let out = self.forward(&mut g, store, x, 1, cn, adapter);
        Ok(Mat::from_vec(
            numeric.rows,
            cn,
            self.unpatchify(g.value(out.recon), 1, cn),
        ))
    }

    /// Reconstruct every window of a batch; output laid out like `batch.numeric`.
    pub fn reconstruct_batch(&self, store: &ParamStore, batch: &WindowBatch) -> Result<Vec<f64>> {
        if batch.window_len != self.config.window_len || batch.patch_len != self.config.patch_len {
            return Err(StarError::Shape(
                "window geometry differs from the backbone's".into(),
            ));
        }
        let mut g = Graph::inference();
        let x = g.constant(self.patchify(&batch.numeric, batch.n_windows(), batch.n_numeric));
        let out = self.forward(&mut g, store, x, batch.n_windows(), batch.n_numeric, None);
        Ok(self.unpatchify(g.value(out.recon), batch.n_windows(), batch.n_numeric))
    }

    /// Final-block hidden state per patch averaged over variables, `m × d_b`.
    pub fn patch_embeddings(&self, store: &ParamStore, numeric: &Mat) -> Result<Mat> {
        self.check_window(numeric)?;
        let cn = numeric.cols;
        let mut g = Graph::inference();
        let x = g.constant(self.patchify(&numeric.data, 1, cn));
        let out = self.forward(&mut g, store, x, 1, cn, None);
        let pooled = self.pooled_hidden(&mut g, &out);
        Ok(g.value(pooled).clone())
    }

    /// SHA-256 over the backbone's parameter values, hex encoded.
    pub fn checksum(&self, store: &ParamStore) -> String {
        let mut h = Sha256::new();
        for id in self.params() {
            for v in &store.get(id).data {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Fit a fresh backbone to reconstruct the numerical windows of `train`.
/// Returns the parameter store holding only backbone weights.
pub fn pretrain(
    train: &SeriesDataset,
    config: &BackboneConfig,
) -> Result<(ParamStore, Backbone, PretrainReport)> {
    config.validate()?;
    let tw = config.window_len;
    if train.len() < tw {
        return Err(StarError::SeriesTooShort {
            len: train.len(),
            needed: tw,
        });
    }
    if train.n_numeric() == 0 {
        return Err(StarError::Input(
            "pretraining needs at least one numerical column".into(),
        ));
    }
    let pc = &config.pretrain;
    let mut rng = ChaCha8Rng::seed_from_u64(pc.seed);
    let mut store = ParamStore::new();
    let bb = Backbone::new(&mut store, config.clone(), &mut rng)?;
    let mut opt = Optimizer::new(pc.optimizer.clone(), bb.params());
    let numeric_only = train.numeric_only();
    let mut losses = Vec::with_capacity(pc.steps);
    let max_start = train.len() - tw;
    for step in 0..pc.steps {
        let offsets: Vec<usize> = (0..pc.batch_windows.max(1))
            .map(|_| rng.random_range(0..=max_start))
            .collect();
        let batch = WindowBatch::gather(&numeric_only, &offsets, tw, config.patch_len)?;
        let (cn, nw) = (batch.n_numeric, batch.n_windows());
        let mut g = Graph::new();
        let target = bb.patchify(&batch.numeric, nw, cn);
        let x = g.constant(target);
        let out = bb.forward(&mut g, &store, x, nw, cn, None);
        let diff = g.sub(out.recon, x);
        let sq = g.square(diff);
        let loss = g.mean_all(sq);
        let lv = g.value(loss).item();
        if !lv.is_finite() {
            return Err(StarError::Numeric(format!(
                "pretraining loss became {lv} at step {step}"
            )));
        }
        losses.push(lv);
        let grads = g.backward(loss);
        opt.step(&mut store, &grads);
    }
    Ok((store, bb, PretrainReport { losses }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Split, VarKind};

    fn small_config(steps: usize) -> BackboneConfig {
        BackboneConfig {
            patch_len: 8,
            window_len: 32,
            d_model: 16,
            ff_hidden: 32,
            n_blocks: 2,
            pretrain: PretrainConfig {
                steps,
                batch_windows: 8,
                ..Default::default()
            },
        }
    }

    fn numeric_ds(cols: Vec<Vec<f64>>) -> SeriesDataset {
        let n = cols.len();
        SeriesDataset::new(
            (0..n).map(|i| format!("x{i}")).collect(),
            vec![VarKind::Numerical; n],
            cols,
            None,
            Split::Train,
        )
        .unwrap()
    }

    #[test]
    fn patchify_roundtrip() {
        let mut store = ParamStore::new();
        let bb = Backbone::new(
            &mut store,
            small_config(0),
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        let data: Vec<f64> = (0..2 * 32 * 3).map(|v| v as f64).collect();
        let p = bb.patchify(&data, 2, 3);
        assert_eq!(p.shape(), (2 * 3 * 4, 8));
        assert_eq!(p.row(0), &[0.0, 3.0, 6.0, 9.0, 12.0, 15.0, 18.0, 21.0]);
        assert_eq!(bb.unpatchify(&p, 2, 3), data);
        assert_eq!(bb.sites().len(), 4);
    }

    #[test]
    fn constant_zero_series_is_fit() {
        let ds = numeric_ds(vec![vec![0.0; 200]]);
        let (_, _, report) = pretrain(&ds, &small_config(200)).unwrap();
        assert!(*report.losses.last().unwrap() < 1e-4);
    }

    #[test]
    fn pretraining_is_deterministic() {
        let ds = numeric_ds(vec![(0..100).map(|t| (t as f64 * 0.3).sin()).collect()]);
        let (s1, b1, _) = pretrain(&ds, &small_config(20)).unwrap();
        let (s2, b2, _) = pretrain(&ds, &small_config(20)).unwrap();
        assert_eq!(b1.checksum(&s1), b2.checksum(&s2));
        assert!(matches!(
            pretrain(&numeric_ds(vec![vec![0.0; 10]]), &small_config(1)),
            Err(StarError::SeriesTooShort { .. })
        ));
    }

    #[test]
    fn fits_a_sine() {
        let sine = |t: usize| (t as f64 * 2.0 * std::f64::consts::PI / 23.0).sin();
        let ds = numeric_ds(vec![(0..2000).map(sine).collect()]);
        let (store, bb, _) = pretrain(&ds, &small_config(600)).unwrap();
        let held: Vec<f64> = (5000..5032).map(sine).collect();
        let x = Mat::from_vec(32, 1, held.clone());
        let y = bb.reconstruct(&store, &x, None).unwrap();
        let corr = pearson(&held, &y.data);
        assert!(corr > 0.99, "correlation {corr}");
    }

    fn pearson(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    #[test]
    fn channels_are_independent() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let bb = Backbone::new(&mut store, small_config(0), &mut rng).unwrap();
        let x = Mat::randn(32, 3, 1.0, &mut rng);
        let mut swapped = x.clone();
        for t in 0..32 {
            swapped.set(t, 0, x.get(t, 2));
            swapped.set(t, 2, x.get(t, 0));
        }
        let y = bb.reconstruct(&store, &x, None).unwrap();
        let ys = bb.reconstruct(&store, &swapped, None).unwrap();
        for t in 0..32 {
            assert_eq!(y.get(t, 0), ys.get(t, 2));
            assert_eq!(y.get(t, 1), ys.get(t, 1));
        }
    }

    #[test]
    fn patch_embeddings_average_variables() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let bb = Backbone::new(&mut store, small_config(0), &mut rng).unwrap();
        let one = Mat::randn(32, 1, 1.0, &mut rng);
        let two = Mat::from_vec(32, 2, one.data.iter().flat_map(|&v| [v, v]).collect());
        let e1 = bb.patch_embeddings(&store, &one).unwrap();
        let e2 = bb.patch_embeddings(&store, &two).unwrap();
        assert_eq!(e1.shape(), (4, 16));
        assert!(e1.max_abs_diff(&e2) < 1e-14);
        let zero = bb.patch_embeddings(&store, &Mat::zeros(32, 2)).unwrap();
        assert!(zero.data.iter().all(|&v| v == 0.0));
        assert!(bb.patch_embeddings(&store, &Mat::zeros(31, 2)).is_err());
    }

    struct ZeroDelta(Vec<AdapterSite>);

    impl SiteAdapter for ZeroDelta {
        fn delta(
            &self,
            g: &mut Graph,
            _: &ParamStore,
            site: usize,
            x: Var,
            _: &Rc<Vec<usize>>,
        ) -> Option<Var> {
            let s = &self.0[site];
            let w = g.constant(Mat::zeros(s.d_in, s.d_out));
            Some(g.matmul(x, w))
        }
    }

    #[test]
    fn zero_delta_is_neutral() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let bb = Backbone::new(&mut store, small_config(0), &mut rng).unwrap();
        let x = Mat::randn(32, 2, 1.0, &mut rng);
        let plain = bb.reconstruct(&store, &x, None).unwrap();
        let zero = bb
            .reconstruct(&store, &x, Some(&ZeroDelta(bb.sites())))
            .unwrap();
        assert_eq!(plain, zero);
    }
}
