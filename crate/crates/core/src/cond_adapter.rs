//! State-conditioned low-rank adapters.
//!
//! Each adapted host weight `W0` (`d_in × d_out`) is split once by SVD into
//! frozen factors `A` (`d_in × r`) and `B` (`r × d_out`). Per patch, small
//! generators map the fused state embedding to a mixing matrix `R_init`, an
//! output scaling `D`, row scores `R_mask` and a threshold `Γ`; the update is
//! `ΔW·x = ((x·A)·R·B) ⊙ D` with `R = sigmoid((R_mask − Γ)/ε) ⊙ R_init`
//! applied row-wise. The LoRA baseline replaces all of this with two
//! trainable factors.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{self, Graph, ParamId, ParamStore, Var};
use crate::backbone::{AdapterSite, SiteAdapter};
use crate::error::{Result, StarError};
use crate::linalg::svd;
use crate::nn::Mlp;
use crate::tensor::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SvdSplit {
    /// `A = U_r Σ_r^{1/2}`, `B = Σ_r^{1/2} V_rᵀ`, so `A·B` is the best rank-r approximation.
    Sqrt,
    /// `A = U_r Σ_r`, `B = Σ_r V_rᵀ`.
    Squared,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterConfig {
    /// `r = d_in / rank_divisor`, clamped to `min(d_in, d_out)`.
    pub rank_divisor: usize,
    pub hidden: usize,
    pub epsilon: f64,
    pub svd_split: SvdSplit,
    /// Gain of `g1`'s output layer; keeps the initial `R_init` small.
    pub init_gain: f64,
    /// Adapted site ids; `None` adapts every site.
    pub sites: Option<Vec<usize>>,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            rank_divisor: 2,
            hidden: 32,
            epsilon: 0.05,
            svd_split: SvdSplit::Sqrt,
            init_gain: 0.1,
            sites: None,
        }
    }
}

impl AdapterConfig {
    pub fn rank_for(&self, d_in: usize, d_out: usize) -> Result<usize> {
        if self.rank_divisor == 0 {
            return Err(StarError::Config("rank divisor must be positive".into()));
        }
        Ok((d_in / self.rank_divisor).clamp(1, d_in.min(d_out)))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdapterFactorization {
    pub a: Mat,
    pub b: Mat,
    pub r: usize,
    pub site_id: usize,
}

pub fn decompose(
    w0: &Mat,
    r: usize,
    split: SvdSplit,
    site_id: usize,
) -> Result<AdapterFactorization> {
    let k = w0.rows.min(w0.cols);
    if r == 0 || r > k {
        return Err(StarError::Config(format!("rank {r} must lie in 1..={k}")));
    }
    let dec = svd(w0)?;
    let mut a = Mat::zeros(w0.rows, r);
    let mut b = Mat::zeros(r, w0.cols);
    for j in 0..r {
        let s = dec.sigma[j];
        let (sa, sb) = match split {
            SvdSplit::Sqrt => (s.sqrt(), s.sqrt()),
            SvdSplit::Squared => (s, s),
        };
        for i in 0..w0.rows {
            a.set(i, j, dec.u.get(i, j) * sa);
        }
        for c in 0..w0.cols {
            b.set(j, c, dec.vt.get(j, c) * sb);
        }
    }
    Ok(AdapterFactorization { a, b, r, site_id })
}

/// Plain-value generated parameters for one patch.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedParams {
    pub r_init: Mat,
    pub d: Vec<f64>,
    pub r_mask: Vec<f64>,
    pub gamma: f64,
    pub m: Vec<f64>,
    pub r: Mat,
    pub patch_index: usize,
}

/// `M = sigmoid((R_mask − Γ)/ε)` and `R = M ⊙ R_init` (row `k` scaled by `M_k`).
pub fn mask_rows(r_init: &Mat, r_mask: &[f64], gamma: f64, epsilon: f64) -> (Vec<f64>, Mat) {
    let m: Vec<f64> = r_mask
        .iter()
        .map(|&s| autograd::sigmoid((s - gamma) / epsilon))
        .collect();
    let mut r = r_init.clone();
    for (k, &mk) in m.iter().enumerate() {
        r.row_mut(k).iter_mut().for_each(|v| *v *= mk);
    }
    (m, r)
}

/// Generator triple for one site.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SiteGenerators {
    pub site_id: usize,
    pub r: usize,
    pub d_in: usize,
    pub d_out: usize,
    /// Frozen SVD factors, stored as parameters so they travel with checkpoints.
    pub a: ParamId,
    pub b: ParamId,
    pub g1: Mlp,
    pub g2: Mlp,
    pub g3: Mlp,
}

/// Per-slot mixing matrices and scalings for one site, as graph nodes.
pub struct SiteVars {
    /// `G·r × r`, rows `(slot, k)`.
    pub r: Var,
    /// `G × d_out`.
    pub d: Var,
    /// `G × r`.
    pub mask: Var,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConditionalAdapter {
    pub config: AdapterConfig,
    pub state_dim: usize,
    pub sites: Vec<SiteGenerators>,
}

impl ConditionalAdapter {
    /// Factor every selected host weight and create its generators.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        config: AdapterConfig,
        state_dim: usize,
        hosts: &[AdapterSite],
        rng: &mut R,
    ) -> Result<Self> {
        if !(config.epsilon > 0.0) {
            return Err(StarError::Config("adapter epsilon must be positive".into()));
        }
        let mut sites = Vec::new();
        for host in hosts {
            if config
                .sites
                .as_ref()
                .is_some_and(|s| !s.contains(&host.site_id))
            {
                continue;
            }
            let r = config.rank_for(host.d_in, host.d_out)?;
            let fac = decompose(store.get(host.host), r, config.svd_split, host.site_id)?;
            let name = format!("adapter.site{}", host.site_id);
            let a = store.add(format!("{name}.A"), fac.a);
            let b = store.add(format!("{name}.B"), fac.b);
            let g1 = Mlp::new(
                store,
                &format!("{name}.g1"),
                state_dim,
                config.hidden,
                r * r + host.d_out,
                2,
                config.init_gain,
                rng,
            );
            let d_bias = g1.output_bias().expect("generator layers carry a bias");
            store.get_mut(d_bias).data[r * r..]
                .iter_mut()
                .for_each(|v| *v = 1.0);
            let g2 = Mlp::new(
                store,
                &format!("{name}.g2"),
                state_dim,
                config.hidden,
                r,
                2,
                1.0,
                rng,
            );
            let g3 = Mlp::new(
                store,
                &format!("{name}.g3"),
                state_dim,
                config.hidden,
                1,
                2,
                1.0,
                rng,
            );
            sites.push(SiteGenerators {
                site_id: host.site_id,
                r,
                d_in: host.d_in,
                d_out: host.d_out,
                a,
                b,
                g1,
                g2,
                g3,
            });
        }
        Ok(Self {
            config,
            state_dim,
            sites,
        })
    }

    /// Trainable generator parameters (the SVD factors are excluded).
    pub fn params(&self) -> Vec<ParamId> {
        self.sites
            .iter()
            .flat_map(|s| [&s.g1, &s.g2, &s.g3])
            .flat_map(Mlp::params)
            .collect()
    }

    pub fn frozen_params(&self) -> Vec<ParamId> {
        self.sites.iter().flat_map(|s| [s.a, s.b]).collect()
    }

    pub fn site(&self, site_id: usize) -> Option<&SiteGenerators> {
        self.sites.iter().find(|s| s.site_id == site_id)
    }

    pub fn factorization(
        &self,
        store: &ParamStore,
        site_id: usize,
    ) -> Option<AdapterFactorization> {
        self.site(site_id).map(|s| AdapterFactorization {
            a: store.get(s.a).clone(),
            b: store.get(s.b).clone(),
            r: s.r,
            site_id,
        })
    }

    /// Generate per-slot parameters for every site from `s_patch` (`G × d`).
    pub fn generate_graph(&self, g: &mut Graph, store: &ParamStore, s_patch: Var) -> Vec<SiteVars> {
        let (slots, _) = g.shape(s_patch);
        self.sites
            .iter()
            .map(|s| {
                let out = s.g1.forward(g, store, s_patch);
                let r_init = g.slice_cols(out, 0, s.r * s.r);
                let d = g.slice_cols(out, s.r * s.r, s.r * s.r + s.d_out);
                let scores = s.g2.forward(g, store, s_patch);
                let gamma = s.g3.forward(g, store, s_patch);
                let neg = g.scale(gamma, -1.0);
                let centered = g.add_col(scores, neg);
                let z = g.scale(centered, 1.0 / self.config.epsilon);
                let mask = g.sigmoid(z);
                let rows = g.reshape(r_init, slots * s.r, s.r);
                let mask_col = g.reshape(mask, slots * s.r, 1);
                let r = g.mul_col(rows, mask_col);
                SiteVars { r, d, mask }
            })
            .collect()
    }

    /// Plain-value generation for one patch embedding.
    pub fn generate(
        &self,
        store: &ParamStore,
        site_id: usize,
        s_patch_t: &[f64],
        patch_index: usize,
    ) -> Result<GeneratedParams> {
        let s = self
            .site(site_id)
            .ok_or_else(|| StarError::Input(format!("no adapter at site {site_id}")))?;
        if s_patch_t.len() != self.state_dim {
            return Err(StarError::Shape(format!(
                "state embedding has {} entries, expected {}",
                s_patch_t.len(),
                self.state_dim
            )));
        }
        let x = Mat::row_vector(s_patch_t);
        let out = crate::nn::eval_mlp(&s.g1, store, &x);
        let r_init = Mat::from_vec(s.r, s.r, out.data[..s.r * s.r].to_vec());
        let d = out.data[s.r * s.r..].to_vec();
        let r_mask = crate::nn::eval_mlp(&s.g2, store, &x).data;
        let gamma = crate::nn::eval_mlp(&s.g3, store, &x).item();
        let (m, r) = mask_rows(&r_init, &r_mask, gamma, self.config.epsilon);
        Ok(GeneratedParams {
            r_init,
            d,
            r_mask,
            gamma,
            m,
            r,
            patch_index,
        })
    }

    /// Bind generated per-slot parameters so the backbone can apply them.
    pub fn bind(&self, generated: Vec<SiteVars>) -> BoundAdapter<'_> {
        BoundAdapter {
            adapter: self,
            generated,
        }
    }
}

pub struct BoundAdapter<'a> {
    adapter: &'a ConditionalAdapter,
    generated: Vec<SiteVars>,
}

impl BoundAdapter<'_> {
    pub fn site_vars(&self) -> &[SiteVars] {
        &self.generated
    }
}

impl SiteAdapter for BoundAdapter<'_> {
    fn delta(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        site: usize,
        x: Var,
        slots: &Rc<Vec<usize>>,
    ) -> Option<Var> {
        let k = self.adapter.sites.iter().position(|s| s.site_id == site)?;
        let s = &self.adapter.sites[k];
        let gen = &self.generated[k];
        let a = g.param(store, s.a);
        let b = g.param(store, s.b);
        let xa = g.matmul(x, a);
        let mixed = g.group_matmul(xa, gen.r, slots.clone());
        let out = g.matmul(mixed, b);
        let scale = g.gather_rows(gen.d, slots.clone());
        Some(g.mul(out, scale))
    }
}

/// `h = x·W0 + (((x·A)·R)·B) ⊙ D` without forming `ΔW`.
pub fn delta_apply(
    x: &[f64],
    fac: &AdapterFactorization,
    gp: &GeneratedParams,
    w0: &Mat,
) -> Result<Vec<f64>> {
    check_shapes(x, fac, gp, w0)?;
    let xv = Mat::row_vector(x);
    let base = xv.matmul(w0);
    let low = xv.matmul(&fac.a).matmul(&gp.r).matmul(&fac.b);
    Ok(base
        .data
        .iter()
        .zip(&low.data)
        .zip(&gp.d)
        .map(|((b, l), d)| b + l * d)
        .collect())
}

/// `ΔW = A·R·B` with column `j` scaled by `D_j`.
pub fn materialize(fac: &AdapterFactorization, gp: &GeneratedParams) -> Mat {
    let mut dw = fac.a.matmul(&gp.r).matmul(&fac.b);
    for i in 0..dw.rows {
        for (v, d) in dw.row_mut(i).iter_mut().zip(&gp.d) {
            *v *= d;
        }
    }
    dw
}

fn check_shapes(
    x: &[f64],
    fac: &AdapterFactorization,
    gp: &GeneratedParams,
    w0: &Mat,
) -> Result<()> {
    let ok = x.len() == w0.rows
        && fac.a.rows == w0.rows
        && fac.b.cols == w0.cols
        && gp.r.shape() == (fac.r, fac.r)
        && gp.d.len() == w0.cols;
    if ok {
        Ok(())
    } else {
        Err(StarError::Shape(format!(
            "x:{} W0:{}x{} A:{}x{} R:{}x{} B:{}x{} D:{}",
            x.len(),
            w0.rows,
            w0.cols,
            fac.a.rows,
            fac.a.cols,
            gp.r.rows,
            gp.r.cols,
            fac.b.rows,
            fac.b.cols,
            gp.d.len()
        )))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraFactors {
    pub a: Mat,
    pub b: Mat,
}

/// `A_l ~ N(0, 0.02²)`, `B_l = 0`.
pub fn lora_init<R: Rng + ?Sized>(w0: &Mat, r: usize, rng: &mut R) -> Result<LoraFactors> {
    let k = w0.rows.min(w0.cols);
    if r == 0 || r > k {
        return Err(StarError::Config(format!(
            "LoRA rank {r} must lie in 1..={k}"
        )));
    }
    Ok(LoraFactors {
        a: Mat::randn(w0.rows, r, 0.02, rng),
        b: Mat::zeros(r, w0.cols),
    })
}

pub fn lora_apply(x: &[f64], lf: &LoraFactors, w0: &Mat) -> Result<Vec<f64>> {
    if x.len() != w0.rows || lf.a.rows != w0.rows || lf.b.cols != w0.cols || lf.a.cols != lf.b.rows
    {
        return Err(StarError::Shape(
            "LoRA factor shapes do not match the host weight".into(),
        ));
    }
    let xv = Mat::row_vector(x);
    let mut h = xv.matmul(w0);
    h.add_assign(&xv.matmul(&lf.a).matmul(&lf.b));
    Ok(h.data)
}

/// Trainable LoRA factors on every backbone site.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LoraAdapter {
    /// `(site_id, A_l, B_l)`
    pub sites: Vec<(usize, ParamId, ParamId)>,
}

impl LoraAdapter {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        config: &AdapterConfig,
        hosts: &[AdapterSite],
        rng: &mut R,
    ) -> Result<Self> {
        let mut sites = Vec::new();
        for host in hosts {
            if config
                .sites
                .as_ref()
                .is_some_and(|s| !s.contains(&host.site_id))
            {
                continue;
            }
            let r = config.rank_for(host.d_in, host.d_out)?;
            let f = lora_init(store.get(host.host), r, rng)?;
            let a = store.add(format!("lora.site{}.A", host.site_id), f.a);
            let b = store.add(format!("lora.site{}.B", host.site_id), f.b);
            sites.push((host.site_id, a, b));
        }
        Ok(Self { sites })
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.sites.iter().flat_map(|&(_, a, b)| [a, b]).collect()
    }
}

impl SiteAdapter for LoraAdapter {
    fn delta(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        site: usize,
        x: Var,
        _: &Rc<Vec<usize>>,
    ) -> Option<Var> {
        let &(_, a, b) = self.sites.iter().find(|s| s.0 == site)?;
        let av = g.param(store, a);
        let bv = g.param(store, b);
        let xa = g.matmul(x, av);
        Some(g.matmul(xa, bv))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{numeric_rank, singular_values};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn diag(v: &[f64]) -> Mat {
        let mut m = Mat::zeros(v.len(), v.len());
        for (i, &x) in v.iter().enumerate() {
            m.set(i, i, x);
        }
        m
    }

    #[test]
    fn diagonal_truncation() {
        let f = decompose(&diag(&[3.0, 2.0, 1.0]), 2, SvdSplit::Sqrt, 0).unwrap();
        let ab = f.a.matmul(&f.b);
        assert!(ab.max_abs_diff(&diag(&[3.0, 2.0, 0.0])) < 1e-12);
        let resid = diag(&[3.0, 2.0, 1.0])
            .zip_map(&ab, |x, y| x - y)
            .frobenius_norm();
        assert!((resid - 1.0).abs() < 1e-12);
        assert!(matches!(
            decompose(&diag(&[1.0, 2.0]), 3, SvdSplit::Sqrt, 0),
            Err(StarError::Config(_))
        ));
        assert!(matches!(
            decompose(&diag(&[1.0, 2.0]), 0, SvdSplit::Sqrt, 0),
            Err(StarError::Config(_))
        ));
    }

    #[test]
    fn squared_split_squares_singular_values() {
        let f = decompose(&diag(&[3.0, 2.0]), 2, SvdSplit::Squared, 0).unwrap();
        assert!(f.a.matmul(&f.b).max_abs_diff(&diag(&[9.0, 4.0])) < 1e-12);
    }

    #[test]
    fn full_rank_reconstructs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = Mat::randn(6, 4, 1.0, &mut rng);
        let f = decompose(&w, 4, SvdSplit::Sqrt, 0).unwrap();
        assert!(f.a.matmul(&f.b).max_abs_diff(&w) < 1e-10);
    }

    fn params_with(
        r_init: Mat,
        d: Vec<f64>,
        r_mask: Vec<f64>,
        gamma: f64,
        eps: f64,
    ) -> GeneratedParams {
        let (m, r) = mask_rows(&r_init, &r_mask, gamma, eps);
        GeneratedParams {
            r_init,
            d,
            r_mask,
            gamma,
            m,
            r,
            patch_index: 0,
        }
    }

    #[test]
    fn mask_example() {
        let r_init = Mat::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let gp = params_with(r_init, vec![1.0], vec![1.0, -1.0], 0.0, 0.05);
        assert!((gp.m[0] - autograd::sigmoid(20.0)).abs() < 1e-15);
        assert!((gp.m[1] - 2.061_153_618_190_204_5e-9).abs() < 1e-20);
        assert!((gp.r.get(0, 1) - 2.0).abs() < 1e-8);
        assert!(gp.r.get(1, 0).abs() < 1e-8);
    }

    #[test]
    fn delta_apply_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w0 = Mat::randn(5, 3, 1.0, &mut rng);
        let x: Vec<f64> = (0..5).map(|i| i as f64 - 2.0).collect();
        let base = Mat::row_vector(&x).matmul(&w0).data;

        let fac = decompose(&w0, 3, SvdSplit::Sqrt, 0).unwrap();
        let zero = params_with(Mat::zeros(3, 3), vec![0.7; 3], vec![1.0; 3], 0.0, 0.05);
        assert_eq!(delta_apply(&x, &fac, &zero, &w0).unwrap(), base);

        let ident = GeneratedParams {
            r: Mat::identity(3),
            ..zero.clone()
        };
        let ident = GeneratedParams {
            d: vec![1.0; 3],
            ..ident
        };
        let h = delta_apply(&x, &fac, &ident, &w0).unwrap();
        for (a, b) in h.iter().zip(&base) {
            assert!((a - 2.0 * b).abs() < 1e-10);
        }
        assert!(delta_apply(&x[..4], &fac, &ident, &w0).is_err());
    }

    #[test]
    fn factored_path_matches_materialized() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w0 = Mat::randn(8, 6, 1.0, &mut rng);
        let fac = decompose(&w0, 3, SvdSplit::Sqrt, 0).unwrap();
        let gp = params_with(
            Mat::randn(3, 3, 1.0, &mut rng),
            Mat::randn(1, 6, 1.0, &mut rng).data,
            Mat::randn(1, 3, 1.0, &mut rng).data,
            0.1,
            0.05,
        );
        let dw = materialize(&fac, &gp);
        for _ in 0..20 {
            let x = Mat::randn(1, 8, 1.0, &mut rng);
            let mut expect = x.matmul(&w0);
            expect.add_assign(&x.matmul(&dw));
            let h = delta_apply(&x.data, &fac, &gp, &w0).unwrap();
            assert!(Mat::row_vector(&h).max_abs_diff(&expect) < 1e-10);
        }
        // column scaling cannot raise the rank of A·R·B
        let plain = fac.a.matmul(&gp.r).matmul(&fac.b);
        assert!(numeric_rank(&dw, 1e-9).unwrap() <= numeric_rank(&plain, 1e-9).unwrap());
    }

    #[test]
    fn lora_starts_neutral_and_respects_rank() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w0 = Mat::randn(6, 5, 1.0, &mut rng);
        let lf = lora_init(&w0, 2, &mut rng).unwrap();
        let x: Vec<f64> = (0..6).map(|i| 0.3 * i as f64).collect();
        assert_eq!(
            lora_apply(&x, &lf, &w0).unwrap(),
            Mat::row_vector(&x).matmul(&w0).data
        );
        assert!(matches!(
            lora_init(&w0, 0, &mut rng),
            Err(StarError::Config(_))
        ));
        let trained = LoraFactors {
            a: Mat::randn(6, 2, 1.0, &mut rng),
            b: Mat::randn(2, 5, 1.0, &mut rng),
        };
        let s = singular_values(&trained.a.matmul(&trained.b)).unwrap();
        assert!(s[2] < 1e-10 * s[0]);
    }

    #[test]
    fn distinct_states_give_distinct_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let w = store.add("host", Mat::randn(8, 6, 1.0, &mut rng));
        let hosts = [AdapterSite {
            site_id: 0,
            host: w,
            d_in: 8,
            d_out: 6,
        }];
        let ad = ConditionalAdapter::new(&mut store, AdapterConfig::default(), 4, &hosts, &mut rng)
            .unwrap();
        assert_eq!(ad.sites[0].r, 4);
        for _ in 0..10 {
            let s1 = Mat::randn(1, 4, 1.0, &mut rng).data;
            let s2 = Mat::randn(1, 4, 1.0, &mut rng).data;
            let p1 = ad.generate(&store, 0, &s1, 0).unwrap();
            let p2 = ad.generate(&store, 0, &s2, 0).unwrap();
            assert_ne!(p1.r_init, p2.r_init);
            assert_ne!(p1.d, p2.d);
            assert_ne!(p1.gamma, p2.gamma);
            assert!(p1.m.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn graph_generation_matches_plain() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        let w = store.add("host", Mat::randn(8, 6, 1.0, &mut rng));
        let hosts = [AdapterSite {
            site_id: 0,
            host: w,
            d_in: 8,
            d_out: 6,
        }];
        let ad = ConditionalAdapter::new(&mut store, AdapterConfig::default(), 4, &hosts, &mut rng)
            .unwrap();
        let s_patch = Mat::randn(3, 4, 1.0, &mut rng);
        let mut g = Graph::inference();
        let sp = g.constant(s_patch.clone());
        let vars = ad.generate_graph(&mut g, &store, sp);
        let bound = ad.bind(vars);
        let x = Mat::randn(5, 8, 1.0, &mut rng);
        let slots = Rc::new(vec![0, 2, 1, 1, 2]);
        let xv = g.constant(x.clone());
        let delta = bound.delta(&mut g, &store, 0, xv, &slots).unwrap();
        let delta = g.value(delta).clone();
        let fac = ad.factorization(&store, 0).unwrap();
        let w0 = store.get(w).clone();
        for (row, &slot) in slots.iter().enumerate() {
            let gp = ad.generate(&store, 0, s_patch.row(slot), slot).unwrap();
            let h = delta_apply(x.row(row), &fac, &gp, &w0).unwrap();
            let base = Mat::row_vector(x.row(row)).matmul(&w0);
            for (c, hc) in h.iter().enumerate().take(6) {
                assert!((hc - base.data[c] - delta.get(row, c)).abs() < 1e-10);
            }
        }
        assert!(bound.delta(&mut g, &store, 7, xv, &slots).is_none());
    }
}
