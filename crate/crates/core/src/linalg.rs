//! Thin SVD over [`Mat`], backed by nalgebra.

use nalgebra::DMatrix;

use crate::error::{Result, StarError};
use crate::tensor::Mat;

/// `m = u · diag(sigma) · vt`, singular values in descending order.
/// For `m: p×q` with `k = min(p, q)`: `u: p×k`, `vt: k×q`.
#[derive(Clone, Debug)]
pub struct Svd {
    pub u: Mat,
    pub sigma: Vec<f64>,
    pub vt: Mat,
}

pub fn svd(m: &Mat) -> Result<Svd> {
    let dm = DMatrix::from_row_slice(m.rows, m.cols, &m.data);
    let dec =
        nalgebra::linalg::SVD::try_new(dm, true, true, f64::EPSILON, 100_000).ok_or_else(|| {
            StarError::Numeric(format!(
                "SVD of a {}x{} matrix did not converge",
                m.rows, m.cols
            ))
        })?;
    let u = dec
        .u
        .ok_or_else(|| StarError::Numeric("SVD produced no U".into()))?;
    let vt = dec
        .v_t
        .ok_or_else(|| StarError::Numeric("SVD produced no Vᵀ".into()))?;
    let k = dec.singular_values.len();

    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| dec.singular_values[b].total_cmp(&dec.singular_values[a]));

    let mut um = Mat::zeros(m.rows, k);
    let mut vtm = Mat::zeros(k, m.cols);
    let mut sigma = Vec::with_capacity(k);
    for (dst, &src) in order.iter().enumerate() {
        sigma.push(dec.singular_values[src]);
        for r in 0..m.rows {
            um.set(r, dst, u[(r, src)]);
        }
        for c in 0..m.cols {
            vtm.set(dst, c, vt[(src, c)]);
        }
    }
    Ok(Svd {
        u: um,
        sigma,
        vt: vtm,
    })
}

/// Singular values only, descending.
pub fn singular_values(m: &Mat) -> Result<Vec<f64>> {
    Ok(svd(m)?.sigma)
}

/// Number of singular values above `rel_tol × σ_max`.
pub fn numeric_rank(m: &Mat, rel_tol: f64) -> Result<usize> {
    let s = singular_values(m)?;
    let top = s.first().copied().unwrap_or(0.0);
    if top == 0.0 {
        return Ok(0);
    }
    Ok(s.iter().filter(|&&v| v > rel_tol * top).count())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn reconstructs_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (r, c) in [(5, 3), (3, 5), (6, 6)] {
            let m = Mat::randn(r, c, 1.0, &mut rng);
            let d = svd(&m).unwrap();
            let k = d.sigma.len();
            let mut us = d.u.clone();
            for i in 0..r {
                for j in 0..k {
                    us.set(i, j, us.get(i, j) * d.sigma[j]);
                }
            }
            assert!(us.matmul(&d.vt).max_abs_diff(&m) < 1e-12);
            assert!(d.sigma.windows(2).all(|w| w[0] >= w[1]));
        }
    }

    #[test]
    fn rank_of_outer_product() {
        let a = Mat::col_vector(&[1.0, 2.0, 3.0]);
        let b = Mat::row_vector(&[1.0, -1.0, 0.5, 2.0]);
        assert_eq!(numeric_rank(&a.matmul(&b), 1e-10).unwrap(), 1);
        assert_eq!(numeric_rank(&Mat::zeros(3, 3), 1e-10).unwrap(), 0);
    }
}
