//! Truncated SVD by one-sided (Hestenes) Jacobi rotations.
//!
//! The rotations orthogonalise the columns of whichever orientation of the
//! input has fewer columns, so the implicit Gram matrix is the small one.
//! Work is done in f64; results are rounded to f32.

use super::Tensor;
use crate::error::{Error, Result};

/// A rotation is skipped once `|<a_i, a_j>| <= SVD_TOLERANCE * |a_i| |a_j|`.
pub const SVD_TOLERANCE: f64 = 1e-10;
/// Sweep cap before reporting non-convergence.
pub const SVD_MAX_SWEEPS: usize = 100;

/// Leading `k` singular triplets: `a ~= u * diag(sigma) * v^T`.
#[derive(Debug, Clone)]
pub struct SvdResult {
    /// `[d1, k]`, orthonormal columns.
    pub u: Tensor,
    /// Non-increasing, non-negative.
    pub sigma: Vec<f32>,
    /// `[d2, k]`, orthonormal columns.
    pub v: Tensor,
}

impl SvdResult {
    pub fn rank(&self) -> usize {
        self.sigma.len()
    }

    /// `u * diag(sigma) * v^T`.
    pub fn reconstruct(&self) -> Tensor {
        let (d1, k) = (self.u.shape()[0], self.rank());
        let d2 = self.v.shape()[0];
        let mut out = vec![0.0f32; d1 * d2];
        for i in 0..d1 {
            for j in 0..d2 {
                let mut s = 0.0f64;
                for r in 0..k {
                    s += f64::from(self.u.data()[i * k + r])
                        * f64::from(self.sigma[r])
                        * f64::from(self.v.data()[j * k + r]);
                }
                out[i * d2 + j] = s as f32;
            }
        }
        Tensor::new(vec![d1, d2], out).expect("shape is consistent")
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Orthogonalises the columns of `cols` in place, accumulating the
/// rotations into `basis` (initially identity). Returns the sweep count.
fn hestenes(cols: &mut [Vec<f64>], basis: &mut [Vec<f64>]) -> Result<usize> {
    let n = cols.len();
    for sweep in 1..=SVD_MAX_SWEEPS {
        let mut rotated = false;
        for i in 0..n {
            for j in i + 1..n {
                let alpha = dot(&cols[i], &cols[i]);
                let beta = dot(&cols[j], &cols[j]);
                let gamma = dot(&cols[i], &cols[j]);
                if alpha == 0.0 || beta == 0.0 || gamma.abs() <= SVD_TOLERANCE * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(cols, i, j, c, s);
                rotate(basis, i, j, c, s);
            }
        }
        if !rotated {
            return Ok(sweep);
        }
    }
    Err(Error::Numerical(format!(
        "Jacobi SVD did not converge within {SVD_MAX_SWEEPS} sweeps"
    )))
}

fn rotate(cols: &mut [Vec<f64>], i: usize, j: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(j);
    for (a, b) in lo[i].iter_mut().zip(hi[0].iter_mut()) {
        let (x, y) = (*a, *b);
        *a = c * x - s * y;
        *b = s * x + c * y;
    }
}

/// Gram-Schmidt completion: returns a unit vector orthogonal to `taken`.
fn orthogonal_complement(taken: &[Vec<f64>], dim: usize) -> Vec<f64> {
    let mut best: Option<(f64, Vec<f64>)> = None;
    for e in 0..dim {
        let mut v = vec![0.0; dim];
        v[e] = 1.0;
        for _ in 0..2 {
            for t in taken {
                let p = dot(&v, t);
                for (vi, ti) in v.iter_mut().zip(t) {
                    *vi -= p * ti;
                }
            }
        }
        let norm = dot(&v, &v).sqrt();
        if norm > 0.5 {
            return v.into_iter().map(|x| x / norm).collect();
        }
        if best.as_ref().is_none_or(|(b, _)| norm > *b) {
            best = Some((norm, v));
        }
    }
    let (norm, v) = best.expect("dim > 0");
    v.into_iter().map(|x| x / norm).collect()
}

/// Best rank-`k` approximation factors of a `[d1, d2]` matrix.
pub fn truncated_svd(a: &Tensor, k: usize) -> Result<SvdResult> {
    let (d1, d2) = a.dims2()?;
    if k == 0 || k > d1.min(d2) {
        return Err(Error::Parameter(format!(
            "rank {k} outside [1, {}] for a {d1}x{d2} matrix",
            d1.min(d2)
        )));
    }
    if !a.all_finite() {
        return Err(Error::Numerical("SVD input contains non-finite values".into()));
    }
    let transposed = d1 < d2;
    let (rows, ncols) = if transposed { (d2, d1) } else { (d1, d2) };
    let at = |r: usize, c: usize| -> f64 {
        if transposed {
            f64::from(a.data()[c * d2 + r])
        } else {
            f64::from(a.data()[r * d2 + c])
        }
    };
    let mut cols: Vec<Vec<f64>> = (0..ncols)
        .map(|c| (0..rows).map(|r| at(r, c)).collect())
        .collect();
    let mut basis: Vec<Vec<f64>> = (0..ncols)
        .map(|c| (0..ncols).map(|r| if r == c { 1.0 } else { 0.0 }).collect())
        .collect();
    hestenes(&mut cols, &mut basis)?;

    let norms: Vec<f64> = cols.iter().map(|c| dot(c, c).sqrt()).collect();
    let mut order: Vec<usize> = (0..ncols).collect();
    // Stable: equal values keep column order.
    order.sort_by(|&x, &y| norms[y].total_cmp(&norms[x]));
    let top = norms[order[0]];
    let negligible = top * 1e-12 * rows.max(ncols) as f64;

    let mut left: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut right: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut sigma = Vec::with_capacity(k);
    for &c in order.iter().take(k) {
        let s = norms[c];
        if s > negligible && s > 0.0 {
            left.push(cols[c].iter().map(|x| x / s).collect());
            sigma.push(s);
        } else {
            left.push(orthogonal_complement(&left, rows));
            sigma.push(0.0);
        }
        right.push(basis[c].clone());
    }

    let pack = |vecs: &[Vec<f64>], dim: usize| -> Tensor {
        let mut data = vec![0.0f32; dim * k];
        for (j, v) in vecs.iter().enumerate() {
            for (i, x) in v.iter().enumerate() {
                data[i * k + j] = *x as f32;
            }
        }
        Tensor::new(vec![dim, k], data).expect("consistent shape")
    };
    let (u, v) = if transposed {
        (pack(&right, d1), pack(&left, d2))
    } else {
        (pack(&left, d1), pack(&right, d2))
    };
    Ok(SvdResult {
        u,
        sigma: sigma.into_iter().map(|s| s as f32).collect(),
        v,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::matmul;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn diag(values: &[f32]) -> Tensor {
        let n = values.len();
        Tensor::from_fn(&[n, n], |i| if i / n == i % n { values[i / n] } else { 0.0 })
    }

    fn max_orth_error(q: &Tensor) -> f32 {
        let g = matmul(&q.transpose2().unwrap(), q).unwrap();
        g.sub(&Tensor::identity(g.shape()[0])).unwrap().max_abs()
    }

    /// Classical two-sided Jacobi eigenvalue iteration on a symmetric f64
    /// matrix; independent of the one-sided routine under test.
    fn jacobi_eigenvalues(mut m: Vec<Vec<f64>>) -> Vec<f64> {
        let n = m.len();
        for _ in 0..200 {
            let off: f64 = (0..n)
                .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
                .map(|(i, j)| m[i][j] * m[i][j])
                .sum();
            if off < 1e-30 {
                break;
            }
            for p in 0..n {
                for q in p + 1..n {
                    if m[p][q].abs() < 1e-300 {
                        continue;
                    }
                    let theta = (m[q][q] - m[p][p]) / (2.0 * m[p][q]);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let (mkp, mkq) = (m[k][p], m[k][q]);
                        m[k][p] = c * mkp - s * mkq;
                        m[k][q] = s * mkp + c * mkq;
                    }
                    for k in 0..n {
                        let (mpk, mqk) = (m[p][k], m[q][k]);
                        m[p][k] = c * mpk - s * mqk;
                        m[q][k] = s * mpk + c * mqk;
                    }
                }
            }
        }
        let mut ev: Vec<f64> = (0..n).map(|i| m[i][i]).collect();
        ev.sort_by(|a, b| b.total_cmp(a));
        ev
    }

    #[test]
    fn diagonal_rank_two() {
        let r = truncated_svd(&diag(&[3.0, 2.0, 1.0]), 2).unwrap();
        assert_eq!(r.sigma.len(), 2);
        assert!((r.sigma[0] - 3.0).abs() < 1e-6 && (r.sigma[1] - 2.0).abs() < 1e-6);
        let rec = r.reconstruct();
        let expect = diag(&[3.0, 2.0, 0.0]);
        assert!(rec.sub(&expect).unwrap().max_abs() < 1e-6);
    }

    #[test]
    fn full_rank_reconstructs_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &(d1, d2) in &[(5, 3), (3, 5), (4, 4)] {
            let a = Tensor::from_fn(&[d1, d2], |_| rng.random_range(-1.0..1.0));
            let r = truncated_svd(&a, d1.min(d2)).unwrap();
            assert!(r.reconstruct().sub(&a).unwrap().max_abs() <= 1e-6);
            assert!(max_orth_error(&r.u) <= 1e-5);
            assert!(max_orth_error(&r.v) <= 1e-5);
        }
    }

    #[test]
    fn sigma_matches_gram_eigenvalues() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let a = Tensor::from_fn(&[6, 4], |_| rng.random_range(-1.0..1.0));
        let gram: Vec<Vec<f64>> = (0..4)
            .map(|i| {
                (0..4)
                    .map(|j| {
                        (0..6)
                            .map(|r| f64::from(a.at2(r, i)) * f64::from(a.at2(r, j)))
                            .sum()
                    })
                    .collect()
            })
            .collect();
        let ev = jacobi_eigenvalues(gram);
        let r = truncated_svd(&a, 2).unwrap();
        for i in 0..2 {
            let expect = ev[i].sqrt();
            let rel = (f64::from(r.sigma[i]) - expect).abs() / expect;
            assert!(rel <= 1e-6, "sigma {i}: {} vs {expect}", r.sigma[i]);
        }
    }

    #[test]
    fn residual_matches_tail_singular_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let a = Tensor::from_fn(&[7, 5], |_| rng.random_range(-1.0..1.0));
        let full = truncated_svd(&a, 5).unwrap();
        let r = truncated_svd(&a, 2).unwrap();
        let residual = a.sub(&r.reconstruct()).unwrap().frobenius();
        let tail: f64 = full.sigma[2..]
            .iter()
            .map(|&s| f64::from(s) * f64::from(s))
            .sum::<f64>()
            .sqrt();
        assert!((residual - tail).abs() / tail <= 1e-5);
    }

    #[test]
    fn rank_deficient_completes_orthonormal_u() {
        // Rank one 4x3 matrix, ask for all three triplets.
        let a = Tensor::from_fn(&[4, 3], |i| ((i / 3) + 1) as f32 * ((i % 3) + 1) as f32);
        let r = truncated_svd(&a, 3).unwrap();
        assert!(r.sigma[1].abs() < 1e-5 && r.sigma[2].abs() < 1e-5);
        assert!(max_orth_error(&r.u) <= 1e-5);
        assert!(max_orth_error(&r.v) <= 1e-5);
    }

    #[test]
    fn rank_out_of_range() {
        let a = Tensor::zeros(&[3, 2]);
        assert!(matches!(truncated_svd(&a, 0), Err(Error::Parameter(_))));
        assert!(matches!(truncated_svd(&a, 3), Err(Error::Parameter(_))));
    }

    #[test]
    fn ties_keep_column_order() {
        let r = truncated_svd(&Tensor::identity(3), 3).unwrap();
        assert_eq!(r.v.data(), Tensor::identity(3).data());
    }
}
