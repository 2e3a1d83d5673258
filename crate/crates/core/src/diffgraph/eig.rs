//! Symmetric eigensolver by cyclic Jacobi rotations.
//!
//! Matrices here never exceed a handful of rows (state dimension plus one),
//! where Jacobi converges unconditionally and needs no external dependency.

use crate::error::{Error, Result};
use crate::mat::Mat;

const MAX_SWEEPS: usize = 50;

/// Eigen-decomposition of the symmetric part of `a`.
///
/// Returns the eigenvalues and a matrix whose columns are the matching
/// eigenvectors. The input is symmetrized as (A + Aᵀ)/2 first.
pub fn jacobi_eigh(a: &Mat<f64>) -> Result<(Vec<f64>, Mat<f64>)> {
    if !a.is_square() {
        return Err(Error::shape(format!("eigensolve needs a square matrix, got {}x{}", a.rows(), a.cols())));
    }
    let n = a.rows();
    let mut m = a.sym();
    let mut v = Mat::identity(n);
    if n == 1 {
        return Ok((vec![m.get(0, 0)], v));
    }
    let scale = m.max_abs().max(1.0);
    let tol = 1e-15 * scale;
    for _ in 0..MAX_SWEEPS {
        let mut off = 0.0;
        for p in 0..n - 1 {
            for q in p + 1..n {
                off += m.get(p, q).abs();
            }
        }
        if off <= tol {
            return Ok(((0..n).map(|i| m.get(i, i)).collect(), v));
        }
        for p in 0..n - 1 {
            for q in p + 1..n {
                let apq = m.get(p, q);
                if apq.abs() <= tol * 1e-3 {
                    continue;
                }
                let app = m.get(p, p);
                let aqq = m.get(q, q);
                let theta = 0.5 * (aqq - app) / apq;
                let t = if theta.abs() > 1e12 {
                    0.5 / theta
                } else {
                    let s = theta.signum();
                    s / (theta.abs() + (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                // Apply the rotation on rows/cols p and q.
                for k in 0..n {
                    let mkp = m.get(k, p);
                    let mkq = m.get(k, q);
                    m.set(k, p, c * mkp - s * mkq);
                    m.set(k, q, s * mkp + c * mkq);
                }
                for k in 0..n {
                    let mpk = m.get(p, k);
                    let mqk = m.get(q, k);
                    m.set(p, k, c * mpk - s * mqk);
                    m.set(q, k, s * mpk + c * mqk);
                }
                for k in 0..n {
                    let vkp = v.get(k, p);
                    let vkq = v.get(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }
    Err(Error::numeric("Jacobi sweep did not converge"))
}

/// Largest eigenvalue of sym(A) and a unit eigenvector.
///
/// When the top eigenvalue is repeated, the eigenvector of the first
/// attained maximum in sweep order is returned; uuᵀ is then one valid
/// subgradient of λ_max.
pub fn sym_max_eig(a: &Mat<f64>) -> Result<(f64, Vec<f64>)> {
    let (vals, vecs) = jacobi_eigh(a)?;
    let mut best = 0;
    for (i, v) in vals.iter().enumerate() {
        if *v > vals[best] {
            best = i;
        }
    }
    let u: Vec<f64> = (0..a.rows()).map(|r| vecs.get(r, best)).collect();
    Ok((vals[best], u))
}

pub fn sym_min_eig(a: &Mat<f64>) -> Result<f64> {
    let (vals, _) = jacobi_eigh(a)?;
    Ok(vals.into_iter().fold(f64::INFINITY, f64::min))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mat::poly_roots;

    #[test]
    fn diagonal_matrix() {
        let a = Mat::from_vec(2, 2, vec![1.0, 0.0, 0.0, 2.0]).unwrap();
        let (l, u) = sym_max_eig(&a).unwrap();
        assert!((l - 2.0).abs() < 1e-14);
        assert!(u[0].abs() < 1e-12 && (u[1].abs() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn off_diagonal_2x2() {
        let a = Mat::from_vec(2, 2, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let (l, _) = sym_max_eig(&a).unwrap();
        assert!((l - 1.0).abs() < 1e-14);
    }

    #[test]
    fn non_square_rejected() {
        let a = Mat::<f64>::fill(2, 3, 1.0);
        assert!(matches!(sym_max_eig(&a), Err(Error::Shape(_))));
    }

    #[test]
    fn random_4x4_matches_char_poly_roots() {
        // Independent oracle: eigenvalues as roots of det(λI − A) computed
        // by the characteristic polynomial, not by rotations.
        let mut state = 0x9e3779b97f4a7c15u64;
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        };
        for _ in 0..20 {
            let raw = Mat::from_fn(4, 4, |_, _| next());
            let a = raw.sym();
            let (vals, vecs) = jacobi_eigh(&a).unwrap();
            let mut got = vals.clone();
            got.sort_by(|x, y| x.partial_cmp(y).unwrap());
            let mut expect: Vec<f64> = poly_roots(&a.char_poly()).iter().map(|r| r.0).collect();
            expect.sort_by(|x, y| x.partial_cmp(y).unwrap());
            for (g, e) in got.iter().zip(&expect) {
                assert!((g - e).abs() < 1e-9, "{g} vs {e}");
            }
            // Residual check A u = λ u for the top pair.
            let (l, u) = sym_max_eig(&a).unwrap();
            let au = a.mat_vec(&u);
            for i in 0..4 {
                assert!((au[i] - l * u[i]).abs() < 1e-10);
            }
            let _ = vecs;
        }
    }

    #[test]
    fn rayleigh_quotient_never_exceeds_top_eigenvalue() {
        let a = Mat::from_vec(
            3,
            3,
            vec![2.0, -0.3, 0.5, -0.3, 1.0, 0.7, 0.5, 0.7, -1.0],
        )
        .unwrap();
        let (l, _) = sym_max_eig(&a).unwrap();
        let mut state = 7u64;
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        };
        for _ in 0..10_000 {
            let v = [next(), next(), next()];
            let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            if norm < 1e-9 {
                continue;
            }
            let u: Vec<f64> = v.iter().map(|x| x / norm).collect();
            let q = a.quad_form(&u);
            assert!(q <= l + 1e-9);
        }
    }
}
