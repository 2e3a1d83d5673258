//! Small dense row-major matrices.
//!
//! Everything in this crate works on matrices no larger than a few rows and
//! columns (state dimension plus controller states), so the implementations
//! favour clarity over blocking or vectorization. The type is generic over
//! the scalar so the same containers hold plain numbers, tape variables and
//! intervals.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Mat<V = f64> {
    rows: usize,
    cols: usize,
    data: Vec<V>,
}

impl<V: Copy> Mat<V> {
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> V) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Mat { rows, cols, data }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<V>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "matrix data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Mat { rows, cols, data })
    }

    pub fn fill(rows: usize, cols: usize, v: V) -> Self {
        Mat { rows, cols, data: vec![v; rows * cols] }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> V {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: V) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[V] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[V] {
        &self.data
    }

    pub fn transpose(&self) -> Mat<V> {
        Mat::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }
}

impl Mat<f64> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat::fill(rows, cols, 0.0)
    }

    pub fn identity(n: usize) -> Self {
        Mat::from_fn(n, n, |r, c| if r == c { 1.0 } else { 0.0 })
    }

    pub fn mul(&self, other: &Mat<f64>) -> Mat<f64> {
        assert_eq!(self.cols, other.rows, "matrix product shape");
        Mat::from_fn(self.rows, other.cols, |r, c| {
            (0..self.cols).map(|k| self.get(r, k) * other.get(k, c)).sum()
        })
    }

    pub fn mat_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, x.len(), "matrix-vector shape");
        (0..self.rows)
            .map(|r| (0..self.cols).map(|c| self.get(r, c) * x[c]).sum())
            .collect()
    }

    pub fn add(&self, other: &Mat<f64>) -> Mat<f64> {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        Mat::from_fn(self.rows, self.cols, |r, c| self.get(r, c) + other.get(r, c))
    }

    pub fn sub(&self, other: &Mat<f64>) -> Mat<f64> {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        Mat::from_fn(self.rows, self.cols, |r, c| self.get(r, c) - other.get(r, c))
    }

    pub fn scale(&self, s: f64) -> Mat<f64> {
        Mat::from_fn(self.rows, self.cols, |r, c| s * self.get(r, c))
    }

    /// Symmetric part (A + Aᵀ)/2.
    pub fn sym(&self) -> Mat<f64> {
        assert!(self.is_square());
        Mat::from_fn(self.rows, self.cols, |r, c| 0.5 * (self.get(r, c) + self.get(c, r)))
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Quadratic form xᵀ A x.
    pub fn quad_form(&self, x: &[f64]) -> f64 {
        assert!(self.is_square() && self.rows == x.len());
        let mut acc = 0.0;
        for r in 0..self.rows {
            for c in 0..self.cols {
                acc += x[r] * self.get(r, c) * x[c];
            }
        }
        acc
    }

    /// Solves A X = B by Gauss-Jordan with partial pivoting.
    ///
    /// Also returns a Frobenius condition estimate ‖A‖·‖A⁻¹‖; callers that
    /// guard against near-singular systems check it against their threshold.
    pub fn solve(&self, b: &Mat<f64>, context: &'static str) -> Result<(Mat<f64>, f64)> {
        if !self.is_square() {
            return Err(Error::shape(format!("{context}: solve needs a square matrix")));
        }
        if self.rows != b.rows {
            return Err(Error::shape(format!("{context}: rhs rows {} != {}", b.rows, self.rows)));
        }
        let n = self.rows;
        // Augment with B and with I to recover the inverse for the estimate.
        let mut a = self.clone();
        let mut rhs = b.clone();
        let mut inv = Mat::identity(n);
        for col in 0..n {
            let mut piv = col;
            for r in col + 1..n {
                if a.get(r, col).abs() > a.get(piv, col).abs() {
                    piv = r;
                }
            }
            let p = a.get(piv, col);
            if p == 0.0 {
                return Err(Error::Singular { context, cond: f64::INFINITY });
            }
            if piv != col {
                for c in 0..n {
                    let (x, y) = (a.get(col, c), a.get(piv, c));
                    a.set(col, c, y);
                    a.set(piv, c, x);
                    let (x, y) = (inv.get(col, c), inv.get(piv, c));
                    inv.set(col, c, y);
                    inv.set(piv, c, x);
                }
                for c in 0..rhs.cols {
                    let (x, y) = (rhs.get(col, c), rhs.get(piv, c));
                    rhs.set(col, c, y);
                    rhs.set(piv, c, x);
                }
            }
            let inv_p = 1.0 / p;
            for c in 0..n {
                a.set(col, c, a.get(col, c) * inv_p);
                inv.set(col, c, inv.get(col, c) * inv_p);
            }
            for c in 0..rhs.cols {
                rhs.set(col, c, rhs.get(col, c) * inv_p);
            }
            for r in 0..n {
                if r == col {
                    continue;
                }
                let factor = a.get(r, col);
                if factor == 0.0 {
                    continue;
                }
                for c in 0..n {
                    a.set(r, c, a.get(r, c) - factor * a.get(col, c));
                    inv.set(r, c, inv.get(r, c) - factor * inv.get(col, c));
                }
                for c in 0..rhs.cols {
                    rhs.set(r, c, rhs.get(r, c) - factor * rhs.get(col, c));
                }
            }
        }
        let cond = self.frobenius() * inv.frobenius();
        Ok((rhs, cond))
    }

    pub fn inverse(&self, context: &'static str) -> Result<(Mat<f64>, f64)> {
        self.solve(&Mat::identity(self.rows), context)
    }

    /// Coefficients (c₁..cₙ) of det(λI − A) = λⁿ + c₁λⁿ⁻¹ + … + cₙ
    /// by the Faddeev–LeVerrier recurrence.
    pub fn char_poly(&self) -> Vec<f64> {
        assert!(self.is_square());
        let n = self.rows;
        let mut coeffs = Vec::with_capacity(n);
        let mut m = self.clone();
        for k in 1..=n {
            let c = -m.trace() / k as f64;
            coeffs.push(c);
            if k < n {
                for i in 0..n {
                    m.set(i, i, m.get(i, i) + c);
                }
                m = self.mul(&m);
            }
        }
        coeffs
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows).map(|i| self.get(i, i)).sum()
    }

    /// Eigenvalues of a general (possibly nonsymmetric) small matrix, as
    /// (re, im) pairs, via characteristic-polynomial root finding.
    pub fn eigenvalues(&self) -> Vec<(f64, f64)> {
        let coeffs = self.char_poly();
        poly_roots(&coeffs)
    }

    /// All eigenvalue real parts strictly below -tol.
    pub fn is_hurwitz(&self, tol: f64) -> bool {
        self.eigenvalues().iter().all(|&(re, _)| re < -tol)
    }
}

/// Roots of the monic polynomial λⁿ + c₁λⁿ⁻¹ + … + cₙ by Durand–Kerner.
pub fn poly_roots(coeffs: &[f64]) -> Vec<(f64, f64)> {
    let n = coeffs.len();
    if n == 0 {
        return Vec::new();
    }
    let eval = |z: (f64, f64)| -> (f64, f64) {
        let mut acc = (1.0, 0.0);
        for &c in coeffs {
            acc = cmul(acc, z);
            acc.0 += c;
        }
        acc
    };
    // Spread the starting points on a circle that encloses all roots.
    let bound = 1.0 + coeffs.iter().fold(0.0_f64, |m, c| m.max(c.abs()));
    let mut roots: Vec<(f64, f64)> = (0..n)
        .map(|k| {
            let ang = 2.0 * std::f64::consts::PI * (k as f64 + 0.25) / n as f64;
            (bound * ang.cos(), bound * ang.sin())
        })
        .collect();
    for _ in 0..400 {
        let mut shift = 0.0_f64;
        for i in 0..n {
            let mut denom = (1.0, 0.0);
            for j in 0..n {
                if i != j {
                    denom = cmul(denom, csub(roots[i], roots[j]));
                }
            }
            let dmag = denom.0 * denom.0 + denom.1 * denom.1;
            if dmag == 0.0 {
                continue;
            }
            let delta = cdiv(eval(roots[i]), denom);
            roots[i] = csub(roots[i], delta);
            shift = shift.max(delta.0.abs() + delta.1.abs());
        }
        if shift < 1e-14 * bound {
            break;
        }
    }
    roots
}

fn cmul(a: (f64, f64), b: (f64, f64)) -> (f64, f64) {
    (a.0 * b.0 - a.1 * b.1, a.0 * b.1 + a.1 * b.0)
}
fn csub(a: (f64, f64), b: (f64, f64)) -> (f64, f64) {
    (a.0 - b.0, a.1 - b.1)
}
fn cdiv(a: (f64, f64), b: (f64, f64)) -> (f64, f64) {
    let m = b.0 * b.0 + b.1 * b.1;
    ((a.0 * b.0 + a.1 * b.1) / m, (a.1 * b.0 - a.0 * b.1) / m)
}

/// Solves the continuous Lyapunov equation AᵀX + XA + C = 0 for symmetric C
/// by assembling the n²×n² linear system directly.
pub fn solve_lyapunov(a: &Mat<f64>, c: &Mat<f64>) -> Result<Mat<f64>> {
    let n = a.rows();
    if !a.is_square() || !c.is_square() || c.rows() != n {
        return Err(Error::shape("lyapunov: A and C must be square of equal size"));
    }
    let dim = n * n;
    let mut big = Mat::zeros(dim, dim);
    let mut rhs = Mat::zeros(dim, 1);
    for i in 0..n {
        for j in 0..n {
            let row = i * n + j;
            rhs.set(row, 0, -c.get(i, j));
            for k in 0..n {
                // (AᵀX)_{ij} = Σ_k A_{ki} X_{kj}
                let col = k * n + j;
                big.set(row, col, big.get(row, col) + a.get(k, i));
                // (XA)_{ij} = Σ_k X_{ik} A_{kj}
                let col = i * n + k;
                big.set(row, col, big.get(row, col) + a.get(k, j));
            }
        }
    }
    let (x, _cond) = big.solve(&rhs, "lyapunov")?;
    let mut out = Mat::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            out.set(i, j, x.get(i * n + j, 0));
        }
    }
    // The assembled system does not know C is symmetric; clean up roundoff.
    Ok(out.sym())
}
