//! Scalar algebra abstraction.
//!
//! The certificate formulas (network forwards, storage gradients, supply
//! rates, block matrices, controllers) are written once against this trait
//! and evaluated in three ways: on plain `f64`, on a gradient tape, and on
//! intervals inside the verifier. Keeping a single code path is what makes
//! the finite-difference and enclosure checks meaningful — every backend
//! computes the same expression.

use crate::mat::Mat;

pub trait Algebra {
    type V: Copy;

    /// A value that derivatives are not tracked through.
    fn constant(&mut self, c: f64) -> Self::V;
    fn add(&mut self, a: Self::V, b: Self::V) -> Self::V;
    fn sub(&mut self, a: Self::V, b: Self::V) -> Self::V;
    fn mul(&mut self, a: Self::V, b: Self::V) -> Self::V;
    fn div(&mut self, a: Self::V, b: Self::V) -> Self::V;
    fn neg(&mut self, a: Self::V) -> Self::V;
    /// Dependency-aware square (an interval backend must not treat x·x
    /// as a product of independent factors).
    fn square(&mut self, a: Self::V) -> Self::V;
    fn tanh(&mut self, a: Self::V) -> Self::V;
    fn sin(&mut self, a: Self::V) -> Self::V;
    /// sin(x)/x extended with sinc(0) = 1.
    fn sinc(&mut self, a: Self::V) -> Self::V;

    /// Representative concrete value (tape: recorded value, interval:
    /// midpoint). Used for pivot selection, never for results.
    fn value(&self, a: Self::V) -> f64;

    /// Fused Σ wᵢ·xᵢ + b. Backends may override to build one node.
    fn dot_affine(&mut self, ws: &[Self::V], xs: &[Self::V], b: Self::V) -> Self::V {
        debug_assert_eq!(ws.len(), xs.len());
        let mut acc = b;
        for (w, x) in ws.iter().zip(xs) {
            let p = self.mul(*w, *x);
            acc = self.add(acc, p);
        }
        acc
    }

    fn scale(&mut self, c: f64, a: Self::V) -> Self::V {
        let cv = self.constant(c);
        self.mul(cv, a)
    }

    fn sum(&mut self, terms: &[Self::V]) -> Self::V {
        let mut acc = self.constant(0.0);
        for t in terms {
            acc = self.add(acc, *t);
        }
        acc
    }
}

/// Extra operations needed by the training losses but meaningless for the
/// interval backend.
pub trait LossAlgebra: Algebra {
    fn relu(&mut self, a: Self::V) -> Self::V;
    /// Largest eigenvalue of the symmetric part of `a`, with the uuᵀ
    /// subgradient registered where the backend tracks derivatives.
    fn sym_max_eig(&mut self, a: &Mat<Self::V>) -> Self::V;
}

/// Plain f64 evaluation.
#[derive(Debug, Default, Clone, Copy)]
pub struct ConcreteAlg;

impl Algebra for ConcreteAlg {
    type V = f64;

    fn constant(&mut self, c: f64) -> f64 {
        c
    }
    fn add(&mut self, a: f64, b: f64) -> f64 {
        a + b
    }
    fn sub(&mut self, a: f64, b: f64) -> f64 {
        a - b
    }
    fn mul(&mut self, a: f64, b: f64) -> f64 {
        a * b
    }
    fn div(&mut self, a: f64, b: f64) -> f64 {
        a / b
    }
    fn neg(&mut self, a: f64) -> f64 {
        -a
    }
    fn square(&mut self, a: f64) -> f64 {
        a * a
    }
    fn tanh(&mut self, a: f64) -> f64 {
        a.tanh()
    }
    fn sin(&mut self, a: f64) -> f64 {
        a.sin()
    }
    fn sinc(&mut self, a: f64) -> f64 {
        sinc(a)
    }
    fn value(&self, a: f64) -> f64 {
        a
    }
}

impl LossAlgebra for ConcreteAlg {
    fn relu(&mut self, a: f64) -> f64 {
        a.max(0.0)
    }
    fn sym_max_eig(&mut self, a: &Mat<f64>) -> f64 {
        crate::diffgraph::sym_max_eig(a).expect("square symmetric input").0
    }
}

pub fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-4 {
        // Taylor expansion; error below 1e-18 on this range.
        1.0 - x * x / 6.0
    } else {
        x.sin() / x
    }
}

// ---------------------------------------------------------------------------
// Generic matrix helpers over an algebra.
// ---------------------------------------------------------------------------

pub fn mat_vec<A: Algebra>(alg: &mut A, m: &Mat<A::V>, x: &[A::V]) -> Vec<A::V> {
    assert_eq!(m.cols(), x.len());
    let zero = alg.constant(0.0);
    (0..m.rows()).map(|r| alg.dot_affine(m.row(r), x, zero)).collect()
}

pub fn mat_mul<A: Algebra>(alg: &mut A, a: &Mat<A::V>, b: &Mat<A::V>) -> Mat<A::V> {
    assert_eq!(a.cols(), b.rows());
    let bt = b.transpose();
    let zero = alg.constant(0.0);
    Mat::from_fn(a.rows(), b.cols(), |r, c| alg.dot_affine(a.row(r), bt.row(c), zero))
}

pub fn mat_add<A: Algebra>(alg: &mut A, a: &Mat<A::V>, b: &Mat<A::V>) -> Mat<A::V> {
    Mat::from_fn(a.rows(), a.cols(), |r, c| alg.add(a.get(r, c), b.get(r, c)))
}

pub fn mat_sub<A: Algebra>(alg: &mut A, a: &Mat<A::V>, b: &Mat<A::V>) -> Mat<A::V> {
    Mat::from_fn(a.rows(), a.cols(), |r, c| alg.sub(a.get(r, c), b.get(r, c)))
}

pub fn mat_neg<A: Algebra>(alg: &mut A, a: &Mat<A::V>) -> Mat<A::V> {
    Mat::from_fn(a.rows(), a.cols(), |r, c| alg.neg(a.get(r, c)))
}

/// (A + Aᵀ)/2.
pub fn mat_sym<A: Algebra>(alg: &mut A, a: &Mat<A::V>) -> Mat<A::V> {
    assert!(a.is_square());
    Mat::from_fn(a.rows(), a.cols(), |r, c| {
        let s = alg.add(a.get(r, c), a.get(c, r));
        alg.scale(0.5, s)
    })
}

pub fn dot<A: Algebra>(alg: &mut A, a: &[A::V], b: &[A::V]) -> A::V {
    let zero = alg.constant(0.0);
    alg.dot_affine(a, b, zero)
}

/// xᵀ M x with dependency-aware diagonal squares.
pub fn quad_form<A: Algebra>(alg: &mut A, x: &[A::V], m: &Mat<A::V>) -> A::V {
    assert!(m.is_square() && m.rows() == x.len());
    let mut terms = Vec::with_capacity(x.len() * x.len());
    for r in 0..m.rows() {
        for c in 0..m.cols() {
            let xx = if r == c {
                alg.square(x[r])
            } else {
                alg.mul(x[r], x[c])
            };
            terms.push(alg.mul(xx, m.get(r, c)));
        }
    }
    alg.sum(&terms)
}

/// Solves A X = B by Gauss-Jordan; pivots are chosen on representative
/// values, the arithmetic itself stays inside the algebra.
pub fn solve_gauss<A: Algebra>(alg: &mut A, a: &Mat<A::V>, b: &Mat<A::V>) -> Mat<A::V> {
    assert!(a.is_square() && a.rows() == b.rows());
    let n = a.rows();
    let mut a = a.clone();
    let mut rhs = b.clone();
    for col in 0..n {
        let mut piv = col;
        for r in col + 1..n {
            if alg.value(a.get(r, col)).abs() > alg.value(a.get(piv, col)).abs() {
                piv = r;
            }
        }
        if piv != col {
            for c in 0..n {
                let (x, y) = (a.get(col, c), a.get(piv, c));
                a.set(col, c, y);
                a.set(piv, c, x);
            }
            for c in 0..rhs.cols() {
                let (x, y) = (rhs.get(col, c), rhs.get(piv, c));
                rhs.set(col, c, y);
                rhs.set(piv, c, x);
            }
        }
        let p = a.get(col, col);
        for c in 0..n {
            let v = alg.div(a.get(col, c), p);
            a.set(col, c, v);
        }
        for c in 0..rhs.cols() {
            let v = alg.div(rhs.get(col, c), p);
            rhs.set(col, c, v);
        }
        for r in 0..n {
            if r == col {
                continue;
            }
            let factor = a.get(r, col);
            for c in 0..n {
                let t = alg.mul(factor, a.get(col, c));
                let v = alg.sub(a.get(r, c), t);
                a.set(r, c, v);
            }
            for c in 0..rhs.cols() {
                let t = alg.mul(factor, rhs.get(col, c));
                let v = alg.sub(rhs.get(r, c), t);
                rhs.set(r, c, v);
            }
        }
    }
    rhs
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generic_solve_matches_direct() {
        let mut alg = ConcreteAlg;
        let a = Mat::from_vec(2, 2, vec![3.0, 1.0, 1.0, 2.0]).unwrap();
        let b = Mat::from_vec(2, 1, vec![5.0, 5.0]).unwrap();
        let x = solve_gauss(&mut alg, &a, &b);
        assert!((x.get(0, 0) - 1.0).abs() < 1e-12);
        assert!((x.get(1, 0) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn quad_form_concrete() {
        let mut alg = ConcreteAlg;
        let m = Mat::from_vec(2, 2, vec![1.0, 2.0, 0.0, 3.0]).unwrap();
        let got = quad_form(&mut alg, &[1.0, 2.0], &m);
        assert!((got - (1.0 + 4.0 + 12.0)).abs() < 1e-12);
    }

    #[test]
    fn sinc_matches_sin_over_x() {
        assert!((sinc(0.5) - 0.5_f64.sin() / 0.5).abs() < 1e-15);
        assert!((sinc(0.0) - 1.0).abs() < 1e-15);
        assert!((sinc(1e-5) - (1.0 - 1e-10 / 6.0)).abs() < 1e-15);
    }
}
