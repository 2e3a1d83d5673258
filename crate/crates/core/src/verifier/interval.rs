//! Interval arithmetic with outward rounding.
//!
//! Endpoints are widened by one ulp after every operation, so enclosures
//! stay sound under floating-point rounding without directed-rounding mode
//! switches. Division by a zero-containing interval widens to the whole
//! line, which the branch-and-bound loop treats as "subdivide".

use crate::algebra::Algebra;
use std::f64::consts::{FRAC_PI_2, PI, TAU};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

pub const ENTIRE: Interval = Interval { lo: f64::NEG_INFINITY, hi: f64::INFINITY };

#[inline]
fn down(x: f64) -> f64 {
    if x.is_nan() {
        f64::NEG_INFINITY
    } else {
        x.next_down()
    }
}

#[inline]
fn up(x: f64) -> f64 {
    if x.is_nan() {
        f64::INFINITY
    } else {
        x.next_up()
    }
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Self {
        debug_assert!(lo <= hi, "bad interval [{lo}, {hi}]");
        Interval { lo, hi }
    }

    pub fn point(x: f64) -> Self {
        Interval { lo: x, hi: x }
    }

    pub fn is_finite(&self) -> bool {
        self.lo.is_finite() && self.hi.is_finite()
    }

    pub fn mid(&self) -> f64 {
        if !self.is_finite() {
            return 0.0;
        }
        0.5 * (self.lo + self.hi)
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn contains(&self, x: f64) -> bool {
        self.lo <= x && x <= self.hi
    }

    pub fn contains_interval(&self, other: &Interval) -> bool {
        self.lo <= other.lo && other.hi <= self.hi
    }

    /// sup |x| over the interval.
    pub fn max_abs(&self) -> f64 {
        self.lo.abs().max(self.hi.abs())
    }

    /// inf |x| over the interval.
    pub fn min_abs(&self) -> f64 {
        if self.contains(0.0) {
            0.0
        } else {
            self.lo.abs().min(self.hi.abs())
        }
    }

    pub fn add(self, o: Interval) -> Interval {
        Interval { lo: down(self.lo + o.lo), hi: up(self.hi + o.hi) }
    }

    pub fn sub(self, o: Interval) -> Interval {
        Interval { lo: down(self.lo - o.hi), hi: up(self.hi - o.lo) }
    }

    pub fn neg(self) -> Interval {
        Interval { lo: -self.hi, hi: -self.lo }
    }

    pub fn mul(self, o: Interval) -> Interval {
        if !self.is_finite() || !o.is_finite() {
            return ENTIRE;
        }
        let c = [self.lo * o.lo, self.lo * o.hi, self.hi * o.lo, self.hi * o.hi];
        let mut lo = c[0];
        let mut hi = c[0];
        for v in &c[1..] {
            lo = lo.min(*v);
            hi = hi.max(*v);
        }
        Interval { lo: down(lo), hi: up(hi) }
    }

    pub fn div(self, o: Interval) -> Interval {
        if !self.is_finite() || !o.is_finite() || o.contains(0.0) {
            return ENTIRE;
        }
        let c = [self.lo / o.lo, self.lo / o.hi, self.hi / o.lo, self.hi / o.hi];
        let mut lo = c[0];
        let mut hi = c[0];
        for v in &c[1..] {
            lo = lo.min(*v);
            hi = hi.max(*v);
        }
        Interval { lo: down(lo), hi: up(hi) }
    }

    /// Dependency-aware square: tight range of x², never negative.
    pub fn square(self) -> Interval {
        if !self.is_finite() {
            return Interval { lo: 0.0, hi: f64::INFINITY };
        }
        let (a, b) = (self.min_abs(), self.max_abs());
        Interval { lo: down(a * a).max(0.0), hi: up(b * b) }
    }

    pub fn scale(self, c: f64) -> Interval {
        self.mul(Interval::point(c))
    }

    pub fn tanh(self) -> Interval {
        Interval {
            lo: down(self.lo.tanh()).max(-1.0),
            hi: up(self.hi.tanh()).min(1.0),
        }
    }

    pub fn sin(self) -> Interval {
        if !self.is_finite() || self.width() >= TAU {
            return Interval { lo: -1.0, hi: 1.0 };
        }
        // Does offset + 2πk fall inside the (slightly inflated) interval?
        let hits = |offset: f64| -> bool {
            let k_lo = ((self.lo - offset) / TAU - 1e-12).ceil();
            let k_hi = ((self.hi - offset) / TAU + 1e-12).floor();
            k_lo <= k_hi
        };
        let slo = self.lo.sin();
        let shi = self.hi.sin();
        let mut lo = slo.min(shi);
        let mut hi = slo.max(shi);
        if hits(FRAC_PI_2) {
            hi = 1.0;
        }
        if hits(-FRAC_PI_2) {
            lo = -1.0;
        }
        Interval { lo: down(lo).max(-1.0), hi: up(hi).min(1.0) }
    }

    /// sin(x)/x extended with sinc(0) = 1; even and decreasing on [0, π].
    pub fn sinc(self) -> Interval {
        // Global bounds: sinc ≤ 1 everywhere, and the deepest minimum is
        // ≈ −0.21723 at |x| ≈ 4.493.
        const GLOBAL_MIN: f64 = -0.2180;
        if !self.is_finite() {
            return Interval { lo: GLOBAL_MIN, hi: 1.0 };
        }
        let a = self.min_abs();
        let b = self.max_abs();
        if b <= PI {
            Interval {
                lo: down(crate::algebra::sinc(b)).max(GLOBAL_MIN),
                hi: up(crate::algebra::sinc(a)).min(1.0),
            }
        } else {
            Interval { lo: GLOBAL_MIN, hi: 1.0 }
        }
    }

    pub fn hull(self, o: Interval) -> Interval {
        Interval { lo: self.lo.min(o.lo), hi: self.hi.max(o.hi) }
    }
}

/// Interval backend for the shared certificate formulas.
#[derive(Debug, Default, Clone, Copy)]
pub struct IntervalAlg;

impl Algebra for IntervalAlg {
    type V = Interval;

    fn constant(&mut self, c: f64) -> Interval {
        Interval::point(c)
    }
    fn add(&mut self, a: Interval, b: Interval) -> Interval {
        a.add(b)
    }
    fn sub(&mut self, a: Interval, b: Interval) -> Interval {
        a.sub(b)
    }
    fn mul(&mut self, a: Interval, b: Interval) -> Interval {
        a.mul(b)
    }
    fn div(&mut self, a: Interval, b: Interval) -> Interval {
        a.div(b)
    }
    fn neg(&mut self, a: Interval) -> Interval {
        a.neg()
    }
    fn square(&mut self, a: Interval) -> Interval {
        a.square()
    }
    fn tanh(&mut self, a: Interval) -> Interval {
        a.tanh()
    }
    fn sin(&mut self, a: Interval) -> Interval {
        a.sin()
    }
    fn sinc(&mut self, a: Interval) -> Interval {
        a.sinc()
    }
    /// Representative value for pivot selection only.
    fn value(&self, a: Interval) -> f64 {
        a.mid()
    }
}

/// Axis-aligned box over the state space.
#[derive(Debug, Clone, PartialEq)]
pub struct IntervalBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub depth: u32,
}

impl IntervalBox {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Self {
        debug_assert!(lo.iter().zip(&hi).all(|(a, b)| a <= b));
        IntervalBox { lo, hi, depth: 0 }
    }

    pub fn from_region(region: &[f64]) -> Self {
        IntervalBox::new(region.iter().map(|r| -r).collect(), region.to_vec())
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn intervals(&self) -> Vec<Interval> {
        self.lo.iter().zip(&self.hi).map(|(&a, &b)| Interval::new(a, b)).collect()
    }

    pub fn mid(&self) -> Vec<f64> {
        self.lo.iter().zip(&self.hi).map(|(a, b)| 0.5 * (a + b)).collect()
    }

    pub fn max_width(&self) -> f64 {
        self.lo.iter().zip(&self.hi).map(|(a, b)| b - a).fold(0.0, f64::max)
    }

    pub fn widest_axis(&self) -> usize {
        let mut best = 0;
        let mut w = f64::NEG_INFINITY;
        for i in 0..self.dim() {
            let wi = self.hi[i] - self.lo[i];
            if wi > w {
                w = wi;
                best = i;
            }
        }
        best
    }

    pub fn split(&self) -> (IntervalBox, IntervalBox) {
        let axis = self.widest_axis();
        let mid = 0.5 * (self.lo[axis] + self.hi[axis]);
        let mut left = self.clone();
        let mut right = self.clone();
        left.hi[axis] = mid;
        right.lo[axis] = mid;
        left.depth = self.depth + 1;
        right.depth = self.depth + 1;
        (left, right)
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .enumerate()
            .all(|(i, v)| self.lo[i] - 1e-12 <= *v && *v <= self.hi[i] + 1e-12)
    }

    /// inf of ‖x‖² over the box.
    pub fn min_norm_sq(&self) -> f64 {
        self.intervals().iter().map(|iv| iv.min_abs().powi(2)).sum()
    }

    /// sup of ‖x‖² over the box.
    pub fn max_norm_sq(&self) -> f64 {
        self.intervals().iter().map(|iv| iv.max_abs().powi(2)).sum()
    }

    /// The corner with the largest norm.
    pub fn farthest_corner(&self) -> Vec<f64> {
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(a, b)| if a.abs() >= b.abs() { *a } else { *b })
            .collect()
    }
}

/// Sound lower bound on the minimum eigenvalue of sym(W) over all W in the
/// entrywise interval matrix: the better of a Gershgorin bound and a
/// midpoint eigensolve corrected by the radius spectral bound (Weyl).
pub fn sym_eig_lower_bound(w: &crate::mat::Mat<Interval>) -> f64 {
    let n = w.rows();
    debug_assert!(w.is_square());
    // Symmetrize entrywise: the true sym(W) lives inside these intervals.
    let s = crate::mat::Mat::from_fn(n, n, |r, c| {
        w.get(r, c).add(w.get(c, r)).scale(0.5)
    });
    if s.data().iter().any(|iv| !iv.is_finite()) {
        return f64::NEG_INFINITY;
    }
    let mut gersh = f64::INFINITY;
    for i in 0..n {
        let mut row = s.get(i, i).lo;
        for j in 0..n {
            if j != i {
                row -= s.get(i, j).max_abs();
            }
        }
        gersh = gersh.min(row);
    }
    // Midpoint-radius route: λ_min(W) ≥ λ_min(Wc) − ρ(rad), and for a
    // nonnegative radius matrix ρ is below the max row sum.
    let wc = crate::mat::Mat::from_fn(n, n, |r, c| s.get(r, c).mid());
    let mut max_row_rad = 0.0_f64;
    for i in 0..n {
        let mut row = 0.0;
        for j in 0..n {
            let e = s.get(i, j);
            row += 0.5 * e.width() + (e.mid() - wc.get(i, j)).abs();
        }
        max_row_rad = max_row_rad.max(row);
    }
    let midrad = match crate::diffgraph::sym_min_eig(&wc) {
        Ok(lam) => lam - max_row_rad - 1e-12 * (1.0 + wc.max_abs()),
        Err(_) => f64::NEG_INFINITY,
    };
    gersh.max(midrad)
}

/// Matching upper bound on the maximum eigenvalue of sym(W).
pub fn sym_eig_upper_bound(w: &crate::mat::Mat<Interval>) -> f64 {
    let neg = crate::mat::Mat::from_fn(w.rows(), w.cols(), |r, c| w.get(r, c).neg());
    -sym_eig_lower_bound(&neg)
}
