//! Reverse-mode gradient tape.
//!
//! A flat Wengert list: each node stores its forward value and edges to its
//! parents with local partial derivatives. Push order is the topological
//! order, so one reverse sweep over the node list accumulates every adjoint
//! exactly once.

use crate::algebra::{Algebra, LossAlgebra};
use crate::error::{Error, Result};
use crate::mat::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(u32);

impl Var {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    vals: Vec<f64>,
    starts: Vec<u32>,
    edges: Vec<(u32, f64)>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { vals: Vec::new(), starts: vec![0], edges: Vec::new() }
    }

    pub fn with_capacity(nodes: usize, edges: usize) -> Self {
        let mut t = Tape {
            vals: Vec::with_capacity(nodes),
            starts: Vec::with_capacity(nodes + 1),
            edges: Vec::with_capacity(edges),
        };
        t.starts.push(0);
        t
    }

    pub fn len(&self) -> usize {
        self.vals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vals.is_empty()
    }

    /// Registers an input node (parameter or data point).
    pub fn leaf(&mut self, value: f64) -> Var {
        self.push(value, &[])
    }

    #[inline]
    pub fn val(&self, v: Var) -> f64 {
        self.vals[v.index()]
    }

    fn push(&mut self, value: f64, parents: &[(Var, f64)]) -> Var {
        let idx = self.vals.len() as u32;
        self.vals.push(value);
        for &(p, d) in parents {
            debug_assert!((p.0) < idx, "parents must precede the node");
            self.edges.push((p.0, d));
        }
        self.starts.push(self.edges.len() as u32);
        Var(idx)
    }

    /// Node with explicit parent partials; the registration hook for
    /// operations such as the eigenvalue subgradient.
    pub fn custom(&mut self, value: f64, parents: &[(Var, f64)]) -> Var {
        self.push(value, parents)
    }

    /// Adjoints of every node with respect to the scalar `root`.
    pub fn backward(&self, root: Var) -> Adjoints {
        let mut adj = vec![0.0; self.vals.len()];
        adj[root.index()] = 1.0;
        for i in (0..=root.index()).rev() {
            let a = adj[i];
            if a == 0.0 {
                continue;
            }
            let s = self.starts[i] as usize;
            let e = self.starts[i + 1] as usize;
            for &(p, d) in &self.edges[s..e] {
                adj[p as usize] += a * d;
            }
        }
        Adjoints(adj)
    }
}

/// Result of a backward pass.
#[derive(Debug)]
pub struct Adjoints(Vec<f64>);

impl Adjoints {
    #[inline]
    pub fn wrt(&self, v: Var) -> f64 {
        self.0[v.index()]
    }

    pub fn gather(&self, vars: &[Var]) -> Vec<f64> {
        vars.iter().map(|v| self.wrt(*v)).collect()
    }
}

/// Gradient of the scalar `root` with respect to the registered parameter
/// nodes, in registration order.
pub fn grad_params(tape: &Tape, root: Var, params: &[Var]) -> Result<Vec<f64>> {
    if root.index() >= tape.len() {
        return Err(Error::contract("root is not a node of this tape"));
    }
    let adj = tape.backward(root);
    Ok(adj.gather(params))
}

impl Algebra for Tape {
    type V = Var;

    fn constant(&mut self, c: f64) -> Var {
        self.leaf(c)
    }
    fn add(&mut self, a: Var, b: Var) -> Var {
        self.push(self.val(a) + self.val(b), &[(a, 1.0), (b, 1.0)])
    }
    fn sub(&mut self, a: Var, b: Var) -> Var {
        self.push(self.val(a) - self.val(b), &[(a, 1.0), (b, -1.0)])
    }
    fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.val(a), self.val(b));
        self.push(va * vb, &[(a, vb), (b, va)])
    }
    fn div(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.val(a), self.val(b));
        self.push(va / vb, &[(a, 1.0 / vb), (b, -va / (vb * vb))])
    }
    fn neg(&mut self, a: Var) -> Var {
        self.push(-self.val(a), &[(a, -1.0)])
    }
    fn square(&mut self, a: Var) -> Var {
        let va = self.val(a);
        self.push(va * va, &[(a, 2.0 * va)])
    }
    fn tanh(&mut self, a: Var) -> Var {
        let t = self.val(a).tanh();
        self.push(t, &[(a, 1.0 - t * t)])
    }
    fn sin(&mut self, a: Var) -> Var {
        let va = self.val(a);
        self.push(va.sin(), &[(a, va.cos())])
    }
    fn sinc(&mut self, a: Var) -> Var {
        let va = self.val(a);
        let d = if va.abs() < 1e-4 {
            -va / 3.0 + va * va * va / 30.0
        } else {
            (va.cos() - crate::algebra::sinc(va)) / va
        };
        self.push(crate::algebra::sinc(va), &[(a, d)])
    }
    fn value(&self, a: Var) -> f64 {
        self.val(a)
    }

    fn dot_affine(&mut self, ws: &[Var], xs: &[Var], b: Var) -> Var {
        debug_assert_eq!(ws.len(), xs.len());
        let mut acc = self.val(b);
        let idx = self.vals.len() as u32;
        for (w, x) in ws.iter().zip(xs) {
            let (vw, vx) = (self.val(*w), self.val(*x));
            acc += vw * vx;
            self.edges.push((w.0, vx));
            self.edges.push((x.0, vw));
        }
        self.edges.push((b.0, 1.0));
        self.vals.push(acc);
        self.starts.push(self.edges.len() as u32);
        Var(idx)
    }

    fn sum(&mut self, terms: &[Var]) -> Var {
        let idx = self.vals.len() as u32;
        let mut acc = 0.0;
        for t in terms {
            acc += self.val(*t);
            self.edges.push((t.0, 1.0));
        }
        self.vals.push(acc);
        self.starts.push(self.edges.len() as u32);
        Var(idx)
    }

    fn scale(&mut self, c: f64, a: Var) -> Var {
        self.push(c * self.val(a), &[(a, c)])
    }
}

impl LossAlgebra for Tape {
    fn relu(&mut self, a: Var) -> Var {
        let va = self.val(a);
        // Subgradient 0 at the kink.
        let d = if va > 0.0 { 1.0 } else { 0.0 };
        self.push(va.max(0.0), &[(a, d)])
    }

    fn sym_max_eig(&mut self, a: &Mat<Var>) -> Var {
        assert!(a.is_square(), "sym_max_eig needs a square matrix");
        let n = a.rows();
        let conc = Mat::from_fn(n, n, |r, c| self.val(a.get(r, c)));
        let (lambda, u) = super::eig::sym_max_eig(&conc).expect("square input");
        // dλ/dA_ij = u_i u_j for a simple top eigenvalue of sym(A).
        let mut parents = Vec::with_capacity(n * n);
        for r in 0..n {
            for c in 0..n {
                parents.push((a.get(r, c), u[r] * u[c]));
            }
        }
        self.custom(lambda, &parents)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_scalar(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    #[test]
    fn quadratic_form_gradient_is_2w() {
        // root = wᵀw → gradient 2w.
        let mut t = Tape::new();
        let w: Vec<Var> = [0.3, -1.2, 2.5].iter().map(|&v| t.leaf(v)).collect();
        let sq: Vec<Var> = w.iter().map(|&v| t.square(v)).collect();
        let root = t.sum(&sq);
        let g = grad_params(&t, root, &w).unwrap();
        assert_eq!(g, vec![0.6, -2.4, 5.0]);
    }

    #[test]
    fn constant_root_has_zero_gradient() {
        let mut t = Tape::new();
        let w = t.leaf(1.5);
        let root = t.constant(42.0);
        let g = grad_params(&t, root, &[w]).unwrap();
        assert_eq!(g, vec![0.0]);
    }

    #[test]
    fn composite_matches_finite_differences() {
        let f = |x: f64| (x.tanh() * x).sin() / (1.0 + x * x);
        let build = |t: &mut Tape, x: Var| {
            let th = t.tanh(x);
            let p = t.mul(th, x);
            let s = t.sin(p);
            let x2 = t.square(x);
            let one = t.constant(1.0);
            let d = t.add(one, x2);
            t.div(s, d)
        };
        for &x0 in &[0.3, -0.7, 1.9] {
            let mut t = Tape::new();
            let x = t.leaf(x0);
            let root = build(&mut t, x);
            assert!((t.val(root) - f(x0)).abs() < 1e-14);
            let g = grad_params(&t, root, &[x]).unwrap();
            let fd = fd_scalar(f, x0, 1e-6);
            assert!((g[0] - fd).abs() < 1e-8, "{} vs {fd}", g[0]);
        }
    }

    #[test]
    fn dot_affine_partials() {
        let mut t = Tape::new();
        let ws: Vec<Var> = [2.0, -1.0].iter().map(|&v| t.leaf(v)).collect();
        let xs: Vec<Var> = [0.5, 4.0].iter().map(|&v| t.leaf(v)).collect();
        let b = t.leaf(0.25);
        let y = t.dot_affine(&ws, &xs, b);
        assert!((t.val(y) - (2.0 * 0.5 - 4.0 + 0.25)).abs() < 1e-15);
        let adj = t.backward(y);
        assert_eq!(adj.wrt(ws[0]), 0.5);
        assert_eq!(adj.wrt(ws[1]), 4.0);
        assert_eq!(adj.wrt(xs[0]), 2.0);
        assert_eq!(adj.wrt(xs[1]), -1.0);
        assert_eq!(adj.wrt(b), 1.0);
    }

    #[test]
    fn backward_determinism_bitwise() {
        let build = || {
            let mut t = Tape::new();
            let xs: Vec<Var> = (0..20).map(|i| t.leaf((i as f64 * 0.37).sin())).collect();
            let mut acc = t.constant(0.0);
            for pair in xs.chunks(2) {
                let m = t.mul(pair[0], pair[1]);
                let s = t.tanh(m);
                acc = t.add(acc, s);
            }
            let g = grad_params(&t, acc, &xs).unwrap();
            g
        };
        assert_eq!(build(), build());
    }
}
