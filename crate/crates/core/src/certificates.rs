//! Storage function, QSR supply rate, dissipativity block matrix, the
//! structured controller and the inverse-optimal cost decomposition.
//!
//! The storage function is V(x) = xᵀṼ(x)x with a matrix-valued network Ṽ,
//! the supply rate is w(x,u) = xᵀQ(x)x + 2xᵀS(x)u + uᵀR(x)u, and the
//! controller u = −R(x)⁻¹S(x)ᵀx. Everything is written against the algebra
//! trait so the same formulas run concretely, on the gradient tape and on
//! intervals.

use crate::algebra::{dot, mat_vec, quad_form, solve_gauss, Algebra, ConcreteAlg};
use crate::diffgraph::{MlpExpr, MlpParams};
use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::plants::Plant;
use rand::Rng;
use std::io::{BufRead, Write};

/// Condition-number guard for concrete R(x) solves.
pub const R_COND_LIMIT: f64 = 1e8;

/// The four networks plus the bi-Lipschitz constants.
#[derive(Debug, Clone, PartialEq)]
pub struct CertificateBundle {
    /// Emits Ṽ(x) row-major (n² outputs); V(x) = xᵀ sym(Ṽ(x)) x.
    pub storage_net: MlpParams,
    /// Emits Q(x) row-major (n² outputs); symmetrized before use.
    pub q_net: MlpParams,
    /// Emits S(x) row-major (n·m outputs).
    pub s_net: MlpParams,
    /// Emits R(x) row-major (m² outputs); symmetrized before use.
    pub r_net: MlpParams,
    /// Lower bi-Lipschitz constant: μ xᵀx ≤ V(x).
    pub mu: f64,
    /// Upper bi-Lipschitz constant: V(x) ≤ ν xᵀx.
    pub nu: f64,
    pub state_dim: usize,
    pub input_dim: usize,
}

impl CertificateBundle {
    pub fn new(
        storage_net: MlpParams,
        q_net: MlpParams,
        s_net: MlpParams,
        r_net: MlpParams,
        mu: f64,
        nu: f64,
    ) -> Result<Self> {
        let n = storage_net.input_dim;
        let m2 = r_net.output_dim;
        let m = (m2 as f64).sqrt().round() as usize;
        let bundle = CertificateBundle {
            storage_net,
            q_net,
            s_net,
            r_net,
            mu,
            nu,
            state_dim: n,
            input_dim: m,
        };
        bundle.validate()?;
        Ok(bundle)
    }

    pub fn validate(&self) -> Result<()> {
        let (n, m) = (self.state_dim, self.input_dim);
        if !(self.mu > 0.0 && self.mu <= self.nu && self.nu.is_finite()) {
            return Err(Error::contract(format!(
                "bi-Lipschitz constants need 0 < mu <= nu, got mu={} nu={}",
                self.mu, self.nu
            )));
        }
        let checks = [
            ("storage", &self.storage_net, n, n * n),
            ("q", &self.q_net, n, n * n),
            ("s", &self.s_net, n, n * m),
            ("r", &self.r_net, n, m * m),
        ];
        for (name, net, want_in, want_out) in checks {
            net.validate()?;
            if net.input_dim != want_in || net.output_dim != want_out {
                return Err(Error::shape(format!(
                    "{name} network is {}→{}, expected {want_in}→{want_out}",
                    net.input_dim, net.output_dim
                )));
            }
        }
        Ok(())
    }

    /// Fresh bundle with tanh networks for Ṽ, Q, S and a linear map for R.
    /// Output biases start at vec(I) for Ṽ and R so the initial storage is
    /// ≈ xᵀx and the initial R is ≈ I.
    pub fn random_init(
        n: usize,
        m: usize,
        hidden: usize,
        mu: f64,
        nu: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let scale = 0.5;
        let mut storage = MlpParams::random(n, &[hidden], n * n, scale, rng);
        let mut q = MlpParams::random(n, &[hidden], n * n, scale, rng);
        let s = MlpParams::random(n, &[hidden], n * m, scale, rng);
        let mut r = MlpParams::random(n, &[], m * m, scale * 0.1, rng);
        let last = storage.biases.len() - 1;
        for i in 0..n {
            storage.biases[last][i * n + i] = 1.0;
        }
        let qlast = q.biases.len() - 1;
        for b in q.biases[qlast].iter_mut() {
            *b = 0.0;
        }
        for i in 0..m {
            r.biases[0][i * m + i] = 1.0;
        }
        CertificateBundle::new(storage, q, s, r, mu, nu)
    }

    pub fn n_params(&self) -> usize {
        self.storage_net.n_params()
            + self.q_net.n_params()
            + self.s_net.n_params()
            + self.r_net.n_params()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        self.storage_net.flatten_into(&mut out);
        self.q_net.flatten_into(&mut out);
        self.s_net.flatten_into(&mut out);
        self.r_net.flatten_into(&mut out);
        out
    }

    pub fn read_flat(&mut self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.n_params() {
            return Err(Error::shape(format!(
                "flat parameter vector length {} != {}",
                theta.len(),
                self.n_params()
            )));
        }
        let mut at = 0;
        at += self.storage_net.read_flat(&theta[at..])?;
        at += self.q_net.read_flat(&theta[at..])?;
        at += self.s_net.read_flat(&theta[at..])?;
        at += self.r_net.read_flat(&theta[at..])?;
        debug_assert_eq!(at, theta.len());
        Ok(())
    }

    pub fn write_checkpoint(&self, w: &mut impl Write) -> std::io::Result<()> {
        writeln!(
            w,
            "bundle n={} m={} mu={:.16e} nu={:.16e}",
            self.state_dim, self.input_dim, self.mu, self.nu
        )?;
        self.storage_net.write_checkpoint(w)?;
        self.q_net.write_checkpoint(w)?;
        self.s_net.write_checkpoint(w)?;
        self.r_net.write_checkpoint(w)?;
        Ok(())
    }

    pub fn read_checkpoint<B: BufRead>(reader: B) -> Result<Self> {
        let mut lines = reader.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse("missing bundle header".into()))??;
        let mut n = None;
        let mut m = None;
        let mut mu = None;
        let mut nu = None;
        for tok in header.split_whitespace().skip(1) {
            let (key, val) = tok
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("bad bundle token {tok}")))?;
            match key {
                "n" => n = Some(val.parse::<usize>().map_err(|e| Error::Parse(e.to_string()))?),
                "m" => m = Some(val.parse::<usize>().map_err(|e| Error::Parse(e.to_string()))?),
                "mu" => mu = Some(val.parse::<f64>().map_err(|e| Error::Parse(e.to_string()))?),
                "nu" => nu = Some(val.parse::<f64>().map_err(|e| Error::Parse(e.to_string()))?),
                _ => return Err(Error::Parse(format!("unknown bundle key {key}"))),
            }
        }
        let (n, m, mu, nu) = match (n, m, mu, nu) {
            (Some(n), Some(m), Some(mu), Some(nu)) => (n, m, mu, nu),
            _ => return Err(Error::Parse("bundle header missing n/m/mu/nu".into())),
        };
        let storage = MlpParams::read_checkpoint(&mut lines)?;
        let q = MlpParams::read_checkpoint(&mut lines)?;
        let s = MlpParams::read_checkpoint(&mut lines)?;
        let r = MlpParams::read_checkpoint(&mut lines)?;
        let bundle = CertificateBundle::new(storage, q, s, r, mu, nu)?;
        if bundle.state_dim != n || bundle.input_dim != m {
            return Err(Error::Parse(format!(
                "bundle header says n={n} m={m} but networks give n={} m={}",
                bundle.state_dim, bundle.input_dim
            )));
        }
        Ok(bundle)
    }

    /// Hand-built bundle with constant matrix outputs (useful for the
    /// analytically feasible certificates in tests and docs).
    pub fn constant(
        n: usize,
        _m: usize,
        vtilde: &Mat<f64>,
        q: &Mat<f64>,
        s: &Mat<f64>,
        r: &Mat<f64>,
        mu: f64,
        nu: f64,
    ) -> Result<Self> {
        CertificateBundle::new(
            MlpParams::constant_output(n, vtilde.data()),
            MlpParams::constant_output(n, q.data()),
            MlpParams::constant_output(n, s.data()),
            MlpParams::constant_output(n, r.data()),
            mu,
            nu,
        )
    }
}

/// Bundle bound into an algebra.
#[derive(Debug, Clone)]
pub struct BundleExpr<V> {
    pub storage: MlpExpr<V>,
    pub q: MlpExpr<V>,
    pub s: MlpExpr<V>,
    pub r: MlpExpr<V>,
    pub mu: f64,
    pub nu: f64,
    pub n: usize,
    pub m: usize,
}

impl<V: Copy> BundleExpr<V> {
    pub fn bind<A: Algebra<V = V>>(alg: &mut A, bundle: &CertificateBundle) -> Self {
        BundleExpr {
            storage: MlpExpr::bind(alg, &bundle.storage_net),
            q: MlpExpr::bind(alg, &bundle.q_net),
            s: MlpExpr::bind(alg, &bundle.s_net),
            r: MlpExpr::bind(alg, &bundle.r_net),
            mu: bundle.mu,
            nu: bundle.nu,
            n: bundle.state_dim,
            m: bundle.input_dim,
        }
    }

    /// Parameters in the same order as `CertificateBundle::flatten`.
    pub fn param_list(&self) -> Vec<V> {
        let mut out = self.storage.param_list();
        out.extend(self.q.param_list());
        out.extend(self.s.param_list());
        out.extend(self.r.param_list());
        out
    }
}

/// Per-point evaluation of every certificate quantity that later formulas
/// reuse: network outputs, pairwise state products and the storage gradient.
#[derive(Debug, Clone)]
pub struct PointEval<V> {
    pub vtilde_sym: Mat<V>,
    pub q_sym: Mat<V>,
    pub s: Mat<V>,
    pub r_sym: Mat<V>,
    /// xᵢxⱼ products (dependency-aware squares on the diagonal).
    pub xx: Mat<V>,
    /// V(x) = xᵀ sym(Ṽ(x)) x.
    pub v: V,
    /// Row vector ∂V/∂x, exact through the network Jacobian.
    pub grad_v: Vec<V>,
}

pub fn eval_certificate<A: Algebra>(
    alg: &mut A,
    b: &BundleExpr<A::V>,
    x: &[A::V],
) -> PointEval<A::V> {
    let (n, m) = (b.n, b.m);
    assert_eq!(x.len(), n, "state length");
    let (vt_raw, vt_jac) = b.storage.forward_with_jacobian(alg, x);
    let vt = Mat::from_vec(n, n, vt_raw).expect("storage output is n²");
    let vtilde_sym = crate::algebra::mat_sym(alg, &vt);
    let q_raw = b.q.forward(alg, x);
    let q = Mat::from_vec(n, n, q_raw).expect("q output is n²");
    let q_sym = crate::algebra::mat_sym(alg, &q);
    let s_raw = b.s.forward(alg, x);
    let s = Mat::from_vec(n, m, s_raw).expect("s output is n·m");
    let r_raw = b.r.forward(alg, x);
    let r = Mat::from_vec(m, m, r_raw).expect("r output is m²");
    let r_sym = crate::algebra::mat_sym(alg, &r);

    let xx = Mat::from_fn(n, n, |i, j| {
        if i == j {
            alg.square(x[i])
        } else {
            alg.mul(x[i], x[j])
        }
    });

    // V = Σᵢⱼ xᵢxⱼ Ṽs_ij
    let v = dot(alg, xx.data(), vtilde_sym.data());

    // ∂V/∂x_k = 2 (Ṽs x)_k + Σᵢⱼ xᵢxⱼ ∂Ṽ_ij/∂x_k
    let vsx = mat_vec(alg, &vtilde_sym, x);
    let grad_v = (0..n)
        .map(|k| {
            let lin = alg.scale(2.0, vsx[k]);
            let col: Vec<A::V> = (0..n * n).map(|row| vt_jac.get(row, k)).collect();
            let curv = dot(alg, xx.data(), &col);
            alg.add(lin, curv)
        })
        .collect();

    PointEval { vtilde_sym, q_sym, s, r_sym, xx, v, grad_v }
}

/// w(x,u) = xᵀQx + 2xᵀSu + uᵀRu.
pub fn supply_rate_expr<A: Algebra>(
    alg: &mut A,
    pe: &PointEval<A::V>,
    x: &[A::V],
    u: &[A::V],
) -> A::V {
    let qterm = dot(alg, pe.xx.data(), pe.q_sym.data());
    let st = pe.s.transpose();
    let sx = mat_vec(alg, &st, x);
    let cross = dot(alg, &sx, u);
    let cross2 = alg.scale(2.0, cross);
    let rterm = quad_form(alg, u, &pe.r_sym);
    let t = alg.add(qterm, cross2);
    alg.add(t, rterm)
}

/// c(x) = S(x)ᵀx − ½ g(x)ᵀ ∇V(x)ᵀ and d(x) = −∇V·f + xᵀQx, the off-diagonal
/// and corner blocks of the dissipativity matrix.
pub fn m_blocks_expr<A: Algebra>(
    alg: &mut A,
    pe: &PointEval<A::V>,
    x: &[A::V],
    f: &[A::V],
    g: &Mat<A::V>,
) -> (Vec<A::V>, A::V) {
    let st = pe.s.transpose();
    let sx = mat_vec(alg, &st, x);
    let gt = g.transpose();
    let gv = mat_vec(alg, &gt, &pe.grad_v);
    let c = (0..sx.len())
        .map(|i| {
            let half = alg.scale(0.5, gv[i]);
            alg.sub(sx[i], half)
        })
        .collect();
    let vf = dot(alg, &pe.grad_v, f);
    let qterm = dot(alg, pe.xx.data(), pe.q_sym.data());
    let d = alg.sub(qterm, vf);
    (c, d)
}

/// The (m+1)×(m+1) matrix M(x) = [[R, c],[cᵀ, d]].
pub fn m_matrix_expr<A: Algebra>(
    alg: &mut A,
    pe: &PointEval<A::V>,
    x: &[A::V],
    f: &[A::V],
    g: &Mat<A::V>,
) -> Mat<A::V> {
    let m = pe.r_sym.rows();
    let (c, d) = m_blocks_expr(alg, pe, x, f, g);
    Mat::from_fn(m + 1, m + 1, |r, col| {
        if r < m && col < m {
            pe.r_sym.get(r, col)
        } else if r < m {
            c[r]
        } else if col < m {
            c[col]
        } else {
            d
        }
    })
}

/// Δ(x) = S R⁻¹ Sᵀ − Q, symmetrized.
pub fn delta_expr<A: Algebra>(alg: &mut A, pe: &PointEval<A::V>) -> Mat<A::V> {
    let st = pe.s.transpose();
    let y = solve_gauss(alg, &pe.r_sym, &st); // R⁻¹Sᵀ, m×n
    let sy = crate::algebra::mat_mul(alg, &pe.s, &y);
    let raw = crate::algebra::mat_sub(alg, &sy, &pe.q_sym);
    crate::algebra::mat_sym(alg, &raw)
}

/// π(x) = −R(x)⁻¹S(x)ᵀx.
pub fn controller_expr<A: Algebra>(alg: &mut A, pe: &PointEval<A::V>, x: &[A::V]) -> Vec<A::V> {
    let st = pe.s.transpose();
    let sx = mat_vec(alg, &st, x);
    let rhs = Mat::from_vec(sx.len(), 1, sx).unwrap();
    let y = solve_gauss(alg, &pe.r_sym, &rhs);
    (0..y.rows()).map(|i| alg.neg(y.get(i, 0))).collect()
}

/// Schur complement of the R block of M(x): d − cᵀR⁻¹c.
pub fn schur_scalar_expr<A: Algebra>(
    alg: &mut A,
    pe: &PointEval<A::V>,
    x: &[A::V],
    f: &[A::V],
    g: &Mat<A::V>,
) -> A::V {
    let (c, d) = m_blocks_expr(alg, pe, x, f, g);
    let rhs = Mat::from_vec(c.len(), 1, c.clone()).unwrap();
    let y = solve_gauss(alg, &pe.r_sym, &rhs);
    let yv: Vec<A::V> = (0..y.rows()).map(|i| y.get(i, 0)).collect();
    let quad = dot(alg, &c, &yv);
    alg.sub(d, quad)
}

// ---------------------------------------------------------------------------
// Concrete operations.
// ---------------------------------------------------------------------------

/// Cache of every certificate quantity at one point.
#[derive(Debug, Clone)]
pub struct QsrEval {
    pub x: Vec<f64>,
    pub v: f64,
    pub grad_v: Vec<f64>,
    pub qx: Mat<f64>,
    pub sx: Mat<f64>,
    pub rx: Mat<f64>,
    pub delta: Mat<f64>,
    pub m: Mat<f64>,
    pub pi: Vec<f64>,
}

fn concrete_point(bundle: &CertificateBundle, x: &[f64]) -> Result<PointEval<f64>> {
    if x.len() != bundle.state_dim {
        return Err(Error::shape(format!(
            "state length {} != n = {}",
            x.len(),
            bundle.state_dim
        )));
    }
    bundle.validate()?;
    let mut alg = ConcreteAlg;
    let b = BundleExpr::bind(&mut alg, bundle);
    Ok(eval_certificate(&mut alg, &b, x))
}

/// V(x) = xᵀ sym(Ṽ(x)) x; exactly zero at the origin by construction.
pub fn storage_value(bundle: &CertificateBundle, x: &[f64]) -> Result<f64> {
    if x.len() != bundle.state_dim {
        return Err(Error::shape(format!(
            "state length {} != n = {}",
            x.len(),
            bundle.state_dim
        )));
    }
    let n = bundle.state_dim;
    let vt = Mat::from_vec(n, n, bundle.storage_net.forward(x)?)?.sym();
    Ok(vt.quad_form(x))
}

/// Exact gradient of `storage_value` as a row n-vector.
pub fn storage_gradient(bundle: &CertificateBundle, x: &[f64]) -> Result<Vec<f64>> {
    let n = bundle.state_dim;
    if x.len() != n {
        return Err(Error::shape(format!("state length {} != n = {n}", x.len())));
    }
    let mut alg = ConcreteAlg;
    let expr = MlpExpr::bind(&mut alg, &bundle.storage_net);
    let (raw, jac) = expr.forward_with_jacobian(&mut alg, x);
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("storage network output is not finite"));
    }
    let vt = Mat::from_vec(n, n, raw)?.sym();
    let vsx = vt.mat_vec(x);
    Ok((0..n)
        .map(|k| {
            let mut curv = 0.0;
            for i in 0..n {
                for j in 0..n {
                    curv += x[i] * x[j] * jac.get(i * n + j, k);
                }
            }
            2.0 * vsx[k] + curv
        })
        .collect())
}

/// w(x,u) with symmetrized Q and R.
pub fn supply_rate(bundle: &CertificateBundle, x: &[f64], u: &[f64]) -> Result<f64> {
    if u.len() != bundle.input_dim {
        return Err(Error::shape(format!(
            "input length {} != m = {}",
            u.len(),
            bundle.input_dim
        )));
    }
    let pe = concrete_point(bundle, x)?;
    let mut alg = ConcreteAlg;
    Ok(supply_rate_expr(&mut alg, &pe, x, u))
}

/// Solves R(x)·Y = B with the explicit factorization and condition guard.
fn guarded_r_solve(r: &Mat<f64>, b: &Mat<f64>) -> Result<Mat<f64>> {
    let (y, cond) = r.solve(b, "R(x)")?;
    if cond > R_COND_LIMIT || !cond.is_finite() {
        return Err(Error::Singular { context: "R(x)", cond });
    }
    Ok(y)
}

/// Δ(x) = S(x)R(x)⁻¹S(x)ᵀ − Q(x).
pub fn delta_matrix(bundle: &CertificateBundle, x: &[f64]) -> Result<Mat<f64>> {
    let pe = concrete_point(bundle, x)?;
    let y = guarded_r_solve(&pe.r_sym, &pe.s.transpose())?;
    Ok(pe.s.mul(&y).sub(&pe.q_sym).sym())
}

/// M(x) = [[R(x), c(x)],[c(x)ᵀ, d(x)]] with c = Sᵀx − ½gᵀ∇Vᵀ and
/// d = −∇V·f + xᵀQx.
pub fn dissipativity_matrix(bundle: &CertificateBundle, plant: &Plant, x: &[f64]) -> Result<Mat<f64>> {
    check_plant_dims(bundle, plant)?;
    let pe = concrete_point(bundle, x)?;
    let mut alg = ConcreteAlg;
    let f = plant.drift(&mut alg, x);
    let g = plant.input_matrix(&mut alg, x);
    Ok(m_matrix_expr(&mut alg, &pe, x, &f, &g))
}

/// π(x) = −R(x)⁻¹S(x)ᵀx.
///
/// Evaluates only the S and R networks; this runs inside every integrator
/// stage during closed-loop simulation.
pub fn controller(bundle: &CertificateBundle, x: &[f64]) -> Result<Vec<f64>> {
    let (n, m) = (bundle.state_dim, bundle.input_dim);
    if x.len() != n {
        return Err(Error::shape(format!("state length {} != n = {n}", x.len())));
    }
    let s = Mat::from_vec(n, m, bundle.s_net.forward(x)?)?;
    let r = Mat::from_vec(m, m, bundle.r_net.forward(x)?)?.sym();
    let sx = s.transpose().mat_vec(x);
    let rhs = Mat::from_vec(sx.len(), 1, sx)?;
    let y = guarded_r_solve(&r, &rhs)?;
    Ok((0..y.rows()).map(|i| -y.get(i, 0)).collect())
}

/// The inverse-optimality decomposition at (x, u):
/// l̃ = −∇V·f − ∇V·gu + xᵀQx + 2xᵀSu and l̄ = l̃ + uᵀRu + xᵀΔx.
pub fn inverse_cost(
    bundle: &CertificateBundle,
    plant: &Plant,
    x: &[f64],
    u: &[f64],
) -> Result<(f64, f64)> {
    check_plant_dims(bundle, plant)?;
    if u.len() != bundle.input_dim {
        return Err(Error::shape("input length != m"));
    }
    let pe = concrete_point(bundle, x)?;
    let mut alg = ConcreteAlg;
    let f = plant.drift(&mut alg, x);
    let g = plant.input_matrix(&mut alg, x);
    let vf: f64 = pe.grad_v.iter().zip(&f).map(|(a, b)| a * b).sum();
    let gu = g.mat_vec(u);
    let vgu: f64 = pe.grad_v.iter().zip(&gu).map(|(a, b)| a * b).sum();
    let qterm = pe.q_sym.quad_form(x);
    let sxu: f64 = pe
        .s
        .transpose()
        .mat_vec(x)
        .iter()
        .zip(u)
        .map(|(a, b)| a * b)
        .sum();
    let ltilde = -vf - vgu + qterm + 2.0 * sxu;
    let delta = delta_matrix(bundle, x)?;
    let lbar = ltilde + pe.r_sym.quad_form(u) + delta.quad_form(x);
    Ok((ltilde, lbar))
}

/// The Schur complement of the R block of M(x): d(x) − c(x)ᵀR(x)⁻¹c(x)
/// with c = Sᵀx − ½gᵀ∇Vᵀ and d = −∇V·f + xᵀQx. Positive iff M(x) ≻ 0
/// given R(x) ≻ 0.
pub fn schur_scalar(bundle: &CertificateBundle, plant: &Plant, x: &[f64]) -> Result<f64> {
    check_plant_dims(bundle, plant)?;
    let (n, m) = (bundle.state_dim, bundle.input_dim);
    let grad = storage_gradient(bundle, x)?;
    let q = Mat::from_vec(n, n, bundle.q_net.forward(x)?)?.sym();
    let s = Mat::from_vec(n, m, bundle.s_net.forward(x)?)?;
    let r = Mat::from_vec(m, m, bundle.r_net.forward(x)?)?.sym();
    let mut alg = ConcreteAlg;
    let f = plant.drift(&mut alg, x);
    let g = plant.input_matrix(&mut alg, x);
    let gv = g.transpose().mat_vec(&grad);
    let c: Vec<f64> = s
        .transpose()
        .mat_vec(x)
        .iter()
        .zip(&gv)
        .map(|(a, b)| a - 0.5 * b)
        .collect();
    let vf: f64 = grad.iter().zip(&f).map(|(a, b)| a * b).sum();
    let d = q.quad_form(x) - vf;
    let rhs = Mat::from_vec(m, 1, c.clone())?;
    let y = guarded_r_solve(&r, &rhs)?;
    let quad: f64 = c.iter().enumerate().map(|(i, ci)| ci * y.get(i, 0)).sum();
    Ok(d - quad)
}

/// Residuals of the regularity identities xᵀQx = ∇V·f and 2xᵀS = ∇V·g;
/// zeros mean the cost collapses to uᵀRu + xᵀΔx at this point.
pub fn regularity_residual(
    bundle: &CertificateBundle,
    plant: &Plant,
    x: &[f64],
) -> Result<(f64, Vec<f64>)> {
    check_plant_dims(bundle, plant)?;
    let pe = concrete_point(bundle, x)?;
    let mut alg = ConcreteAlg;
    let f = plant.drift(&mut alg, x);
    let g = plant.input_matrix(&mut alg, x);
    let vf: f64 = pe.grad_v.iter().zip(&f).map(|(a, b)| a * b).sum();
    let q_res = pe.q_sym.quad_form(x) - vf;
    let sx = pe.s.transpose().mat_vec(x);
    let gv = g.transpose().mat_vec(&pe.grad_v);
    let s_res: Vec<f64> = sx.iter().zip(&gv).map(|(a, b)| 2.0 * a - b).collect();
    Ok((q_res, s_res))
}

/// Every cached quantity at one point (requires invertible R(x)).
pub fn qsr_eval(bundle: &CertificateBundle, plant: &Plant, x: &[f64]) -> Result<QsrEval> {
    check_plant_dims(bundle, plant)?;
    let pe = concrete_point(bundle, x)?;
    let m = dissipativity_matrix(bundle, plant, x)?;
    let delta = delta_matrix(bundle, x)?;
    let pi = controller(bundle, x)?;
    Ok(QsrEval {
        x: x.to_vec(),
        v: pe.v,
        grad_v: pe.grad_v,
        qx: pe.q_sym,
        sx: pe.s,
        rx: pe.r_sym,
        delta,
        m,
        pi,
    })
}

fn check_plant_dims(bundle: &CertificateBundle, plant: &Plant) -> Result<()> {
    if plant.state_dim() != bundle.state_dim || plant.input_dim() != bundle.input_dim {
        return Err(Error::shape(format!(
            "plant is ({}, {}) but bundle is ({}, {})",
            plant.state_dim(),
            plant.input_dim(),
            bundle.state_dim,
            bundle.input_dim
        )));
    }
    Ok(())
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::plants;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_bundle(n: usize, m: usize, seed: u64) -> CertificateBundle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = CertificateBundle::random_init(n, m, 6, 0.1, 10.0, &mut rng).unwrap();
        // Give the biases some texture so nothing is accidentally zero.
        for net in [&mut b.storage_net, &mut b.q_net, &mut b.s_net, &mut b.r_net] {
            for bias in net.biases.iter_mut().flatten() {
                *bias += rng.random_range(-0.4..0.4);
            }
        }
        // Keep R safely positive definite for solve-based tests.
        for i in 0..m {
            b.r_net.biases[0][i * m + i] += 2.0;
        }
        b
    }

    /// The analytically feasible certificate for ẋ = u:
    /// V = x², Q = 0.5, S = 1, R = 1.
    pub(crate) fn integrator_bundle() -> CertificateBundle {
        CertificateBundle::constant(
            1,
            1,
            &Mat::from_vec(1, 1, vec![1.0]).unwrap(),
            &Mat::from_vec(1, 1, vec![0.5]).unwrap(),
            &Mat::from_vec(1, 1, vec![1.0]).unwrap(),
            &Mat::from_vec(1, 1, vec![1.0]).unwrap(),
            0.1,
            10.0,
        )
        .unwrap()
    }

    #[test]
    fn storage_zero_at_origin_and_quadratic_for_identity() {
        let b = random_bundle(3, 1, 1);
        assert_eq!(storage_value(&b, &[0.0, 0.0, 0.0]).unwrap(), 0.0);

        let id = CertificateBundle::constant(
            2,
            1,
            &Mat::identity(2),
            &Mat::zeros(2, 2),
            &Mat::zeros(2, 1),
            &Mat::identity(1),
            0.1,
            10.0,
        )
        .unwrap();
        assert!((storage_value(&id, &[1.0, 2.0]).unwrap() - 5.0).abs() < 1e-15);
    }

    #[test]
    fn storage_matches_direct_reevaluation() {
        let b = random_bundle(3, 2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..50 {
            let x: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let v = storage_value(&b, &x).unwrap();
            // Independent oracle: xᵀ((Ṽ+Ṽᵀ)/2)x from the raw forward pass.
            let raw = b.storage_net.forward(&x).unwrap();
            let vt = Mat::from_vec(3, 3, raw).unwrap().sym();
            let expect = vt.quad_form(&x);
            assert!((v - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn storage_gradient_identity_and_origin() {
        let id = CertificateBundle::constant(
            2,
            1,
            &Mat::identity(2),
            &Mat::zeros(2, 2),
            &Mat::zeros(2, 1),
            &Mat::identity(1),
            0.1,
            10.0,
        )
        .unwrap();
        let g = storage_gradient(&id, &[0.7, -0.2]).unwrap();
        assert!((g[0] - 1.4).abs() < 1e-15 && (g[1] + 0.4).abs() < 1e-15);

        let b = random_bundle(2, 1, 3);
        let g0 = storage_gradient(&b, &[0.0, 0.0]).unwrap();
        assert!(g0.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn storage_gradient_matches_finite_differences() {
        let b = random_bundle(3, 1, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let x: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let g = storage_gradient(&b, &x).unwrap();
            let h = 1e-5;
            for k in 0..3 {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[k] += h;
                xm[k] -= h;
                let fd =
                    (storage_value(&b, &xp).unwrap() - storage_value(&b, &xm).unwrap()) / (2.0 * h);
                let denom = fd.abs().max(1e-4);
                assert!(((g[k] - fd) / denom).abs() < 1e-5, "{} vs {fd}", g[k]);
            }
        }
    }

    #[test]
    fn supply_rate_closed_forms() {
        let pure_input = CertificateBundle::constant(
            2,
            2,
            &Mat::identity(2),
            &Mat::zeros(2, 2),
            &Mat::zeros(2, 2),
            &Mat::identity(2),
            0.1,
            10.0,
        )
        .unwrap();
        let w = supply_rate(&pure_input, &[0.4, -0.7], &[1.0, 2.0]).unwrap();
        assert!((w - 5.0).abs() < 1e-15);

        let scalar = CertificateBundle::constant(
            1,
            1,
            &Mat::from_vec(1, 1, vec![1.0]).unwrap(),
            &Mat::from_vec(1, 1, vec![0.5]).unwrap(),
            &Mat::from_vec(1, 1, vec![1.0]).unwrap(),
            &Mat::from_vec(1, 1, vec![1.0]).unwrap(),
            0.1,
            10.0,
        )
        .unwrap();
        let w = supply_rate(&scalar, &[1.0], &[-1.0]).unwrap();
        assert!((w - (-0.5)).abs() < 1e-15);
    }

    #[test]
    fn supply_rate_matches_matrix_products() {
        let b = random_bundle(3, 2, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let x: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let u: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
            let w = supply_rate(&b, &x, &u).unwrap();
            let q = Mat::from_vec(3, 3, b.q_net.forward(&x).unwrap()).unwrap().sym();
            let s = Mat::from_vec(3, 2, b.s_net.forward(&x).unwrap()).unwrap();
            let r = Mat::from_vec(2, 2, b.r_net.forward(&x).unwrap()).unwrap().sym();
            let sx = s.transpose().mat_vec(&x);
            let expect = q.quad_form(&x)
                + 2.0 * sx.iter().zip(&u).map(|(a, c)| a * c).sum::<f64>()
                + r.quad_form(&u);
            assert!((w - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn delta_closed_forms_and_oracle() {
        let zero_s = CertificateBundle::constant(
            2,
            1,
            &Mat::identity(2),
            &Mat::identity(2).scale(-1.0),
            &Mat::zeros(2, 1),
            &Mat::identity(1),
            0.1,
            10.0,
        )
        .unwrap();
        let d = delta_matrix(&zero_s, &[0.3, 0.3]).unwrap();
        assert!(d.sub(&Mat::identity(2)).max_abs() < 1e-15);

        let scalar = integrator_bundle();
        let d = delta_matrix(&scalar, &[0.4]).unwrap();
        assert!((d.get(0, 0) - 0.5).abs() < 1e-15);

        // Explicit-inverse oracle on a random bundle.
        let b = random_bundle(2, 2, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..30 {
            let x: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
            let d = delta_matrix(&b, &x).unwrap();
            let q = Mat::from_vec(2, 2, b.q_net.forward(&x).unwrap()).unwrap().sym();
            let s = Mat::from_vec(2, 2, b.s_net.forward(&x).unwrap()).unwrap();
            let r = Mat::from_vec(2, 2, b.r_net.forward(&x).unwrap()).unwrap().sym();
            let (rinv, _) = r.inverse("test").unwrap();
            let expect = s.mul(&rinv).mul(&s.transpose()).sub(&q).sym();
            assert!(d.sub(&expect).max_abs() < 1e-10);
        }
    }

    #[test]
    fn singular_r_reports_condition() {
        let b = CertificateBundle::constant(
            1,
            1,
            &Mat::from_vec(1, 1, vec![1.0]).unwrap(),
            &Mat::from_vec(1, 1, vec![0.5]).unwrap(),
            &Mat::from_vec(1, 1, vec![1.0]).unwrap(),
            &Mat::from_vec(1, 1, vec![0.0]).unwrap(),
            0.1,
            10.0,
        )
        .unwrap();
        match delta_matrix(&b, &[0.5]) {
            Err(Error::Singular { cond, .. }) => assert!(!cond.is_finite() || cond > R_COND_LIMIT),
            other => panic!("expected singularity error, got {other:?}"),
        }
        assert!(matches!(controller(&b, &[0.5]), Err(Error::Singular { .. })));
    }

    #[test]
    fn dissipativity_matrix_integrator() {
        let b = integrator_bundle();
        let plant = plants::integrator();
        for x in [0.5_f64, -1.0, 0.25] {
            let m = dissipativity_matrix(&b, &plant, &[x]).unwrap();
            assert!((m.get(0, 0) - 1.0).abs() < 1e-15);
            assert!(m.get(0, 1).abs() < 1e-15);
            assert!(m.get(1, 0).abs() < 1e-15);
            assert!((m.get(1, 1) - 0.5 * x * x).abs() < 1e-15);
        }
        let m0 = dissipativity_matrix(&b, &plant, &[0.0]).unwrap();
        assert!((m0.get(0, 0) - 1.0).abs() < 1e-15);
        assert!(m0.get(1, 1).abs() < 1e-15);
    }

    #[test]
    fn quadratic_form_identity_holds() {
        // [uᵀ 1] M(x) [u; 1] = w(x,u) − ∇V·(f + g·u), pointwise.
        let plant = plants::pendulum();
        let b = random_bundle(2, 1, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        for _ in 0..100 {
            let x: Vec<f64> = (0..2).map(|_| rng.random_range(-1.5..1.5)).collect();
            let m = dissipativity_matrix(&b, &plant, &x).unwrap();
            let grad = storage_gradient(&b, &x).unwrap();
            let mut alg = ConcreteAlg;
            let f = plant.drift(&mut alg, &x);
            let g = plant.input_matrix(&mut alg, &x);
            for _ in 0..10 {
                let u: Vec<f64> = (0..1).map(|_| rng.random_range(-2.0..2.0)).collect();
                let mut ext = u.clone();
                ext.push(1.0);
                let lhs = m.quad_form(&ext);
                let gu = g.mat_vec(&u);
                let vdot: f64 = grad
                    .iter()
                    .zip(f.iter().zip(&gu))
                    .map(|(gv, (fi, gi))| gv * (fi + gi))
                    .sum();
                let rhs = supply_rate(&b, &x, &u).unwrap() - vdot;
                assert!((lhs - rhs).abs() < 1e-9, "{lhs} vs {rhs}");
            }
        }
    }

    #[test]
    fn controller_closed_forms_and_residual() {
        let b = integrator_bundle();
        assert_eq!(controller(&b, &[0.0]).unwrap(), vec![0.0]);
        assert!((controller(&b, &[2.0]).unwrap()[0] + 2.0).abs() < 1e-15);

        let rb = random_bundle(3, 2, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        for _ in 0..50 {
            let x: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let pi = controller(&rb, &x).unwrap();
            let r = Mat::from_vec(2, 2, rb.r_net.forward(&x).unwrap()).unwrap().sym();
            let s = Mat::from_vec(3, 2, rb.s_net.forward(&x).unwrap()).unwrap();
            let res: Vec<f64> = r
                .mat_vec(&pi)
                .iter()
                .zip(s.transpose().mat_vec(&x))
                .map(|(a, c)| a + c)
                .collect();
            assert!(res.iter().all(|v| v.abs() < 1e-10));
        }
    }

    #[test]
    fn controller_linear_in_x_for_frozen_matrices() {
        let b = random_bundle(2, 1, 12);
        let x = [0.6, -0.4];
        let pi = controller(&b, &x).unwrap();
        // Freeze S, R at x and scale the state.
        let s = Mat::from_vec(2, 1, b.s_net.forward(&x).unwrap()).unwrap();
        let r = Mat::from_vec(1, 1, b.r_net.forward(&x).unwrap()).unwrap().sym();
        let alpha = 3.7;
        let ax: Vec<f64> = x.iter().map(|v| alpha * v).collect();
        let sx = s.transpose().mat_vec(&ax);
        let frozen = -sx[0] / r.get(0, 0);
        assert!((frozen - alpha * pi[0]).abs() < 1e-12);
    }

    #[test]
    fn inverse_cost_integrator_decomposition() {
        let b = integrator_bundle();
        let plant = plants::integrator();
        for (x, u) in [(0.8, 0.3), (-0.5, 1.0), (1.0, -1.0)] {
            let (ltilde, lbar) = inverse_cost(&b, &plant, &[x], &[u]).unwrap();
            assert!((ltilde - 0.5 * x * x).abs() < 1e-13);
            assert!((lbar - (0.5 * x * x + u * u + 0.5 * x * x)).abs() < 1e-13);
        }
        let (l0, lb0) = inverse_cost(&b, &plant, &[0.0], &[0.7]).unwrap();
        assert!(l0.abs() < 1e-15);
        assert!((lb0 - 0.49).abs() < 1e-13);
    }

    #[test]
    fn inverse_cost_positive_under_feasible_certificate() {
        let b = integrator_bundle();
        let plant = plants::integrator();
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        for _ in 0..200 {
            let x = rng.random_range(-1.0..1.0f64);
            if x.abs() < 1e-3 {
                continue;
            }
            let u = controller(&b, &[x]).unwrap();
            let delta = delta_matrix(&b, &[x]).unwrap();
            let (_, lbar) = inverse_cost(&b, &plant, &[x], &u).unwrap();
            let dq = delta.quad_form(&[x]);
            assert!(lbar >= dq - 1e-12 && dq > 0.0);
        }
    }

    #[test]
    fn regularity_residual_integrator() {
        let b = integrator_bundle();
        let plant = plants::integrator();
        let (qr, sr) = regularity_residual(&b, &plant, &[0.8]).unwrap();
        assert!((qr - 0.5 * 0.64).abs() < 1e-14);
        assert!(sr[0].abs() < 1e-14);
        let (q0, s0) = regularity_residual(&b, &plant, &[0.0]).unwrap();
        assert!(q0.abs() < 1e-15 && s0[0].abs() < 1e-15);
    }

    #[test]
    fn regularity_residual_cancels_when_constructed() {
        // Pick Q = (∇V·f / xᵀx)·I at a fixed point so the Q-residual is 0.
        let plant = plants::circuit();
        let base = random_bundle(2, 1, 15);
        let x = [0.5, -0.25];
        let grad = storage_gradient(&base, &x).unwrap();
        let mut alg = ConcreteAlg;
        let f = plant.drift(&mut alg, &x);
        let vf: f64 = grad.iter().zip(&f).map(|(a, b)| a * b).sum();
        let xtx: f64 = x.iter().map(|v| v * v).sum();
        let mut b = base.clone();
        b.q_net = MlpParams::constant_output(2, Mat::identity(2).scale(vf / xtx).data());
        let (qr, _) = regularity_residual(&b, &plant, &x).unwrap();
        assert!(qr.abs() < 1e-12);
    }

    #[test]
    fn supply_rate_negative_under_structured_controller() {
        // w(x, π(x)) = −xᵀΔ(x)x wherever R ≻ 0, by expanding the QSR form.
        let b = random_bundle(2, 1, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let mut checked = 0;
        for _ in 0..10_000 {
            let x: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
            if x.iter().map(|v| v * v).sum::<f64>() < 1e-4 {
                continue;
            }
            let r = Mat::from_vec(1, 1, b.r_net.forward(&x).unwrap()).unwrap();
            if r.get(0, 0) <= 1e-6 {
                continue;
            }
            let pi = controller(&b, &x).unwrap();
            let w = supply_rate(&b, &x, &pi).unwrap();
            let dq = delta_matrix(&b, &x).unwrap().quad_form(&x);
            assert!((w + dq).abs() < 1e-9, "w = {w}, xᵀΔx = {dq}");
            checked += 1;
        }
        assert!(checked > 5_000);
    }

    #[test]
    fn bundle_checkpoint_round_trip() {
        let b = random_bundle(2, 1, 17);
        let mut buf = Vec::new();
        b.write_checkpoint(&mut buf).unwrap();
        let back = CertificateBundle::read_checkpoint(&buf[..]).unwrap();
        assert_eq!(b, back);
    }

    #[test]
    fn flatten_matches_bound_param_order() {
        let b = random_bundle(2, 2, 18);
        let flat = b.flatten();
        let mut tape = crate::diffgraph::Tape::new();
        let expr = BundleExpr::bind(&mut tape, &b);
        let params = expr.param_list();
        assert_eq!(flat.len(), params.len());
        for (v, p) in flat.iter().zip(&params) {
            assert_eq!(*v, tape.val(*p));
        }
    }
}
