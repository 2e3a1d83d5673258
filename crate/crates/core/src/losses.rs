//! Training losses: hinge penalties on the dissipativity matrix, the
//! bi-Lipschitz storage sandwich, Δ(x) and R(x), plus the cost-shaping term
//! that pulls the learned running cost towards a user objective.

use crate::algebra::{dot, Algebra, ConcreteAlg, LossAlgebra};
use crate::certificates::{
    self, delta_expr, eval_certificate, m_matrix_expr, BundleExpr, CertificateBundle, PointEval,
};
use crate::diffgraph::{sym_min_eig, Tape, Var};
use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::plants::Plant;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::sync::Arc;

/// Weights of the five loss terms; a zero shaping weight is the unshaped
/// training variant.
#[derive(Debug, Clone, Copy)]
pub struct LossWeights {
    pub dissipativity: f64,
    pub storage: f64,
    pub delta: f64,
    pub r_pd: f64,
    pub shaping: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { dissipativity: 1.0, storage: 1.0, delta: 1.0, r_pd: 1.0, shaping: 0.1 }
    }
}

impl LossWeights {
    pub fn unshaped() -> Self {
        LossWeights { shaping: 0.0, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.dissipativity, self.storage, self.delta, self.r_pd, self.shaping];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::contract("loss weights must be finite and nonnegative"));
        }
        Ok(())
    }
}

/// Control objective l(x, u) that shaping matches l̄ against.
#[derive(Clone)]
pub enum Objective {
    /// l = xᵀQc x + uᵀRc u; shaping runs in coefficient mode and needs no
    /// input samples.
    Quadratic { qc: Mat<f64>, rc: Mat<f64> },
    /// Arbitrary objective; shaping runs in sampled mode with inputs drawn
    /// uniformly from a box of the given half-width.
    General {
        eval: Arc<dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync>,
        u_halfwidth: f64,
        pairs_seed: u64,
    },
}

impl std::fmt::Debug for Objective {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Objective::Quadratic { .. } => write!(f, "Objective::Quadratic"),
            Objective::General { u_halfwidth, .. } => {
                write!(f, "Objective::General(u_halfwidth={u_halfwidth})")
            }
        }
    }
}

impl Objective {
    /// The default benchmark objective l(x,u) = xᵀx + uᵀu.
    pub fn state_input_norm(n: usize, m: usize) -> Self {
        Objective::Quadratic { qc: Mat::identity(n), rc: Mat::identity(m) }
    }
}

/// Minimum eigenvalue of sym(R) below which the Δ-dependent terms are
/// skipped at a point: Δ is undefined there and the R hinge owns it.
const R_SOLVE_FLOOR: f64 = 1e-9;

/// Unweighted per-point hinge terms.
#[derive(Debug, Clone, Copy)]
pub struct PointTerms<V> {
    pub dissipativity: V,
    pub storage: V,
    pub delta: V,
    pub r_pd: V,
}

/// Builds the four certificate hinges at one point. `margin` is added
/// inside each hinge (training slack); the published losses use zero.
pub fn point_loss_terms<A: LossAlgebra>(
    alg: &mut A,
    b: &BundleExpr<A::V>,
    plant: &Plant,
    x: &[A::V],
    margin: f64,
) -> (PointTerms<A::V>, PointEval<A::V>) {
    let pe = eval_certificate(alg, b, x);
    let f = plant.drift(alg, x);
    let g = plant.input_matrix(alg, x);
    let mv = alg.constant(margin);

    let m = m_matrix_expr(alg, &pe, x, &f, &g);
    let neg_m = crate::algebra::mat_neg(alg, &m);
    let lam_m = alg.sym_max_eig(&neg_m);
    let lam_m = alg.add(lam_m, mv);
    let dissipativity = alg.relu(lam_m);

    let xtx = {
        let sq: Vec<A::V> = x.iter().map(|&v| alg.square(v)).collect();
        alg.sum(&sq)
    };
    let mu_x = alg.scale(b.mu, xtx);
    let nu_x = alg.scale(b.nu, xtx);
    let lo = alg.sub(mu_x, pe.v);
    let lo = alg.add(lo, mv);
    let lo = alg.relu(lo);
    let hi = alg.sub(pe.v, nu_x);
    let hi = alg.add(hi, mv);
    let hi = alg.relu(hi);
    let storage = alg.add(lo, hi);

    let neg_r = crate::algebra::mat_neg(alg, &pe.r_sym);
    let lam_r = alg.sym_max_eig(&neg_r);
    let lam_r = alg.add(lam_r, mv);
    let r_pd = alg.relu(lam_r);

    let delta = if r_min_eig_concrete(alg, &pe) > R_SOLVE_FLOOR {
        let d = delta_expr(alg, &pe);
        let neg_d = crate::algebra::mat_neg(alg, &d);
        let lam_d = alg.sym_max_eig(&neg_d);
        let lam_d = alg.add(lam_d, mv);
        alg.relu(lam_d)
    } else {
        alg.constant(0.0)
    };

    (PointTerms { dissipativity, storage, delta, r_pd }, pe)
}

fn r_min_eig_concrete<A: Algebra>(alg: &A, pe: &PointEval<A::V>) -> f64 {
    let m = pe.r_sym.rows();
    let conc = Mat::from_fn(m, m, |r, c| alg.value(pe.r_sym.get(r, c)));
    sym_min_eig(&conc).unwrap_or(f64::NEG_INFINITY)
}

/// Coefficient-mode shaping penalty at a point, for a quadratic objective:
/// ‖R − Rc‖²_F + ‖2xᵀS − ∇V·g‖² + (−∇V·f + xᵀQx + xᵀΔx − xᵀQc x)².
pub fn point_shaping_quadratic<A: Algebra>(
    alg: &mut A,
    pe: &PointEval<A::V>,
    plant: &Plant,
    x: &[A::V],
    qc: &Mat<f64>,
    rc: &Mat<f64>,
) -> A::V {
    if r_min_eig_concrete(alg, pe) <= R_SOLVE_FLOOR {
        return alg.constant(0.0);
    }
    let f = plant.drift(alg, x);
    let g = plant.input_matrix(alg, x);

    let mut terms = Vec::new();
    for r in 0..pe.r_sym.rows() {
        for c in 0..pe.r_sym.cols() {
            let target = alg.constant(rc.get(r, c));
            let d = alg.sub(pe.r_sym.get(r, c), target);
            terms.push(alg.square(d));
        }
    }
    let st = pe.s.transpose();
    let sx = crate::algebra::mat_vec(alg, &st, x);
    let gt = g.transpose();
    let gv = crate::algebra::mat_vec(alg, &gt, &pe.grad_v);
    for i in 0..sx.len() {
        let two_sx = alg.scale(2.0, sx[i]);
        let d = alg.sub(two_sx, gv[i]);
        terms.push(alg.square(d));
    }
    let vf = dot(alg, &pe.grad_v, &f);
    let qx = dot(alg, pe.xx.data(), pe.q_sym.data());
    let delta = delta_expr(alg, pe);
    let dx = dot(alg, pe.xx.data(), delta.data());
    let qc_bound = Mat::from_fn(qc.rows(), qc.cols(), |r, c| alg.constant(qc.get(r, c)));
    let target = dot(alg, pe.xx.data(), qc_bound.data());
    let t = alg.sub(qx, vf);
    let t = alg.add(t, dx);
    let t = alg.sub(t, target);
    terms.push(alg.square(t));
    alg.sum(&terms)
}

/// Sampled-mode shaping penalty (l(x,u) − l̄(x,u))² at one (x, u) pair.
pub fn point_shaping_sampled<A: Algebra>(
    alg: &mut A,
    pe: &PointEval<A::V>,
    plant: &Plant,
    x: &[A::V],
    u: &[f64],
    l_value: f64,
) -> A::V {
    if r_min_eig_concrete(alg, pe) <= R_SOLVE_FLOOR {
        return alg.constant(0.0);
    }
    let f = plant.drift(alg, x);
    let g = plant.input_matrix(alg, x);
    let uv: Vec<A::V> = u.iter().map(|&v| alg.constant(v)).collect();

    // l̄ = −∇V·f − ∇V·gu + xᵀQx + 2xᵀSu + uᵀRu + xᵀΔx
    let vf = dot(alg, &pe.grad_v, &f);
    let gu = crate::algebra::mat_vec(alg, &g, &uv);
    let vgu = dot(alg, &pe.grad_v, &gu);
    let qx = dot(alg, pe.xx.data(), pe.q_sym.data());
    let st = pe.s.transpose();
    let sx = crate::algebra::mat_vec(alg, &st, x);
    let sxu = dot(alg, &sx, &uv);
    let ur = crate::algebra::quad_form(alg, &uv, &pe.r_sym);
    let delta = delta_expr(alg, pe);
    let dx = dot(alg, pe.xx.data(), delta.data());
    let mut lbar = alg.sub(qx, vf);
    lbar = alg.sub(lbar, vgu);
    let sxu2 = alg.scale(2.0, sxu);
    lbar = alg.add(lbar, sxu2);
    lbar = alg.add(lbar, ur);
    lbar = alg.add(lbar, dx);

    let lv = alg.constant(l_value);
    let d = alg.sub(lv, lbar);
    alg.square(d)
}

fn draw_pair_input(m: usize, halfwidth: f64, seed: u64, index: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(
        seed ^ (index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15),
    );
    (0..m).map(|_| rng.random_range(-halfwidth..halfwidth)).collect()
}

fn check_dataset(data: &[Vec<f64>]) -> Result<()> {
    if data.is_empty() {
        return Err(Error::contract("loss over an empty dataset"));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Published (unmargined) losses.
// ---------------------------------------------------------------------------

/// Mean ReLU(λ_max(−M(xᵢ))).
pub fn loss_dissipativity(
    bundle: &CertificateBundle,
    plant: &Plant,
    data: &[Vec<f64>],
) -> Result<f64> {
    check_dataset(data)?;
    let mut acc = 0.0;
    for x in data {
        let m = certificates::dissipativity_matrix(bundle, plant, x)?;
        let (lam, _) = crate::diffgraph::sym_max_eig(&m.scale(-1.0))?;
        acc += lam.max(0.0);
    }
    Ok(acc / data.len() as f64)
}

/// Mean ReLU(μxᵀx − V) + ReLU(V − νxᵀx).
pub fn loss_storage(bundle: &CertificateBundle, data: &[Vec<f64>]) -> Result<f64> {
    check_dataset(data)?;
    let mut acc = 0.0;
    for x in data {
        let v = certificates::storage_value(bundle, x)?;
        let xtx: f64 = x.iter().map(|v| v * v).sum();
        acc += (bundle.mu * xtx - v).max(0.0) + (v - bundle.nu * xtx).max(0.0);
    }
    Ok(acc / data.len() as f64)
}

/// Mean ReLU(λ_max(−Δ(xᵢ))).
pub fn loss_delta(bundle: &CertificateBundle, data: &[Vec<f64>]) -> Result<f64> {
    check_dataset(data)?;
    let mut acc = 0.0;
    for x in data {
        let d = certificates::delta_matrix(bundle, x)?;
        let (lam, _) = crate::diffgraph::sym_max_eig(&d.scale(-1.0))?;
        acc += lam.max(0.0);
    }
    Ok(acc / data.len() as f64)
}

/// Mean ReLU(λ_max(−R(xᵢ))).
pub fn loss_r(bundle: &CertificateBundle, data: &[Vec<f64>]) -> Result<f64> {
    check_dataset(data)?;
    let mut acc = 0.0;
    for x in data {
        let raw = bundle.r_net.forward(x)?;
        let r = Mat::from_vec(bundle.input_dim, bundle.input_dim, raw)?.sym();
        let (lam, _) = crate::diffgraph::sym_max_eig(&r.scale(-1.0))?;
        acc += lam.max(0.0);
    }
    Ok(acc / data.len() as f64)
}

/// Cost-shaping discrepancy; coefficient mode for quadratic objectives,
/// sampled mode otherwise.
pub fn loss_costshape(
    bundle: &CertificateBundle,
    plant: &Plant,
    data: &[Vec<f64>],
    objective: &Objective,
) -> Result<f64> {
    check_dataset(data)?;
    let mut alg = ConcreteAlg;
    let b = BundleExpr::bind(&mut alg, bundle);
    let mut acc = 0.0;
    for (i, x) in data.iter().enumerate() {
        let pe = eval_certificate(&mut alg, &b, x);
        acc += match objective {
            Objective::Quadratic { qc, rc } => {
                point_shaping_quadratic(&mut alg, &pe, plant, x, qc, rc)
            }
            Objective::General { eval, u_halfwidth, pairs_seed } => {
                let u = draw_pair_input(bundle.input_dim, *u_halfwidth, *pairs_seed, i);
                let l = eval(x, &u);
                point_shaping_sampled(&mut alg, &pe, plant, x, &u, l)
            }
        };
    }
    Ok(acc / data.len() as f64)
}

/// Coefficient-mode shaping; rejects objectives that are not quadratic.
pub fn loss_costshape_coefficient(
    bundle: &CertificateBundle,
    plant: &Plant,
    data: &[Vec<f64>],
    objective: &Objective,
) -> Result<f64> {
    match objective {
        Objective::Quadratic { .. } => loss_costshape(bundle, plant, data, objective),
        Objective::General { .. } => Err(Error::contract(
            "coefficient mode needs a quadratic objective; use sampled mode",
        )),
    }
}

/// Per-component loss values.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossBreakdown {
    pub dissipativity: f64,
    pub storage: f64,
    pub delta: f64,
    pub r_pd: f64,
    pub shaping: f64,
    pub total: f64,
}

/// Builds the full weighted loss on one tape and returns the scalar root
/// together with the parameter binding.
pub fn total_loss(
    tape: &mut Tape,
    bundle: &CertificateBundle,
    plant: &Plant,
    data: &[Vec<f64>],
    weights: &LossWeights,
    objective: &Objective,
) -> Result<(Var, BundleExpr<Var>)> {
    total_loss_margined(tape, bundle, plant, data, weights, objective, 0.0)
}

pub fn total_loss_margined(
    tape: &mut Tape,
    bundle: &CertificateBundle,
    plant: &Plant,
    data: &[Vec<f64>],
    weights: &LossWeights,
    objective: &Objective,
    margin: f64,
) -> Result<(Var, BundleExpr<Var>)> {
    check_dataset(data)?;
    weights.validate()?;
    bundle.validate()?;
    let b = BundleExpr::bind(tape, bundle);
    let mut per_point = Vec::with_capacity(data.len());
    for (i, x) in data.iter().enumerate() {
        let xv: Vec<Var> = x.iter().map(|&v| tape.leaf(v)).collect();
        let root = weighted_point_root(tape, &b, plant, &xv, weights, objective, margin, i);
        per_point.push(root);
    }
    let sum = tape.sum(&per_point);
    let root = tape.scale(1.0 / data.len() as f64, sum);
    Ok((root, b))
}

fn weighted_point_root(
    tape: &mut Tape,
    b: &BundleExpr<Var>,
    plant: &Plant,
    xv: &[Var],
    weights: &LossWeights,
    objective: &Objective,
    margin: f64,
    index: usize,
) -> Var {
    let (terms, pe) = point_loss_terms(tape, b, plant, xv, margin);
    let mut acc = tape.scale(weights.dissipativity, terms.dissipativity);
    let t = tape.scale(weights.storage, terms.storage);
    acc = tape.add(acc, t);
    let t = tape.scale(weights.delta, terms.delta);
    acc = tape.add(acc, t);
    let t = tape.scale(weights.r_pd, terms.r_pd);
    acc = tape.add(acc, t);
    if weights.shaping > 0.0 {
        let shaped = match objective {
            Objective::Quadratic { qc, rc } => {
                point_shaping_quadratic(tape, &pe, plant, xv, qc, rc)
            }
            Objective::General { eval, u_halfwidth, pairs_seed } => {
                let x: Vec<f64> = xv.iter().map(|v| tape.val(*v)).collect();
                let u = draw_pair_input(b.m, *u_halfwidth, *pairs_seed, index);
                let l = eval(&x, &u);
                point_shaping_sampled(tape, &pe, plant, xv, &u, l)
            }
        };
        let t = tape.scale(weights.shaping, shaped);
        acc = tape.add(acc, t);
    }
    acc
}

/// Unmargined per-component loss values without gradients (used for the
/// verifier gate and the loss history).
pub fn dataset_breakdown(
    bundle: &CertificateBundle,
    plant: &Plant,
    data: &[Vec<f64>],
    weights: &LossWeights,
    objective: &Objective,
) -> Result<LossBreakdown> {
    check_dataset(data)?;
    let per: Vec<LossBreakdown> = data
        .par_iter()
        .enumerate()
        .map(|(i, x)| {
            let mut alg = ConcreteAlg;
            let b = BundleExpr::bind(&mut alg, bundle);
            let (terms, pe) = point_loss_terms(&mut alg, &b, plant, x, 0.0);
            let shaping = if weights.shaping > 0.0 {
                match objective {
                    Objective::Quadratic { qc, rc } => {
                        point_shaping_quadratic(&mut alg, &pe, plant, x, qc, rc)
                    }
                    Objective::General { eval, u_halfwidth, pairs_seed } => {
                        let u = draw_pair_input(b.m, *u_halfwidth, *pairs_seed, i);
                        let l = eval(x, &u);
                        point_shaping_sampled(&mut alg, &pe, plant, x, &u, l)
                    }
                }
            } else {
                0.0
            };
            LossBreakdown {
                dissipativity: terms.dissipativity,
                storage: terms.storage,
                delta: terms.delta,
                r_pd: terms.r_pd,
                shaping,
                total: weights.dissipativity * terms.dissipativity
                    + weights.storage * terms.storage
                    + weights.delta * terms.delta
                    + weights.r_pd * terms.r_pd
                    + weights.shaping * shaping,
            }
        })
        .collect();
    let scale = 1.0 / data.len() as f64;
    let mut sum = LossBreakdown::default();
    for bd in &per {
        sum.dissipativity += bd.dissipativity;
        sum.storage += bd.storage;
        sum.delta += bd.delta;
        sum.r_pd += bd.r_pd;
        sum.shaping += bd.shaping;
        sum.total += bd.total;
    }
    sum.dissipativity *= scale;
    sum.storage *= scale;
    sum.delta *= scale;
    sum.r_pd *= scale;
    sum.shaping *= scale;
    sum.total *= scale;
    Ok(sum)
}

/// Loss value, per-component breakdown and the flat parameter gradient,
/// computed with one small tape per sample (samples are independent, so
/// they run in parallel; accumulation order stays fixed).
pub fn dataset_loss_and_grad(
    bundle: &CertificateBundle,
    plant: &Plant,
    data: &[Vec<f64>],
    weights: &LossWeights,
    objective: &Objective,
    margin: f64,
) -> Result<(LossBreakdown, Vec<f64>)> {
    check_dataset(data)?;
    weights.validate()?;
    let n_params = bundle.n_params();
    let per: Vec<(LossBreakdown, Vec<f64>)> = data
        .par_iter()
        .enumerate()
        .map(|(i, x)| {
            let mut tape = Tape::with_capacity(4096, 16384);
            let b = BundleExpr::bind(&mut tape, bundle);
            let params = b.param_list();
            let xv: Vec<Var> = x.iter().map(|&v| tape.leaf(v)).collect();
            let (terms, pe) = point_loss_terms(&mut tape, &b, plant, &xv, margin);
            let shaped = if weights.shaping > 0.0 {
                match objective {
                    Objective::Quadratic { qc, rc } => {
                        point_shaping_quadratic(&mut tape, &pe, plant, &xv, qc, rc)
                    }
                    Objective::General { eval, u_halfwidth, pairs_seed } => {
                        let u = draw_pair_input(b.m, *u_halfwidth, *pairs_seed, i);
                        let l = eval(x, &u);
                        point_shaping_sampled(&mut tape, &pe, plant, &xv, &u, l)
                    }
                }
            } else {
                tape.constant(0.0)
            };
            let mut acc = tape.scale(weights.dissipativity, terms.dissipativity);
            let t = tape.scale(weights.storage, terms.storage);
            acc = tape.add(acc, t);
            let t = tape.scale(weights.delta, terms.delta);
            acc = tape.add(acc, t);
            let t = tape.scale(weights.r_pd, terms.r_pd);
            acc = tape.add(acc, t);
            let t = tape.scale(weights.shaping, shaped);
            acc = tape.add(acc, t);
            let adj = tape.backward(acc);
            let grad = adj.gather(&params);
            let bd = LossBreakdown {
                dissipativity: tape.val(terms.dissipativity),
                storage: tape.val(terms.storage),
                delta: tape.val(terms.delta),
                r_pd: tape.val(terms.r_pd),
                shaping: tape.val(shaped),
                total: tape.val(acc),
            };
            (bd, grad)
        })
        .collect();

    let scale = 1.0 / data.len() as f64;
    let mut grad = vec![0.0; n_params];
    let mut sum = LossBreakdown::default();
    for (bd, g) in &per {
        sum.dissipativity += bd.dissipativity;
        sum.storage += bd.storage;
        sum.delta += bd.delta;
        sum.r_pd += bd.r_pd;
        sum.shaping += bd.shaping;
        sum.total += bd.total;
        for (gi, v) in grad.iter_mut().zip(g) {
            *gi += v;
        }
    }
    sum.dissipativity *= scale;
    sum.storage *= scale;
    sum.delta *= scale;
    sum.r_pd *= scale;
    sum.shaping *= scale;
    sum.total *= scale;
    for g in grad.iter_mut() {
        *g *= scale;
    }
    if !sum.total.is_finite() {
        return Err(Error::numeric("loss is not finite"));
    }
    Ok((sum, grad))
}
