//! Formal certification of a learned bundle over the region box minus a
//! small origin ball, by interval branch-and-bound with δ-weakened
//! discharge, mirroring δ-satisfiability semantics.
//!
//! Five conditions are checked: R(x) positive definite, the Schur scalar of
//! the dissipativity matrix, xᵀΔ(x)x > 0, and the two bi-Lipschitz bounds
//! on the storage function. A box is discharged when a sound lower bound of
//! the condition over it is positive; it yields a counterexample when a
//! concrete evaluation fails; boxes narrower than δ with indeterminate sign
//! are resolved by a concrete midpoint check against δ.

mod interval;

pub use interval::{
    sym_eig_lower_bound, sym_eig_upper_bound, Interval, IntervalAlg, IntervalBox, ENTIRE,
};

use crate::algebra::{quad_form, solve_gauss};
use crate::certificates::{self, CertificateBundle};
use crate::diffgraph::{sym_min_eig, MlpExpr};
use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::plants::Plant;
use rayon::prelude::*;
use std::fmt;
use std::sync::Arc;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConditionId {
    RPd,
    Schur,
    Delta,
    BiLipschitzLower,
    BiLipschitzUpper,
}

impl fmt::Display for ConditionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ConditionId::RPd => "r-pd",
            ConditionId::Schur => "schur",
            ConditionId::Delta => "delta",
            ConditionId::BiLipschitzLower => "bi-lipschitz-lower",
            ConditionId::BiLipschitzUpper => "bi-lipschitz-upper",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for ConditionId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "r-pd" => ConditionId::RPd,
            "schur" => ConditionId::Schur,
            "delta" => ConditionId::Delta,
            "bi-lipschitz-lower" => ConditionId::BiLipschitzLower,
            "bi-lipschitz-upper" => ConditionId::BiLipschitzUpper,
            other => return Err(Error::Parse(format!("unknown condition id {other}"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VerdictStatus {
    Certified,
    Counterexample,
    InconclusiveBudget,
}

#[derive(Debug, Clone)]
pub struct Verdict {
    pub status: VerdictStatus,
    pub condition: Option<ConditionId>,
    pub witness: Option<Vec<f64>>,
    pub delta: f64,
    pub boxes_explored: u64,
}

impl Verdict {
    /// One-line text record: `status condition witness... delta boxes`.
    pub fn to_line(&self) -> String {
        let status = match self.status {
            VerdictStatus::Certified => "certified",
            VerdictStatus::Counterexample => "counterexample",
            VerdictStatus::InconclusiveBudget => "inconclusive-budget",
        };
        let cond = self.condition.map(|c| c.to_string()).unwrap_or_else(|| "-".into());
        let witness = match &self.witness {
            Some(w) => w.iter().map(|v| format!("{v:.16e}")).collect::<Vec<_>>().join(" "),
            None => "-".into(),
        };
        format!("{status} {cond} {witness} {:.3e} {}", self.delta, self.boxes_explored)
    }

    pub fn is_certified(&self) -> bool {
        self.status == VerdictStatus::Certified
    }
}

/// Returns the witness of a counterexample verdict.
pub fn extract_counterexample(verdict: &Verdict) -> Result<Vec<f64>> {
    if verdict.status != VerdictStatus::Counterexample {
        return Err(Error::contract(format!(
            "verdict status is {:?}, not Counterexample",
            verdict.status
        )));
    }
    verdict
        .witness
        .clone()
        .ok_or_else(|| Error::contract("counterexample verdict without witness"))
}

/// A condition C(x) > 0 quantified over the search domain. The engine only
/// needs a sound lower bound over a box and a concrete evaluation.
pub trait BoxCondition: Sync {
    fn id(&self) -> ConditionId;
    /// Sound lower bound of C over (box ∩ domain).
    fn lower_bound(&self, bx: &IntervalBox, eps_origin: f64) -> f64;
    /// Plain-arithmetic evaluation at a point.
    fn concrete(&self, x: &[f64]) -> f64;
}

#[derive(Debug, Clone, Copy)]
pub struct BnbSettings {
    /// δ precision of the weakened discharge.
    pub delta: f64,
    /// Radius of the excluded origin ball.
    pub eps_origin: f64,
    /// Total box budget across all conditions.
    pub budget: u64,
}

// ---------------------------------------------------------------------------
// Standard certificate conditions.
// ---------------------------------------------------------------------------

/// Immutable evaluation context shared by all boxes and workers.
pub struct VerifyContext {
    pub bundle: CertificateBundle,
    pub plant: Plant,
    storage: MlpExpr<Interval>,
    q: MlpExpr<Interval>,
    s: MlpExpr<Interval>,
    r: MlpExpr<Interval>,
}

impl VerifyContext {
    pub fn new(bundle: CertificateBundle, plant: Plant) -> Self {
        let mut alg = IntervalAlg;
        VerifyContext {
            storage: MlpExpr::bind(&mut alg, &bundle.storage_net),
            q: MlpExpr::bind(&mut alg, &bundle.q_net),
            s: MlpExpr::bind(&mut alg, &bundle.s_net),
            r: MlpExpr::bind(&mut alg, &bundle.r_net),
            bundle,
            plant,
        }
    }

    fn n(&self) -> usize {
        self.bundle.state_dim
    }

    fn m(&self) -> usize {
        self.bundle.input_dim
    }
}

fn sym_iv(w: &Mat<Interval>) -> Mat<Interval> {
    Mat::from_fn(w.rows(), w.cols(), |r, c| w.get(r, c).add(w.get(c, r)).scale(0.5))
}

fn sub_scaled_identity(w: &Mat<Interval>, c: f64) -> Mat<Interval> {
    Mat::from_fn(w.rows(), w.cols(), |r, col| {
        if r == col {
            w.get(r, col).sub(Interval::point(c))
        } else {
            w.get(r, col)
        }
    })
}

/// Rayleigh-style lower bound of xᵀWx over (box ∩ domain): an eigenvalue
/// bound of the interval matrix scaled by the attainable ‖x‖² range.
fn rayleigh_lower(w_sym: &Mat<Interval>, bx: &IntervalBox, eps: f64) -> f64 {
    let lam = sym_eig_lower_bound(w_sym);
    if !lam.is_finite() {
        return f64::NEG_INFINITY;
    }
    if lam >= 0.0 {
        lam * bx.min_norm_sq().max(eps * eps)
    } else {
        lam * bx.max_norm_sq()
    }
}

impl VerifyContext {
    fn storage_matrix(&self, x: &[Interval]) -> Mat<Interval> {
        let mut alg = IntervalAlg;
        let raw = self.storage.forward(&mut alg, x);
        sym_iv(&Mat::from_vec(self.n(), self.n(), raw).unwrap())
    }

    fn r_matrix(&self, x: &[Interval]) -> Mat<Interval> {
        let mut alg = IntervalAlg;
        let raw = self.r.forward(&mut alg, x);
        sym_iv(&Mat::from_vec(self.m(), self.m(), raw).unwrap())
    }

    fn delta_matrix_iv(&self, x: &[Interval]) -> Mat<Interval> {
        let mut alg = IntervalAlg;
        let n = self.n();
        let m = self.m();
        let q = sym_iv(&Mat::from_vec(n, n, self.q.forward(&mut alg, x)).unwrap());
        let s = Mat::from_vec(n, m, self.s.forward(&mut alg, x)).unwrap();
        let r = self.r_matrix(x);
        let y = solve_gauss(&mut alg, &r, &s.transpose());
        let sy = crate::algebra::mat_mul(&mut alg, &s, &y);
        sym_iv(&crate::algebra::mat_sub(&mut alg, &sy, &q))
    }

    /// Enclosures of (natural Schur value, factored quadratic matrix W with
    /// schur(x) = xᵀW(x)x) over a box.
    fn schur_pieces(&self, x: &[Interval]) -> (Interval, Mat<Interval>) {
        let mut alg = IntervalAlg;
        let n = self.n();
        let m = self.m();
        let (vt_raw, vt_jac) = self.storage.forward_with_jacobian(&mut alg, x);
        let vts = sym_iv(&Mat::from_vec(n, n, vt_raw).unwrap());
        let q = sym_iv(&Mat::from_vec(n, n, self.q.forward(&mut alg, x)).unwrap());
        let s = Mat::from_vec(n, m, self.s.forward(&mut alg, x)).unwrap();
        let r = self.r_matrix(x);
        let f = self.plant.drift(&mut alg, x);
        let fac = self.plant.drift_factor(&mut alg, x);
        let g = self.plant.input_matrix(&mut alg, x);

        // ∇V = A(x)·x with A = 2·sym(Ṽ) + B, B_{kj} = Σ_i x_i ∂Ṽ_ij/∂x_k.
        let a_mat = Mat::from_fn(n, n, |k, j| {
            let mut acc = vts.get(k, j).scale(2.0);
            for i in 0..n {
                acc = acc.add(x[i].mul(vt_jac.get(i * n + j, k)));
            }
            acc
        });

        // Natural ∇V enclosure keeps the diagonal squares tight.
        let xx = Mat::from_fn(n, n, |i, j| if i == j { x[i].square() } else { x[i].mul(x[j]) });
        let grad_v: Vec<Interval> = (0..n)
            .map(|k| {
                let mut acc = Interval::point(0.0);
                for j in 0..n {
                    acc = acc.add(vts.get(k, j).mul(x[j]).scale(2.0));
                }
                for i in 0..n {
                    for j in 0..n {
                        acc = acc.add(xx.get(i, j).mul(vt_jac.get(i * n + j, k)));
                    }
                }
                acc
            })
            .collect();

        // Natural Schur value: d − cᵀR⁻¹c.
        let gt = g.transpose();
        let gv: Vec<Interval> = (0..m)
            .map(|i| {
                let mut acc = Interval::point(0.0);
                for k in 0..n {
                    acc = acc.add(gt.get(i, k).mul(grad_v[k]));
                }
                acc
            })
            .collect();
        let st = s.transpose();
        let c_vec: Vec<Interval> = (0..m)
            .map(|i| {
                let mut acc = Interval::point(0.0);
                for k in 0..n {
                    acc = acc.add(st.get(i, k).mul(x[k]));
                }
                acc.sub(gv[i].scale(0.5))
            })
            .collect();
        let mut vf = Interval::point(0.0);
        for k in 0..n {
            vf = vf.add(grad_v[k].mul(f[k]));
        }
        let mut qx = Interval::point(0.0);
        for i in 0..n {
            for j in 0..n {
                qx = qx.add(xx.get(i, j).mul(q.get(i, j)));
            }
        }
        let d = qx.sub(vf);
        let rhs = Mat::from_vec(m, 1, c_vec.clone()).unwrap();
        let y = solve_gauss(&mut alg, &r, &rhs);
        let mut cy = Interval::point(0.0);
        for i in 0..m {
            cy = cy.add(c_vec[i].mul(y.get(i, 0)));
        }
        let natural = d.sub(cy);

        // Factored form: W = Q − AᵀF − CᵀR⁻¹C with C = Sᵀ − ½gᵀA.
        let at = a_mat.transpose();
        let atf = crate::algebra::mat_mul(&mut alg, &at, &fac);
        let gta = crate::algebra::mat_mul(&mut alg, &gt, &a_mat);
        let c_mat = Mat::from_fn(m, n, |i, j| st.get(i, j).sub(gta.get(i, j).scale(0.5)));
        let y2 = solve_gauss(&mut alg, &r, &c_mat);
        let ct = c_mat.transpose();
        let cty = crate::algebra::mat_mul(&mut alg, &ct, &y2);
        let w = Mat::from_fn(self.n(), self.n(), |i, j| {
            q.get(i, j).sub(atf.get(i, j)).sub(cty.get(i, j))
        });
        (natural, sym_iv(&w))
    }
}

/// Natural interval enclosure of a condition value over a box. Used by the
/// soundness checks; the branch-and-bound bound below additionally applies
/// the factored Rayleigh route.
pub fn interval_extend(ctx: &VerifyContext, cond: ConditionId, bx: &IntervalBox) -> Interval {
    let x = bx.intervals();
    let mut alg = IntervalAlg;
    match cond {
        ConditionId::BiLipschitzLower => {
            let w = sub_scaled_identity(&ctx.storage_matrix(&x), ctx.bundle.mu);
            quad_form(&mut alg, &x, &w)
        }
        ConditionId::BiLipschitzUpper => {
            let vts = ctx.storage_matrix(&x);
            let w = Mat::from_fn(vts.rows(), vts.cols(), |r, c| {
                let base = if r == c { Interval::point(ctx.bundle.nu) } else { Interval::point(0.0) };
                base.sub(vts.get(r, c))
            });
            quad_form(&mut alg, &x, &w)
        }
        ConditionId::Delta => {
            let d = ctx.delta_matrix_iv(&x);
            quad_form(&mut alg, &x, &d)
        }
        ConditionId::Schur => ctx.schur_pieces(&x).0,
        ConditionId::RPd => {
            let r = ctx.r_matrix(&x);
            let lo = sym_eig_lower_bound(&r);
            // Upper bound for λ_min: midpoint eigenvalue plus radius.
            let mid = Mat::from_fn(r.rows(), r.cols(), |i, j| r.get(i, j).mid());
            let hi = match sym_min_eig(&mid) {
                Ok(lam) => {
                    let mut rad = 0.0_f64;
                    for i in 0..r.rows() {
                        let row: f64 = (0..r.cols()).map(|j| 0.5 * r.get(i, j).width()).sum();
                        rad = rad.max(row);
                    }
                    lam + rad + 1e-12 * (1.0 + mid.max_abs())
                }
                Err(_) => f64::INFINITY,
            };
            Interval { lo: lo.min(hi), hi }
        }
    }
}

struct CertCondition {
    ctx: Arc<VerifyContext>,
    kind: ConditionId,
}

impl BoxCondition for CertCondition {
    fn id(&self) -> ConditionId {
        self.kind
    }

    fn lower_bound(&self, bx: &IntervalBox, eps: f64) -> f64 {
        let x = bx.intervals();
        match self.kind {
            ConditionId::BiLipschitzLower => {
                let w = sub_scaled_identity(&self.ctx.storage_matrix(&x), self.ctx.bundle.mu);
                let mut alg = IntervalAlg;
                let natural = quad_form(&mut alg, &x, &w);
                natural.lo.max(rayleigh_lower(&w, bx, eps))
            }
            ConditionId::BiLipschitzUpper => {
                let vts = self.ctx.storage_matrix(&x);
                let w = Mat::from_fn(vts.rows(), vts.cols(), |r, c| {
                    let base =
                        if r == c { Interval::point(self.ctx.bundle.nu) } else { Interval::point(0.0) };
                    base.sub(vts.get(r, c))
                });
                let mut alg = IntervalAlg;
                let natural = quad_form(&mut alg, &x, &w);
                natural.lo.max(rayleigh_lower(&w, bx, eps))
            }
            ConditionId::Delta => {
                let d = self.ctx.delta_matrix_iv(&x);
                let mut alg = IntervalAlg;
                let natural = quad_form(&mut alg, &x, &d);
                natural.lo.max(rayleigh_lower(&d, bx, eps))
            }
            ConditionId::Schur => {
                let (natural, w) = self.ctx.schur_pieces(&x);
                natural.lo.max(rayleigh_lower(&w, bx, eps))
            }
            ConditionId::RPd => {
                let r = self.ctx.r_matrix(&x);
                sym_eig_lower_bound(&r)
            }
        }
    }

    fn concrete(&self, x: &[f64]) -> f64 {
        concrete_condition(&self.ctx.bundle, &self.ctx.plant, self.kind, x)
    }
}

/// Plain-arithmetic condition value at a point.
pub fn concrete_condition(
    bundle: &CertificateBundle,
    plant: &Plant,
    cond: ConditionId,
    x: &[f64],
) -> f64 {
    let xtx: f64 = x.iter().map(|v| v * v).sum();
    match cond {
        ConditionId::BiLipschitzLower => match certificates::storage_value(bundle, x) {
            Ok(v) => v - bundle.mu * xtx,
            Err(_) => f64::NEG_INFINITY,
        },
        ConditionId::BiLipschitzUpper => match certificates::storage_value(bundle, x) {
            Ok(v) => bundle.nu * xtx - v,
            Err(_) => f64::NEG_INFINITY,
        },
        ConditionId::Delta => match certificates::delta_matrix(bundle, x) {
            Ok(d) => d.quad_form(x),
            Err(_) => f64::NEG_INFINITY,
        },
        ConditionId::Schur => match certificates::schur_scalar(bundle, plant, x) {
            Ok(s) => s,
            Err(_) => f64::NEG_INFINITY,
        },
        ConditionId::RPd => {
            let m = bundle.input_dim;
            match bundle.r_net.forward(x) {
                Ok(raw) => match Mat::from_vec(m, m, raw) {
                    Ok(r) => sym_min_eig(&r.sym()).unwrap_or(f64::NEG_INFINITY),
                    Err(_) => f64::NEG_INFINITY,
                },
                Err(_) => f64::NEG_INFINITY,
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Branch-and-bound engine.
// ---------------------------------------------------------------------------

enum Disposition {
    Discharged,
    Cex(Vec<f64>),
    Split,
}

enum ConditionOutcome {
    Discharged,
    Cex(Vec<f64>),
    Budget,
}

fn representative(bx: &IntervalBox, eps: f64) -> Vec<f64> {
    let mid = bx.mid();
    let norm: f64 = mid.iter().map(|v| v * v).sum::<f64>();
    if norm > eps * eps {
        mid
    } else {
        bx.farthest_corner()
    }
}

fn process_box(cond: &dyn BoxCondition, bx: &IntervalBox, s: &BnbSettings) -> Disposition {
    let eps2 = s.eps_origin * s.eps_origin;
    if bx.max_norm_sq() <= eps2 {
        // Entirely inside the excluded ball: outside the search domain.
        return Disposition::Discharged;
    }
    let lb = cond.lower_bound(bx, s.eps_origin);
    if lb > 0.0 {
        return Disposition::Discharged;
    }
    let rep = representative(bx, s.eps_origin);
    let cval = cond.concrete(&rep);
    if cval <= 0.0 {
        return Disposition::Cex(rep);
    }
    if bx.max_width() < s.delta {
        // δ-weakened discharge at the resolution floor.
        if cval <= s.delta {
            Disposition::Cex(rep)
        } else {
            Disposition::Discharged
        }
    } else {
        Disposition::Split
    }
}

fn run_condition(
    cond: &dyn BoxCondition,
    region: &[f64],
    s: &BnbSettings,
    explored: &mut u64,
) -> ConditionOutcome {
    let mut queue = vec![IntervalBox::from_region(region)];
    while !queue.is_empty() {
        if *explored + queue.len() as u64 > s.budget {
            return ConditionOutcome::Budget;
        }
        *explored += queue.len() as u64;
        let results: Vec<Disposition> =
            queue.par_iter().map(|bx| process_box(cond, bx, s)).collect();

        // First counterexample wins; ties break on the lexicographically
        // smallest box lower corner so parallel order cannot matter.
        let mut best_cex: Option<(usize, &Vec<f64>)> = None;
        for (i, disp) in results.iter().enumerate() {
            if let Disposition::Cex(w) = disp {
                let better = match best_cex {
                    None => true,
                    Some((j, _)) => lex_less(&queue[i].lo, &queue[j].lo),
                };
                if better {
                    best_cex = Some((i, w));
                }
            }
        }
        if let Some((_, w)) = best_cex {
            return ConditionOutcome::Cex(w.clone());
        }

        let eps2 = s.eps_origin * s.eps_origin;
        let mut next = Vec::new();
        for (bx, disp) in queue.iter().zip(&results) {
            if matches!(disp, Disposition::Split) {
                let (l, r) = bx.split();
                if l.max_norm_sq() > eps2 {
                    next.push(l);
                }
                if r.max_norm_sq() > eps2 {
                    next.push(r);
                }
            }
        }
        queue = next;
    }
    ConditionOutcome::Discharged
}

fn lex_less(a: &[f64], b: &[f64]) -> bool {
    for (x, y) in a.iter().zip(b) {
        if x < y {
            return true;
        }
        if x > y {
            return false;
        }
    }
    false
}

/// Runs the engine over an explicit condition list (in order); certified
/// means every condition discharged every box.
pub fn verify_conditions(
    conditions: &[&dyn BoxCondition],
    region: &[f64],
    settings: &BnbSettings,
) -> Verdict {
    let mut explored = 0u64;
    for cond in conditions {
        match run_condition(*cond, region, settings, &mut explored) {
            ConditionOutcome::Discharged => continue,
            ConditionOutcome::Cex(witness) => {
                return Verdict {
                    status: VerdictStatus::Counterexample,
                    condition: Some(cond.id()),
                    witness: Some(witness),
                    delta: settings.delta,
                    boxes_explored: explored,
                }
            }
            ConditionOutcome::Budget => {
                return Verdict {
                    status: VerdictStatus::InconclusiveBudget,
                    condition: Some(cond.id()),
                    witness: None,
                    delta: settings.delta,
                    boxes_explored: explored,
                }
            }
        }
    }
    Verdict {
        status: VerdictStatus::Certified,
        condition: None,
        witness: None,
        delta: settings.delta,
        boxes_explored: explored,
    }
}

/// Certifies the bundle over (region box) \ B(0, ε) at δ precision.
///
/// Condition order: R positive definiteness first (the Schur complement
/// needs it), then the Schur scalar, xᵀΔx, and the bi-Lipschitz bounds.
pub fn verify(
    bundle: &CertificateBundle,
    plant: &Plant,
    delta: f64,
    eps_origin: f64,
    budget: u64,
) -> Result<Verdict> {
    bundle.validate()?;
    if plant.state_dim() != bundle.state_dim || plant.input_dim() != bundle.input_dim {
        return Err(Error::shape("plant and bundle dimensions differ"));
    }
    if delta <= 0.0 || eps_origin <= 0.0 {
        return Err(Error::contract("delta and eps_origin must be positive"));
    }
    let settings = BnbSettings { delta, eps_origin, budget };
    let region = plant.region().to_vec();
    let ctx = Arc::new(VerifyContext::new(bundle.clone(), plant.clone()));

    // Constant R is decided by one eigenvalue check instead of search.
    let mut explored_pre = 0u64;
    let r_is_constant = bundle.r_net.weights.iter().all(|w| w.max_abs() == 0.0);
    if r_is_constant {
        let origin = vec![0.0; bundle.state_dim];
        let lam = concrete_condition(bundle, plant, ConditionId::RPd, &origin);
        if lam <= 0.0 {
            let mut witness = vec![0.0; bundle.state_dim];
            witness[0] = (2.0 * eps_origin).min(region[0]);
            return Ok(Verdict {
                status: VerdictStatus::Counterexample,
                condition: Some(ConditionId::RPd),
                witness: Some(witness),
                delta,
                boxes_explored: 0,
            });
        }
        explored_pre = 1;
    }

    let order = [
        ConditionId::RPd,
        ConditionId::Schur,
        ConditionId::Delta,
        ConditionId::BiLipschitzLower,
        ConditionId::BiLipschitzUpper,
    ];
    let conds: Vec<CertCondition> = order
        .iter()
        .filter(|k| !(r_is_constant && **k == ConditionId::RPd))
        .map(|k| CertCondition { ctx: Arc::clone(&ctx), kind: *k })
        .collect();
    let refs: Vec<&dyn BoxCondition> = conds.iter().map(|c| c as &dyn BoxCondition).collect();
    let mut verdict = verify_conditions(&refs, &region, &settings);
    verdict.boxes_explored += explored_pre;
    Ok(verdict)
}
