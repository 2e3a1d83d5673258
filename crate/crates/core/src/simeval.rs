//! Closed-loop simulation, empirical cumulative cost, the Riccati/LQR
//! baseline and the value-consistency report that checks the learned
//! storage function against the integrated inverse-optimal running cost.

use crate::certificates::{self, CertificateBundle};
use crate::error::{Error, Result};
use crate::mat::{solve_lyapunov, Mat};
use crate::plants::Plant;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub h: f64,
    pub states: Vec<Vec<f64>>,
    pub inputs: Vec<Vec<f64>>,
    pub running_cost: Vec<f64>,
    /// Set when any state left the plant's region box mid-run.
    pub left_region: bool,
}

impl Trajectory {
    pub fn final_state(&self) -> &[f64] {
        self.states.last().expect("trajectory is never empty")
    }

    pub fn final_norm(&self) -> f64 {
        self.final_state().iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// One classical RK4 step of ẋ = dynamics(x, u_fn(x)); the controller is
/// re-evaluated at every intermediate stage.
pub fn rk4_step<D, U>(dynamics: D, x: &[f64], u_fn: U, h: f64) -> Result<Vec<f64>>
where
    D: Fn(&[f64], &[f64]) -> Vec<f64>,
    U: Fn(&[f64]) -> Result<Vec<f64>>,
{
    if h <= 0.0 {
        return Err(Error::contract("step size must be positive"));
    }
    let stage = |x: &[f64]| -> Result<Vec<f64>> {
        let u = u_fn(x)?;
        let dx = dynamics(x, &u);
        if dx.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { step: 0 });
        }
        Ok(dx)
    };
    let k1 = stage(x)?;
    let x2: Vec<f64> = x.iter().zip(&k1).map(|(a, k)| a + 0.5 * h * k).collect();
    let k2 = stage(&x2)?;
    let x3: Vec<f64> = x.iter().zip(&k2).map(|(a, k)| a + 0.5 * h * k).collect();
    let k3 = stage(&x3)?;
    let x4: Vec<f64> = x.iter().zip(&k3).map(|(a, k)| a + h * k).collect();
    let k4 = stage(&x4)?;
    Ok(x.iter()
        .enumerate()
        .map(|(i, a)| a + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect())
}

/// Integrates the closed loop ẋ = f(x) + g(x)·controller(x) from x0 and
/// records states, inputs and the running cost l(x, u) at every step.
pub fn simulate<U, L>(
    plant: &Plant,
    controller: U,
    x0: &[f64],
    h: f64,
    t_final: f64,
    running_cost: L,
) -> Result<Trajectory>
where
    U: Fn(&[f64]) -> Result<Vec<f64>>,
    L: Fn(&[f64], &[f64]) -> f64,
{
    if x0.len() != plant.state_dim() {
        return Err(Error::shape("initial state length != n"));
    }
    let steps = (t_final / h).round() as usize;
    let dynamics = |x: &[f64], u: &[f64]| -> Vec<f64> {
        let f = plant.drift_f64(x);
        let gu = plant.input_matrix_f64(x).mat_vec(u);
        f.iter().zip(&gu).map(|(a, b)| a + b).collect()
    };
    let mut states = Vec::with_capacity(steps + 1);
    let mut inputs = Vec::with_capacity(steps + 1);
    let mut costs = Vec::with_capacity(steps + 1);
    let mut left_region = !plant.contains(x0);
    let mut x = x0.to_vec();
    for step in 0..=steps {
        let u = controller(&x)?;
        states.push(x.clone());
        costs.push(running_cost(&x, &u));
        inputs.push(u);
        if step == steps {
            break;
        }
        x = rk4_step(&dynamics, &x, &controller, h).map_err(|e| match e {
            Error::Divergence { .. } => Error::Divergence { step },
            other => other,
        })?;
        if !plant.contains(&x) {
            left_region = true;
        }
    }
    Ok(Trajectory { h, states, inputs, running_cost: costs, left_region })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CostMode {
    /// h-scaled left Riemann sum — an estimate of ∫ l dt.
    Integral,
    /// Plain sum over sampled steps, no h factor.
    SampleSum,
}

/// Cumulative cost of a trajectory.
pub fn empirical_cost(traj: &Trajectory, mode: CostMode) -> f64 {
    match mode {
        CostMode::Integral => {
            let n = traj.running_cost.len();
            traj.h * traj.running_cost[..n.saturating_sub(1)].iter().sum::<f64>()
        }
        CostMode::SampleSum => traj.running_cost.iter().sum(),
    }
}

#[derive(Debug, Clone)]
pub struct LqrSolution {
    pub p: Mat<f64>,
    pub k: Mat<f64>,
    pub residual: f64,
}

/// Solves AᵀP + PA − PBR⁻¹BᵀP + Q = 0 by Newton–Kleinman from a
/// stabilizing seed (K = 0 when A is already Hurwitz, otherwise a
/// discretized value-iteration warm start).
pub fn lqr_baseline(a: &Mat<f64>, b: &Mat<f64>, qc: &Mat<f64>, rc: &Mat<f64>) -> Result<LqrSolution> {
    let n = a.rows();
    let m = b.cols();
    if !a.is_square() || b.rows() != n || qc.rows() != n || rc.rows() != m {
        return Err(Error::shape("lqr: inconsistent matrix dimensions"));
    }
    let (rinv, _) = rc.inverse("Rc")?;

    let mut k = Mat::zeros(m, n);
    if !a.is_hurwitz(0.0) {
        k = value_iteration_seed(a, b, qc, rc, &rinv)?;
    }
    let bk = b.mul(&k);
    if !a.sub(&bk).is_hurwitz(0.0) {
        return Err(Error::BaselineUnavailable(
            "no stabilizing seed found (is (A, B) stabilizable?)".into(),
        ));
    }

    let mut p = Mat::zeros(n, n);
    for _ in 0..60 {
        let ak = a.sub(&b.mul(&k));
        let c = qc.add(&k.transpose().mul(rc).mul(&k));
        p = solve_lyapunov(&ak, &c)?;
        let k_next = rinv.mul(&b.transpose()).mul(&p);
        let diff = k_next.sub(&k).max_abs();
        k = k_next;
        if diff < 1e-13 {
            break;
        }
    }
    let residual = a
        .transpose()
        .mul(&p)
        .add(&p.mul(a))
        .sub(&p.mul(b).mul(&rinv).mul(&b.transpose()).mul(&p))
        .add(qc)
        .max_abs();
    if residual > 1e-8 {
        return Err(Error::BaselineUnavailable(format!(
            "Newton iteration stalled at residual {residual:.3e}"
        )));
    }
    Ok(LqrSolution { p, k, residual })
}

/// Euler-discretized Riccati value iteration; only needs to land inside the
/// stabilizing basin for the Newton polish.
fn value_iteration_seed(
    a: &Mat<f64>,
    b: &Mat<f64>,
    qc: &Mat<f64>,
    rc: &Mat<f64>,
    rinv: &Mat<f64>,
) -> Result<Mat<f64>> {
    let n = a.rows();
    let tau = 1e-3;
    let ad = Mat::identity(n).add(&a.scale(tau));
    let bd = b.scale(tau);
    let qd = qc.scale(tau);
    let mut p = qd.clone();
    for _ in 0..400_000 {
        // P⁺ = Adᵀ P Ad − Adᵀ P Bd (Rd + Bdᵀ P Bd)⁻¹ Bdᵀ P Ad + Qd
        let pa = p.mul(&ad);
        let pb = p.mul(&bd);
        let inner = rc.scale(tau).add(&bd.transpose().mul(&pb));
        let (inner_inv, _) = inner.inverse("lqr seed")?;
        let next = ad
            .transpose()
            .mul(&pa)
            .sub(&ad.transpose().mul(&pb).mul(&inner_inv).mul(&bd.transpose()).mul(&pa))
            .add(&qd)
            .sym();
        let diff = next.sub(&p).max_abs();
        p = next;
        if diff < 1e-11 * (1.0 + p.max_abs()) {
            break;
        }
        if !p.is_finite() {
            return Err(Error::BaselineUnavailable("Riccati iteration diverged".into()));
        }
    }
    Ok(rinv.mul(&b.transpose()).mul(&p))
}

#[derive(Debug, Clone)]
pub struct ValueReport {
    /// Riemann sum of l̄ along the trajectory.
    pub j_num: f64,
    /// V at the initial state.
    pub v0: f64,
    /// |J − V(x0)| / V(x0).
    pub rel_gap: f64,
    /// max over steps of ∇V·(f + gu) − w(x, u); ≤ 0 up to tolerance when
    /// the dissipation inequality holds along the run.
    pub max_dissipation_residual: f64,
    /// Largest single-step increase of V (negative when monotone).
    pub max_v_increase: f64,
}

/// Checks that the value of the inverse-optimal problem matches V(x0)
/// along a converged closed-loop trajectory.
pub fn value_consistency(
    bundle: &CertificateBundle,
    plant: &Plant,
    traj: &Trajectory,
) -> Result<ValueReport> {
    if traj.final_norm() >= 1e-3 {
        return Err(Error::contract(format!(
            "trajectory has not converged: ‖x(T)‖ = {:.3e}",
            traj.final_norm()
        )));
    }
    let mut j_num = 0.0;
    let mut max_res = f64::NEG_INFINITY;
    let mut prev_v: Option<f64> = None;
    let mut max_inc = f64::NEG_INFINITY;
    for (step, (x, u)) in traj.states.iter().zip(&traj.inputs).enumerate() {
        let (_, lbar) = certificates::inverse_cost(bundle, plant, x, u)?;
        if step + 1 < traj.states.len() {
            j_num += traj.h * lbar;
        }
        let grad = certificates::storage_gradient(bundle, x)?;
        let f = plant.drift_f64(x);
        let gu = plant.input_matrix_f64(x).mat_vec(u);
        let vdot: f64 = grad.iter().zip(f.iter().zip(&gu)).map(|(g, (a, b))| g * (a + b)).sum();
        let w = certificates::supply_rate(bundle, x, u)?;
        max_res = max_res.max(vdot - w);
        let v = certificates::storage_value(bundle, x)?;
        if let Some(pv) = prev_v {
            max_inc = max_inc.max(v - pv);
        }
        prev_v = Some(v);
    }
    let v0 = certificates::storage_value(bundle, &traj.states[0])?;
    let rel_gap = if v0.abs() < 1e-30 { j_num.abs() } else { (j_num - v0).abs() / v0 };
    Ok(ValueReport { j_num, v0, rel_gap, max_dissipation_residual: max_res, max_v_increase: max_inc })
}

#[derive(Debug, Clone)]
pub struct TrialResult {
    pub x0: Vec<f64>,
    pub cost: f64,
    pub converged: bool,
    pub final_norm: f64,
}

/// Runs `trials` closed-loop simulations from uniform random initial states
/// in the region box and reports per-trial cost and convergence.
pub fn evaluate_trials<U>(
    plant: &Plant,
    controller: U,
    trials: usize,
    seed: u64,
    h: f64,
    t_final: f64,
    conv_tol: f64,
    mode: CostMode,
) -> Result<Vec<TrialResult>>
where
    U: Fn(&[f64]) -> Result<Vec<f64>> + Sync,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x0s: Vec<Vec<f64>> = (0..trials)
        .map(|_| plant.region().iter().map(|r| rng.random_range(-*r..*r)).collect())
        .collect();
    let l = |x: &[f64], u: &[f64]| {
        x.iter().map(|v| v * v).sum::<f64>() + u.iter().map(|v| v * v).sum::<f64>()
    };
    x0s.par_iter()
        .map(|x0| {
            let traj = simulate(plant, &controller, x0, h, t_final, l)?;
            let fnorm = traj.final_norm();
            Ok(TrialResult {
                x0: x0.clone(),
                cost: empirical_cost(&traj, mode),
                converged: fnorm < conv_tol,
                final_norm: fnorm,
            })
        })
        .collect()
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plants;

    fn no_input(_: &[f64]) -> Result<Vec<f64>> {
        Ok(vec![0.0])
    }

    #[test]
    fn rk4_exponential_decay_value() {
        // One step of ẋ = −x from 1 at h = 0.1: the degree-4 Taylor
        // truncation 0.904837500 (exact flow: e^{−0.1} = 0.904837418…).
        let dyn_ = |x: &[f64], _u: &[f64]| vec![-x[0]];
        let x1 = rk4_step(dyn_, &[1.0], no_input, 0.1).unwrap();
        assert!((x1[0] - 0.904837500).abs() < 1e-9);
        assert!((x1[0] - (-0.1_f64).exp()).abs() < 1e-6);
    }

    #[test]
    fn rk4_exact_on_constants_and_zero_field() {
        let zero = |_: &[f64], _: &[f64]| vec![0.0];
        let x1 = rk4_step(zero, &[0.7], no_input, 0.25).unwrap();
        assert_eq!(x1[0], 0.7);
        let one = |_: &[f64], _: &[f64]| vec![1.0];
        let x1 = rk4_step(one, &[0.7], no_input, 0.25).unwrap();
        assert_eq!(x1[0], 0.95);
    }

    #[test]
    fn rk4_order_check() {
        // Terminal error on ẋ = −x at t = 1 shrinks ≈ 16× when h halves.
        let dyn_ = |x: &[f64], _: &[f64]| vec![-x[0]];
        let run = |h: f64| {
            let mut x = vec![1.0];
            let steps = (1.0 / h).round() as usize;
            for _ in 0..steps {
                x = rk4_step(dyn_, &x, no_input, h).unwrap();
            }
            (x[0] - (-1.0_f64).exp()).abs()
        };
        let ratio = run(0.1) / run(0.05);
        assert!((12.0..=20.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn simulate_integrator_closed_loop() {
        let plant = plants::integrator();
        let ctrl = |x: &[f64]| Ok(vec![-x[0]]);
        let l = |x: &[f64], u: &[f64]| x[0] * x[0] + u[0] * u[0];
        let traj = simulate(&plant, ctrl, &[1.0], 0.01, 10.0, l).unwrap();
        assert_eq!(traj.states.len(), 1001);
        assert!(traj.final_norm() < 1e-4);
        // x(t) ≈ e^{−t} pointwise.
        let mid = &traj.states[500];
        assert!((mid[0] - (-5.0_f64).exp()).abs() < 1e-6);
    }

    #[test]
    fn simulate_equilibrium_is_identically_zero() {
        let plant = plants::integrator();
        let ctrl = |x: &[f64]| Ok(vec![-x[0]]);
        let traj = simulate(&plant, ctrl, &[0.0], 0.01, 1.0, |_, _| 0.0).unwrap();
        assert!(traj.states.iter().all(|s| s[0] == 0.0));
        assert_eq!(empirical_cost(&traj, CostMode::Integral), 0.0);
    }

    #[test]
    fn divergence_reports_step() {
        let plant = plants::integrator();
        // Explosive feedback u = x³ · big.
        let ctrl = |x: &[f64]| Ok(vec![x[0] * x[0] * x[0] * 1e150]);
        let err = simulate(&plant, ctrl, &[1.0], 0.1, 5.0, |_, _| 0.0);
        assert!(matches!(err, Err(Error::Divergence { .. })));
    }

    #[test]
    fn empirical_cost_integrates_closed_form() {
        // Integrator with u = −x from x0: l = 2e^{−2t}, ∫₀^∞ = x0².
        let plant = plants::integrator();
        let ctrl = |x: &[f64]| Ok(vec![-x[0]]);
        let l = |x: &[f64], u: &[f64]| x[0] * x[0] + u[0] * u[0];
        let traj = simulate(&plant, ctrl, &[1.0], 1e-3, 12.0, l).unwrap();
        let cost = empirical_cost(&traj, CostMode::Integral);
        assert!((cost - 1.0).abs() < 2e-3, "cost {cost}");
    }

    #[test]
    fn lqr_scalar_integrator() {
        // ẋ = u, Q = R = 1 → P = 1, K = 1.
        let a = Mat::zeros(1, 1);
        let b = Mat::from_vec(1, 1, vec![1.0]).unwrap();
        let sol = lqr_baseline(&a, &b, &Mat::identity(1), &Mat::identity(1)).unwrap();
        assert!((sol.p.get(0, 0) - 1.0).abs() < 1e-10);
        assert!((sol.k.get(0, 0) - 1.0).abs() < 1e-10);
        assert!(sol.residual < 1e-10);
    }

    #[test]
    fn lqr_stabilizes_benchmarks() {
        for plant in [plants::circuit(), plants::pendulum(), plants::rodcart(),
                      plants::pendulum_dynamic().unwrap()] {
            let (a, b) = plant.linearization();
            let n = a.rows();
            let sol = lqr_baseline(&a, &b, &Mat::identity(n), &Mat::identity(b.cols())).unwrap();
            let acl = a.sub(&b.mul(&sol.k));
            assert!(acl.is_hurwitz(1e-9), "{} closed loop not Hurwitz", plant.name());
            assert!(sol.residual < 1e-8, "{} residual {}", plant.name(), sol.residual);
        }
    }

    #[test]
    fn value_consistency_integrator_certificate() {
        let bundle = crate::certificates::tests::integrator_bundle();
        let plant = plants::integrator();
        let ctrl = |x: &[f64]| certificates::controller(&bundle, x);
        let l = |x: &[f64], u: &[f64]| x[0] * x[0] + u[0] * u[0];
        let traj = simulate(&plant, ctrl, &[1.0], 1e-3, 15.0, l).unwrap();
        let report = value_consistency(&bundle, &plant, &traj).unwrap();
        // Closed form: J = ∫ l̄(e^{−t}, −e^{−t}) dt = x0² = V(x0).
        assert!((report.v0 - 1.0).abs() < 1e-12);
        assert!(report.rel_gap < 0.02, "gap {}", report.rel_gap);
        assert!(report.max_dissipation_residual < 1e-9);
        assert!(report.max_v_increase < 0.0);
    }

    #[test]
    fn value_consistency_requires_convergence() {
        let bundle = crate::certificates::tests::integrator_bundle();
        let plant = plants::integrator();
        let ctrl = |x: &[f64]| certificates::controller(&bundle, x);
        let traj = simulate(&plant, ctrl, &[1.0], 0.01, 0.5, |_, _| 0.0).unwrap();
        assert!(matches!(
            value_consistency(&bundle, &plant, &traj),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn evaluate_trials_counts_and_converges() {
        let plant = plants::circuit();
        let (a, b) = plant.linearization();
        let sol = lqr_baseline(&a, &b, &Mat::identity(2), &Mat::identity(1)).unwrap();
        let k = sol.k.clone();
        let ctrl = move |x: &[f64]| Ok(vec![-k.mat_vec(x)[0]]);
        let trials = evaluate_trials(&plant, ctrl, 30, 7, 0.01, 20.0, 1e-2, CostMode::Integral)
            .unwrap();
        assert_eq!(trials.len(), 30);
        assert!(trials.iter().all(|t| t.converged));
        assert!(trials.iter().all(|t| t.cost >= 0.0));
    }
}
