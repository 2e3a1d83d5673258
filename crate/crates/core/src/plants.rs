//! Benchmark dynamics ẋ = f(x) + g(x)u, their box regions of interest, and
//! the dynamic-controller augmentation that stacks an integrator state onto
//! the plant.
//!
//! Every plant is shifted so the origin is the equilibrium: f(0) = 0, and
//! all drifts expose a factorization f(x) = F(x)·x that the verifier uses
//! for scale-aware enclosures.

use crate::algebra::Algebra;
use crate::error::{Error, Result};
use crate::mat::Mat;
use std::collections::BTreeMap;

#[derive(Debug, Clone)]
pub struct Plant {
    name: String,
    state_dim: usize,
    input_dim: usize,
    /// Symmetric per-axis half-widths of the region of interest.
    region: Vec<f64>,
    kind: PlantKind,
}

#[derive(Debug, Clone)]
enum PlantKind {
    /// ẋ = A x + B u.
    Linear { a: Mat<f64>, b: Mat<f64> },
    /// θ̈ = (G/L)·sinθ − (b/(mL²))·θ̇ + u/(mL²), origin = upright.
    Pendulum { gravity: f64, damping: f64, mass: f64, length: f64 },
    /// Base plant plus integrator states ẋ_c = −x[tracked].
    Augmented { base: Box<Plant>, tracked: Vec<usize> },
}

impl Plant {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn region(&self) -> &[f64] {
        &self.region
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.state_dim
            && x.iter().zip(&self.region).all(|(v, r)| v.abs() <= *r + 1e-12)
    }

    pub fn clamp_to_region(&self, x: &mut [f64]) {
        for (v, r) in x.iter_mut().zip(&self.region) {
            *v = v.clamp(-*r, *r);
        }
    }

    /// f(x).
    pub fn drift<A: Algebra>(&self, alg: &mut A, x: &[A::V]) -> Vec<A::V> {
        assert_eq!(x.len(), self.state_dim);
        match &self.kind {
            PlantKind::Linear { a, .. } => {
                let ab = bind_mat(alg, a);
                crate::algebra::mat_vec(alg, &ab, x)
            }
            PlantKind::Pendulum { gravity, damping, mass, length } => {
                let sin_th = alg.sin(x[0]);
                let grav = alg.scale(gravity / length, sin_th);
                let damp = alg.scale(-damping / (mass * length * length), x[1]);
                vec![x[1], alg.add(grav, damp)]
            }
            PlantKind::Augmented { base, tracked } => {
                let nb = base.state_dim;
                let mut f = base.drift(alg, &x[..nb]);
                for t in tracked {
                    f.push(alg.neg(x[*t]));
                }
                f
            }
        }
    }

    /// g(x), shape n×m.
    pub fn input_matrix<A: Algebra>(&self, alg: &mut A, x: &[A::V]) -> Mat<A::V> {
        assert_eq!(x.len(), self.state_dim);
        match &self.kind {
            PlantKind::Linear { b, .. } => bind_mat(alg, b),
            PlantKind::Pendulum { mass, length, .. } => {
                let zero = alg.constant(0.0);
                let gain = alg.constant(1.0 / (mass * length * length));
                Mat::from_vec(2, 1, vec![zero, gain]).unwrap()
            }
            PlantKind::Augmented { base, tracked } => {
                let gb = base.input_matrix(alg, &x[..base.state_dim]);
                let zero = alg.constant(0.0);
                Mat::from_fn(self.state_dim, self.input_dim, |r, c| {
                    if r < base.state_dim {
                        gb.get(r, c)
                    } else {
                        let _ = tracked;
                        zero
                    }
                })
            }
        }
    }

    /// F(x) with f(x) = F(x)·x exactly; used by the verifier to bound
    /// state-quadratic condition values.
    pub fn drift_factor<A: Algebra>(&self, alg: &mut A, x: &[A::V]) -> Mat<A::V> {
        assert_eq!(x.len(), self.state_dim);
        match &self.kind {
            PlantKind::Linear { a, .. } => bind_mat(alg, a),
            PlantKind::Pendulum { gravity, damping, mass, length } => {
                let zero = alg.constant(0.0);
                let one = alg.constant(1.0);
                let sc = alg.sinc(x[0]);
                let grav = alg.scale(gravity / length, sc);
                let damp = alg.constant(-damping / (mass * length * length));
                Mat::from_vec(2, 2, vec![zero, one, grav, damp]).unwrap()
            }
            PlantKind::Augmented { base, tracked } => {
                let fb = base.drift_factor(alg, &x[..base.state_dim]);
                let zero = alg.constant(0.0);
                let neg_one = alg.constant(-1.0);
                let nb = base.state_dim;
                Mat::from_fn(self.state_dim, self.state_dim, |r, c| {
                    if r < nb && c < nb {
                        fb.get(r, c)
                    } else if r >= nb && c == tracked[r - nb] {
                        neg_one
                    } else {
                        zero
                    }
                })
            }
        }
    }

    pub fn drift_f64(&self, x: &[f64]) -> Vec<f64> {
        let mut alg = crate::algebra::ConcreteAlg;
        self.drift(&mut alg, x)
    }

    pub fn input_matrix_f64(&self, x: &[f64]) -> Mat<f64> {
        let mut alg = crate::algebra::ConcreteAlg;
        self.input_matrix(&mut alg, x)
    }

    /// (A, B) = (F(0), g(0)).
    pub fn linearization(&self) -> (Mat<f64>, Mat<f64>) {
        let mut alg = crate::algebra::ConcreteAlg;
        let origin = vec![0.0; self.state_dim];
        (self.drift_factor(&mut alg, &origin), self.input_matrix(&mut alg, &origin))
    }
}

fn bind_mat<A: Algebra>(alg: &mut A, m: &Mat<f64>) -> Mat<A::V> {
    Mat::from_fn(m.rows(), m.cols(), |r, c| alg.constant(m.get(r, c)))
}

/// General linear plant ẋ = Ax + Bu.
pub fn linear(name: &str, a: Mat<f64>, b: Mat<f64>, region: Vec<f64>) -> Result<Plant> {
    if !a.is_square() || a.rows() != b.rows() || region.len() != a.rows() {
        return Err(Error::shape("linear plant dimensions are inconsistent"));
    }
    Ok(Plant {
        name: name.to_string(),
        state_dim: a.rows(),
        input_dim: b.cols(),
        region,
        kind: PlantKind::Linear { a, b },
    })
}

/// Series RLC circuit with unit components: x = (i_L, v_C),
/// ẋ₁ = −x₁ − x₂ + u, ẋ₂ = x₁.
pub fn circuit() -> Plant {
    circuit_with(1.0, 1.0, 1.0)
}

pub fn circuit_with(resistance: f64, inductance: f64, capacitance: f64) -> Plant {
    let a = Mat::from_vec(
        2,
        2,
        vec![-resistance / inductance, -1.0 / inductance, 1.0 / capacitance, 0.0],
    )
    .unwrap();
    let b = Mat::from_vec(2, 1, vec![1.0 / inductance, 0.0]).unwrap();
    linear("circuit", a, b, vec![1.0, 1.0]).unwrap()
}

/// Inverted pendulum about the upright position: x = (θ, θ̇).
pub fn pendulum() -> Plant {
    pendulum_with(9.81, 0.1, 1.0, 1.0)
}

pub fn pendulum_with(gravity: f64, damping: f64, mass: f64, length: f64) -> Plant {
    Plant {
        name: "pendulum".to_string(),
        state_dim: 2,
        input_dim: 1,
        region: vec![std::f64::consts::PI, 2.0],
        kind: PlantKind::Pendulum { gravity, damping, mass, length },
    }
}

/// Flexible rod on a cart: x = (p, d, ṗ, ḋ) with cart position p and tip
/// displacement d; p̈ = u/M_c, d̈ = −(k/m_t)d − (c/m_t)ḋ − u/M_c.
pub fn rodcart() -> Plant {
    rodcart_with(1.0, 0.1, 10.0, 0.1)
}

pub fn rodcart_with(cart_mass: f64, tip_mass: f64, stiffness: f64, damping: f64) -> Plant {
    let a = Mat::from_vec(
        4,
        4,
        vec![
            0.0, 0.0, 1.0, 0.0, //
            0.0, 0.0, 0.0, 1.0, //
            0.0, 0.0, 0.0, 0.0, //
            0.0, -stiffness / tip_mass, 0.0, -damping / tip_mass,
        ],
    )
    .unwrap();
    let b = Mat::from_vec(4, 1, vec![0.0, 0.0, 1.0 / cart_mass, -1.0 / cart_mass]).unwrap();
    linear("rodcart", a, b, vec![0.1, 0.1, 0.1, 0.1]).unwrap()
}

/// Single integrator ẋ = u on [−1, 1].
pub fn integrator() -> Plant {
    linear(
        "integrator",
        Mat::zeros(1, 1),
        Mat::from_vec(1, 1, vec![1.0]).unwrap(),
        vec![1.0],
    )
    .unwrap()
}

/// How the dynamic augmentation wires the controller state.
#[derive(Debug, Clone)]
pub enum AugmentForm {
    /// ẋ_c = e with e = −x[coord] (zero reference); the structured
    /// controller over the stacked state realizes a nonlinear-PI law.
    NonlinearPi { tracked: Vec<usize>, xc_halfwidth: Vec<f64> },
}

/// Stacks integrator states onto the plant per the nonlinear-PI form.
pub fn augment_dynamic(plant: Plant, form: AugmentForm) -> Result<Plant> {
    let AugmentForm::NonlinearPi { tracked, xc_halfwidth } = form;
    if tracked.is_empty() || tracked.len() != xc_halfwidth.len() {
        return Err(Error::shape("augmentation needs one bound per tracked coordinate"));
    }
    for t in &tracked {
        if *t >= plant.state_dim {
            return Err(Error::shape(format!(
                "tracked coordinate {t} out of range for n = {}",
                plant.state_dim
            )));
        }
    }
    let mut region = plant.region.clone();
    region.extend_from_slice(&xc_halfwidth);
    Ok(Plant {
        name: format!("{}-dynamic", plant.name),
        state_dim: plant.state_dim + tracked.len(),
        input_dim: plant.input_dim,
        region,
        kind: PlantKind::Augmented { base: Box::new(plant), tracked },
    })
}

/// Pendulum with an integrated angle-error state; region per the
/// three-axis benchmark bound [π, 2, 1].
pub fn pendulum_dynamic() -> Result<Plant> {
    augment_dynamic(
        pendulum(),
        AugmentForm::NonlinearPi { tracked: vec![0], xc_halfwidth: vec![1.0] },
    )
}

/// Looks a plant up by its config name, applying constant overrides.
pub fn by_name(name: &str, overrides: &BTreeMap<String, f64>) -> Result<Plant> {
    let get = |key: &str, default: f64| overrides.get(key).copied().unwrap_or(default);
    match name {
        "circuit" => Ok(circuit_with(
            get("resistance", 1.0),
            get("inductance", 1.0),
            get("capacitance", 1.0),
        )),
        "pendulum" => Ok(pendulum_with(
            get("gravity", 9.81),
            get("damping", 0.1),
            get("mass", 1.0),
            get("length", 1.0),
        )),
        "rodcart" => Ok(rodcart_with(
            get("cart_mass", 1.0),
            get("tip_mass", 0.1),
            get("stiffness", 10.0),
            get("damping", 0.1),
        )),
        "pendulum-dynamic" => augment_dynamic(
            pendulum_with(
                get("gravity", 9.81),
                get("damping", 0.1),
                get("mass", 1.0),
                get("length", 1.0),
            ),
            AugmentForm::NonlinearPi {
                tracked: vec![0],
                xc_halfwidth: vec![get("xc_bound", 1.0)],
            },
        ),
        "integrator" => Ok(integrator()),
        other => Err(Error::contract(format!(
            "unknown plant '{other}' (expected circuit | pendulum | rodcart | pendulum-dynamic | integrator)"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn all_plants() -> Vec<Plant> {
        vec![circuit(), pendulum(), rodcart(), pendulum_dynamic().unwrap(), integrator()]
    }

    #[test]
    fn equilibrium_at_origin() {
        for p in all_plants() {
            let zero = vec![0.0; p.state_dim()];
            let f = p.drift_f64(&zero);
            assert!(f.iter().all(|v| v.abs() < 1e-15), "{} drift at origin: {f:?}", p.name());
        }
    }

    #[test]
    fn drift_factorization_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for p in all_plants() {
            for _ in 0..200 {
                let x: Vec<f64> = p
                    .region()
                    .iter()
                    .map(|r| rng.random_range(-*r..*r))
                    .collect();
                let f = p.drift_f64(&x);
                let mut alg = crate::algebra::ConcreteAlg;
                let fac = p.drift_factor(&mut alg, &x);
                let fx = fac.mat_vec(&x);
                for (a, b) in f.iter().zip(&fx) {
                    assert!((a - b).abs() < 1e-12, "{}: f={a} F(x)x={b}", p.name());
                }
            }
        }
    }

    #[test]
    fn circuit_structure() {
        let p = circuit();
        let mut alg = crate::algebra::ConcreteAlg;
        let g = p.input_matrix(&mut alg, &[0.3, -0.4]);
        assert_eq!((g.get(0, 0), g.get(1, 0)), (1.0, 0.0));
        // Open-loop eigenvalues −0.5 ± i√3/2.
        let (a, _) = p.linearization();
        for (re, im) in a.eigenvalues() {
            assert!((re + 0.5).abs() < 1e-9);
            assert!((im.abs() - 3.0_f64.sqrt() / 2.0).abs() < 1e-9);
            assert!(re <= 0.0);
        }
    }

    #[test]
    fn pendulum_unstable_open_loop() {
        let p = pendulum();
        let (a, b) = p.linearization();
        assert!((a.get(1, 0) - 9.81).abs() < 1e-12);
        assert!((a.get(1, 1) + 0.1).abs() < 1e-12);
        let has_unstable = a.eigenvalues().iter().any(|&(re, _)| re > 0.0);
        assert!(has_unstable);
        assert_eq!((b.get(0, 0), b.get(1, 0)), (0.0, 1.0));
    }

    #[test]
    fn rodcart_tip_frequency() {
        // Undamped, unforced tip: d̈ = −(k/m_t)d → ω = √(k/m_t) = 10 rad/s.
        let p = rodcart_with(1.0, 0.1, 10.0, 0.0);
        let (a, b) = p.linearization();
        let eigs = a.eigenvalues();
        let osc = eigs
            .iter()
            .find(|(_, im)| im.abs() > 1.0)
            .expect("oscillatory pair");
        assert!((osc.1.abs() - 10.0).abs() < 1e-6);
        assert_eq!(
            (b.get(0, 0), b.get(1, 0), b.get(2, 0), b.get(3, 0)),
            (0.0, 0.0, 1.0, -1.0)
        );
    }

    #[test]
    fn augmentation_shapes_and_integrator_state() {
        let p = pendulum_dynamic().unwrap();
        assert_eq!(p.state_dim(), 3);
        assert_eq!(p.input_dim(), 1);
        assert_eq!(p.region(), &[std::f64::consts::PI, 2.0, 1.0]);
        // ẋ_c = −θ.
        let f = p.drift_f64(&[0.25, 0.0, 0.9]);
        assert!((f[2] + 0.25).abs() < 1e-15);
        // g is independent of the input and zero on the controller state.
        let mut alg = crate::algebra::ConcreteAlg;
        let g = p.input_matrix(&mut alg, &[0.25, 0.0, 0.9]);
        assert_eq!(g.rows(), 3);
        assert_eq!(g.get(2, 0), 0.0);
    }

    #[test]
    fn augment_rejects_bad_coordinate() {
        let err = augment_dynamic(
            pendulum(),
            AugmentForm::NonlinearPi { tracked: vec![5], xc_halfwidth: vec![1.0] },
        );
        assert!(matches!(err, Err(Error::Shape(_))));
    }

    #[test]
    fn input_matrix_bounded_on_region() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for p in all_plants() {
            let mut alg = crate::algebra::ConcreteAlg;
            for _ in 0..100 {
                let x: Vec<f64> = p.region().iter().map(|r| rng.random_range(-*r..*r)).collect();
                let g = p.input_matrix(&mut alg, &x);
                assert!(g.max_abs() <= 10.0 + 1e-12);
            }
        }
    }

    #[test]
    fn lookup_by_name_with_overrides() {
        let mut ov = BTreeMap::new();
        ov.insert("gravity".to_string(), 4.9);
        let p = by_name("pendulum", &ov).unwrap();
        let (a, _) = p.linearization();
        assert!((a.get(1, 0) - 4.9).abs() < 1e-12);
        assert!(by_name("nonsense", &ov).is_err());
    }
}
