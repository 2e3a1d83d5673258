//! Flat-parameter optimizers: bias-corrected adaptive moments by default,
//! plain gradient descent selectable.

use crate::error::{Error, Result};

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

pub fn adam_step(theta: &mut [f64], grad: &[f64], state: &mut AdamState, lr: f64) -> Result<()> {
    if theta.len() != grad.len() || theta.len() != state.m.len() {
        return Err(Error::shape(format!(
            "adam: θ {} / grad {} / moments {}",
            theta.len(),
            grad.len(),
            state.m.len()
        )));
    }
    state.t += 1;
    let bc1 = 1.0 - BETA1.powi(state.t as i32);
    let bc2 = 1.0 - BETA2.powi(state.t as i32);
    for i in 0..theta.len() {
        state.m[i] = BETA1 * state.m[i] + (1.0 - BETA1) * grad[i];
        state.v[i] = BETA2 * state.v[i] + (1.0 - BETA2) * grad[i] * grad[i];
        let mhat = state.m[i] / bc1;
        let vhat = state.v[i] / bc2;
        theta[i] -= lr * mhat / (vhat.sqrt() + EPS);
    }
    Ok(())
}

pub fn sgd_step(theta: &mut [f64], grad: &[f64], lr: f64) -> Result<()> {
    if theta.len() != grad.len() {
        return Err(Error::shape("sgd: θ and gradient length differ"));
    }
    for i in 0..theta.len() {
        theta[i] -= lr * grad[i];
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Debug, Clone)]
pub enum Optimizer {
    Adam(AdamState),
    Sgd,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, n: usize) -> Self {
        match kind {
            OptimizerKind::Adam => Optimizer::Adam(AdamState::new(n)),
            OptimizerKind::Sgd => Optimizer::Sgd,
        }
    }

    pub fn step(&mut self, theta: &mut [f64], grad: &[f64], lr: f64) -> Result<()> {
        match self {
            Optimizer::Adam(state) => adam_step(theta, grad, state, lr),
            Optimizer::Sgd => sgd_step(theta, grad, lr),
        }
    }
}
