//! Gradient engine surface: the objective contract, a central-difference
//! oracle, and the Adam optimizer.
//!
//! Gradients for the registration loss are hand-derived adjoints chained
//! stage by stage (encoding, MLP, RK4, trilinear sampling, windowed
//! losses); the contract they must satisfy is agreement with
//! [`finite_diff_grad`] on the same graph in 64-bit.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::{real, Real};

/// A differentiable scalar function of a flat parameter vector.
pub trait Objective<F: Real> {
    fn loss(&self, params: &[F]) -> Result<F>;

    /// Loss plus the analytic gradient at `params`.
    fn loss_and_grad(&self, params: &[F]) -> Result<(F, Vec<F>)>;
}

/// Central finite differences `(f(x + h e_i) - f(x - h e_i)) / 2h`.
pub fn finite_diff_grad<F: Real>(
    f: impl Fn(&[F]) -> Result<F>,
    params: &[F],
    h: F,
) -> Result<Vec<F>> {
    let mut grad = Vec::with_capacity(params.len());
    let mut work = params.to_vec();
    let two_h = h + h;
    for i in 0..params.len() {
        work[i] = params[i] + h;
        let fp = f(&work)?;
        work[i] = params[i] - h;
        let fm = f(&work)?;
        work[i] = params[i];
        grad.push((fp - fm) / two_h);
    }
    Ok(grad)
}

/// Adam hyperparameters and moment state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub t: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(param_count: usize, lr: f64) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            t: 0,
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
        }
    }
}

/// One Adam update with bias correction, in place.
pub fn adam_step<F: Real>(params: &mut [F], grad: &[F], state: &mut AdamState) -> Result<()> {
    if params.len() != grad.len() || params.len() != state.m.len() {
        return Err(Error::shape(format!(
            "adam shapes: params {}, grad {}, state {}",
            params.len(),
            grad.len(),
            state.m.len()
        )));
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for i in 0..params.len() {
        let g = grad[i].to_f64();
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        let step = state.lr * m_hat / (v_hat.sqrt() + state.epsilon);
        params[i] = params[i] - real::<F>(step);
    }
    Ok(())
}
