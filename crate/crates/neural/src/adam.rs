use serde::{Deserialize, Serialize};

use crate::gemm::Gemm;
use crate::tensor::Tensor;
use crate::NeuralError;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub t: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Gemm> AdamState<T> {
    pub fn new(params: &[Tensor<T>]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(&p.shape)).collect();
        Self { t: 0, m: zeros(), v: zeros() }
    }
}

/// One bias-corrected Adam update in place.
pub fn adam_step<T: Gemm>(
    params: &mut [Tensor<T>],
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    lr: f64,
    hp: AdamParams,
) -> Result<(), NeuralError> {
    if params.len() != grads.len()
        || params.len() != state.m.len()
        || params.iter().zip(grads).any(|(p, g)| p.shape != g.shape)
        || params.iter().zip(&state.m).any(|(p, m)| p.shape != m.shape)
    {
        return Err(NeuralError::ShapeMismatch("parameters, gradients and moments differ".into()));
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (T::lit(hp.beta1), T::lit(hp.beta2));
    let c1 = T::one() - b1.powi(t);
    let c2 = T::one() - b2.powi(t);
    let (lr, eps) = (T::lit(lr), T::lit(hp.eps));
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        for i in 0..p.data.len() {
            let gi = g.data[i];
            m.data[i] = b1 * m.data[i] + (T::one() - b1) * gi;
            v.data[i] = b2 * v.data[i] + (T::one() - b2) * gi * gi;
            let mhat = m.data[i] / c1;
            let vhat = v.data[i] / c2;
            p.data[i] -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}
