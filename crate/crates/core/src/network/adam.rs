use super::{NetworkError, Parameters};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    /// Decoupled decay: `w ← w − lr·wd·w` before the moment update.
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            weight_decay: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-parameter first and second moments plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
    step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(config: AdamConfig, params: &Parameters<T>) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Self {
            config,
            first: zeros(),
            second: zeros(),
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update of every parameter; gradients are
    /// zeroed afterwards.
    pub fn step(&mut self, params: &mut Parameters<T>) -> Result<(), NetworkError> {
        if params.len() != self.first.len() {
            return Err(NetworkError::ParamCount {
                expected: self.first.len(),
                found: params.len(),
            });
        }
        if let Some(p) = params.iter().find(|p| p.grad.is_none()) {
            return Err(NetworkError::MissingGrad(p.name.clone()));
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let decay = 1.0 - c.learning_rate * c.weight_decay;

        for ((p, m), v) in params.iter_mut().zip(&mut self.first).zip(&mut self.second) {
            let grad = p.grad.as_mut().expect("checked above");
            let w = p.value.data_mut();
            for i in 0..w.len() {
                let gi = grad.data()[i].as_f64();
                let mi = c.beta1 * m.data()[i].as_f64() + (1.0 - c.beta1) * gi;
                let vi = c.beta2 * v.data()[i].as_f64() + (1.0 - c.beta2) * gi * gi;
                m.data_mut()[i] = T::from_f64(mi);
                v.data_mut()[i] = T::from_f64(vi);
                let update = c.learning_rate * (mi / bc1) / ((vi / bc2).sqrt() + c.eps);
                w[i] = T::from_f64(w[i].as_f64() * decay - update);
            }
            grad.data_mut().fill(T::zero());
        }
        Ok(())
    }
}
