use serde::{Deserialize, Serialize};

use crate::error::{config_err, usage_err, Result};
use crate::numerics::{cst, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerSettings {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        Self { learning_rate: 0.001, beta1: 0.9, beta2: 0.999, epsilon: 1e-8, batch_size: 32 }
    }
}

impl OptimizerSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(config_err!("learning_rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(config_err!("Adam betas must lie in [0, 1)"));
        }
        if !(self.epsilon > 0.0) {
            return Err(config_err!("Adam epsilon must be positive"));
        }
        if self.batch_size == 0 {
            return Err(config_err!("batch_size must be positive"));
        }
        Ok(())
    }
}

/// Adam moment estimates, one pair per parameter tensor.
#[derive(Clone, Debug)]
pub struct OptimizerState<T: Real = f32> {
    pub settings: OptimizerSettings,
    pub step: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(settings: OptimizerSettings, tensors: &[&Tensor<T>]) -> Self {
        Self {
            settings,
            step: 0,
            first: tensors.iter().map(|t| vec![T::zero(); t.len()]).collect(),
            second: tensors.iter().map(|t| vec![T::zero(); t.len()]).collect(),
        }
    }

    /// One Adam step using each tensor's gradient slot (missing slot = zero
    /// gradient).
    pub fn update(&mut self, tensors: &mut [&mut Tensor<T>]) -> Result<()> {
        if tensors.len() != self.first.len() {
            return Err(usage_err!("optimizer tracks {} tensors, got {}", self.first.len(), tensors.len()));
        }
        self.step += 1;
        let s = &self.settings;
        let (b1, b2) = (cst::<T>(s.beta1), cst::<T>(s.beta2));
        let one = T::one();
        let correction1 = one - cst::<T>(s.beta1.powi(self.step as i32));
        let correction2 = one - cst::<T>(s.beta2.powi(self.step as i32));
        let (lr, eps) = (cst::<T>(s.learning_rate), cst::<T>(s.epsilon));
        for ((t, m), v) in tensors.iter_mut().zip(&mut self.first).zip(&mut self.second) {
            if m.len() != t.len() {
                return Err(usage_err!("moment size {} does not match tensor {:?}", m.len(), t.shape()));
            }
            let grad = t.grad().map(<[T]>::to_vec);
            let data = t.data_mut();
            for i in 0..data.len() {
                let g = grad.as_ref().map_or(T::zero(), |g| g[i]);
                m[i] = b1 * m[i] + (one - b1) * g;
                v[i] = b2 * v[i] + (one - b2) * g * g;
                let m_hat = m[i] / correction1;
                let v_hat = v[i] / correction2;
                data[i] = data[i] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
