use serde::{Deserialize, Serialize};

use super::error::AutodiffError;
use super::params::ParamStore;
use super::tensor::{Real, Tensor};

/// Adam hyperparameters with decoupled weight decay.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            weight_decay: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Per-parameter moment accumulators and the step counter.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(config: AdamConfig, store: &ParamStore<T>) -> Self {
        let zeros = |store: &ParamStore<T>| {
            store
                .iter()
                .map(|(_, p)| Tensor::zeros(p.value.rows(), p.value.cols()))
                .collect::<Vec<_>>()
        };
        Self {
            config,
            step: 0,
            first: zeros(store),
            second: zeros(store),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update. Rejects the whole step if any gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Tensor<T>]) -> Result<(), AutodiffError> {
        if grads.len() != store.len() {
            return Err(AutodiffError::InvalidArgument(format!(
                "{} gradients for {} parameters",
                grads.len(),
                store.len()
            )));
        }
        for ((_, p), g) in store.iter().zip(grads) {
            if g.shape() != p.value.shape() {
                return Err(AutodiffError::ShapeMismatch {
                    op: "optimizer_step",
                    left: p.value.shape(),
                    right: g.shape(),
                });
            }
            if !g.is_finite() {
                return Err(AutodiffError::NonFiniteGradient(p.name.clone()));
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - c.beta1), T::lit(1.0 - c.beta2));
        let lr = T::lit(c.learning_rate);
        let decay = T::lit(1.0 - c.learning_rate * c.weight_decay);
        let (bc1, bc2, eps) = (T::lit(bc1), T::lit(bc2), T::lit(c.epsilon));
        for (i, p) in store.params_mut().iter_mut().enumerate() {
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            for (j, (w, &gj)) in p.value.data_mut().iter_mut().zip(grads[i].data()).enumerate() {
                m[j] = b1 * m[j] + one_b1 * gj;
                v[j] = b2 * v[j] + one_b2 * gj * gj;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                *w = *w * decay - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
