use serde::{Deserialize, Serialize};

use super::params::{ParamId, ParamStore};
use super::tensor::{Float, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam without weight decay. Parameters that receive no gradient in a step are left untouched.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T: Float = f32> {
    pub config: AdamConfig,
    first: Vec<Option<Tensor<T>>>,
    second: Vec<Option<Tensor<T>>>,
    steps: Vec<u64>,
}

impl<T: Float> Adam<T> {
    pub fn new(config: AdamConfig, store: &ParamStore<T>) -> Self {
        Adam {
            config,
            first: vec![None; store.len()],
            second: vec![None; store.len()],
            steps: vec![0; store.len()],
        }
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[(ParamId, Tensor<T>)]) {
        let c = self.config;
        let (b1, b2) = (T::from_f64_lossy(c.beta1), T::from_f64_lossy(c.beta2));
        let eps = T::from_f64_lossy(c.eps);
        for (id, g) in grads {
            let i = id.index();
            self.steps[i] += 1;
            let t = self.steps[i] as i32;
            let m = self.first[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.second[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let bc1 = T::one() - b1.powi(t);
            let bc2 = T::one() - b2.powi(t);
            let lr = T::from_f64_lossy(c.learning_rate);
            let p = store.get_mut(*id).data_mut();
            for (((p, m), v), &g) in p
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }

    /// Per-parameter `(step count, first moment, second moment)`.
    pub fn state(&self, id: ParamId) -> (u64, Option<&Tensor<T>>, Option<&Tensor<T>>) {
        let i = id.index();
        (self.steps[i], self.first[i].as_ref(), self.second[i].as_ref())
    }

    pub fn restore(
        &mut self,
        id: ParamId,
        steps: u64,
        first: Option<Tensor<T>>,
        second: Option<Tensor<T>>,
    ) -> Result<()> {
        let i = id.index();
        if i >= self.steps.len() {
            return Err(Error::Checkpoint(format!("optimizer slot {i} out of range")));
        }
        self.steps[i] = steps;
        self.first[i] = first;
        self.second[i] = second;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add_param("w", Tensor::from_vec(&[2], vec![1.0, -1.0]).unwrap());
        let mut adam = Adam::new(AdamConfig { learning_rate: 0.1, ..Default::default() }, &store);
        adam.step(&mut store, &[(id, Tensor::from_vec(&[2], vec![3.0, -0.5]).unwrap())]);
        let w = store.get(id).data();
        assert!((w[0] - 0.9).abs() < 1e-6);
        assert!((w[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn params_without_gradients_are_untouched() {
        let mut store = ParamStore::<f32>::new();
        let a = store.add_param("a", Tensor::full(&[3], 1.0));
        let b = store.add_param("b", Tensor::full(&[3], 1.0));
        let mut adam = Adam::new(AdamConfig::default(), &store);
        adam.step(&mut store, &[(a, Tensor::full(&[3], 1.0))]);
        adam.step(&mut store, &[(a, Tensor::full(&[3], 1.0))]);
        assert_eq!(store.get(b).data(), &[1.0, 1.0, 1.0]);
        assert_ne!(store.get(a).data(), &[1.0, 1.0, 1.0]);
    }
}
