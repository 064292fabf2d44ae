use crate::error::{NumError, Result};
use crate::tensor::ParamStore;

/// Moment accumulators for Adam, one pair per tensor in a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    /// Zeroed moments with the usual defaults (0.9, 0.999, 1e-8).
    pub fn new(store: &ParamStore) -> Self {
        Self::with_betas(store, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(store: &ParamStore, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = || store.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        Self {
            first: zeros(),
            second: zeros(),
            step: 0,
            beta1,
            beta2,
            eps,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update from the accumulated gradients, which are
    /// zeroed afterwards. Nothing is modified when any gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        if self.first.len() != store.len() {
            return Err(NumError::State(format!(
                "optimizer tracks {} tensors, store holds {}",
                self.first.len(),
                store.len()
            )));
        }
        if let Some(id) = store
            .ids()
            .find(|&id| store.get(id).grad().iter().any(|g| !g.is_finite()))
        {
            return Err(NumError::NonFiniteGradient {
                name: store.name(id).to_string(),
            });
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for ((tensor, m), v) in store
            .tensors_mut()
            .zip(self.first.iter_mut())
            .zip(self.second.iter_mut())
        {
            let grad = tensor.grad().to_vec();
            for (i, (value, g)) in tensor.values_mut().iter_mut().zip(grad).enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                *value -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
            tensor.zero_grad();
        }
        Ok(())
    }
}
