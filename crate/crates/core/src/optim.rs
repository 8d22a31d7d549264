//! Adam over a [`ModelState`], with per-group freezing.

use crate::model::{ModelState, ParamGroup};
use crate::scalar::Scalar;

#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub learning_rate: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    steps: i32,
    first: ModelState<T>,
    second: ModelState<T>,
}

impl<T: Scalar> Adam<T> {
    /// Standard moment decays (0.9, 0.999) and ε = 1e-8.
    pub fn new(learning_rate: T, like: &ModelState<T>) -> Self {
        Adam {
            learning_rate,
            beta1: T::lit(0.9),
            beta2: T::lit(0.999),
            eps: T::lit(1e-8),
            steps: 0,
            first: like.zeros_like(),
            second: like.zeros_like(),
        }
    }

    pub fn steps(&self) -> i32 {
        self.steps
    }

    /// One bias-corrected update of every tensor whose group passes `trainable`.
    /// Frozen tensors keep both their values and their moment estimates.
    pub fn step(&mut self, params: &mut ModelState<T>, grads: &ModelState<T>, trainable: impl Fn(ParamGroup) -> bool) {
        self.steps += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = T::one() - b1.powi(self.steps);
        let c2 = T::one() - b2.powi(self.steps);
        let lr = self.learning_rate;
        let eps = self.eps;
        let grads = grads.params();
        for (((p, g), m), v) in params
            .params_mut()
            .into_iter()
            .zip(grads.iter())
            .zip(self.first.params_mut())
            .zip(self.second.params_mut())
        {
            if !trainable(p.group) {
                continue;
            }
            for i in 0..p.values.len() {
                let gi = g.values[i];
                m.values[i] = b1 * m.values[i] + (T::one() - b1) * gi;
                v.values[i] = b2 * v.values[i] + (T::one() - b2) * gi * gi;
                let m_hat = m.values[i] / c1;
                let v_hat = v.values[i] / c2;
                p.values[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}
