//! Adaptive-moment optimizer with decoupled weight decay.

use crate::tensor::{ParamStore, Tensor};

#[derive(Debug, Clone)]
pub struct AdamW {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    step: u64,
    first_moment: Vec<Tensor>,
    second_moment: Vec<Tensor>,
}

impl AdamW {
    pub fn new(store: &ParamStore, learning_rate: f64, weight_decay: f64) -> Self {
        let first = store
            .ids()
            .map(|id| Tensor::zeros(&store.value(id).shape))
            .collect::<Vec<_>>();
        let second = first.clone();
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay,
            step: 0,
            first_moment: first,
            second_moment: second,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update from the gradients currently held in `store`. Weight
    /// decay is applied directly to the weights, not through the gradient.
    pub fn step(&mut self, store: &mut ParamStore) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for id in store.ids().collect::<Vec<_>>() {
            let n = store.value(id).data.len();
            for k in 0..n {
                let g = store.grad(id).data[k];
                let m = &mut self.first_moment[id.0].data[k];
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                let v = &mut self.second_moment[id.0].data[k];
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let m_hat = self.first_moment[id.0].data[k] / bc1;
                let v_hat = self.second_moment[id.0].data[k] / bc2;
                let w = &mut store.value_mut(id).data[k];
                *w -= self.learning_rate * (m_hat / (v_hat.sqrt() + self.epsilon) + self.weight_decay * *w);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grad_zero_decay_is_noop() {
        let mut store = ParamStore::new();
        let p = store.add("w", Tensor::from_vec(&[1, 3], vec![1.0, -2.0, 3.0]));
        let before = store.value(p).clone();
        let mut opt = AdamW::new(&store, 5e-4, 0.0);
        opt.step(&mut store);
        assert_eq!(store.value(p), &before);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // with constant gradient g, bias correction makes step 1 move by
        // lr * g / (|g| + eps) ~= lr in magnitude
        let mut store = ParamStore::new();
        let p = store.add("w", Tensor::scalar(0.0));
        store.grad_mut(p).data[0] = 2.5;
        let lr = 5e-4;
        let mut opt = AdamW::new(&store, lr, 0.0);
        opt.step(&mut store);
        let moved = store.value(p).data[0].abs();
        assert!((moved - lr).abs() < lr * 1e-4, "moved {moved}");
        assert!(store.value(p).data[0] < 0.0);
    }

    #[test]
    fn decay_shrinks_weights_without_gradient() {
        let mut store = ParamStore::new();
        let p = store.add("w", Tensor::scalar(10.0));
        let mut opt = AdamW::new(&store, 1e-2, 0.1);
        opt.step(&mut store);
        let w = store.value(p).data[0];
        assert!((w - (10.0 - 1e-2 * 0.1 * 10.0)).abs() < 1e-12);
    }
}
