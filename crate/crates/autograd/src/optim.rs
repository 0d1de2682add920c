//! Adaptive-moment optimizer with decoupled weight decay, and the
//! warmup/cosine learning-rate schedule used by the trainers.

use crate::params::{Gradients, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Number of updates applied so far.
    pub step: u64,
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
}

impl AdamW {
    pub fn new(store: &ParamStore, weight_decay: f64) -> Self {
        let zeros: Vec<Tensor> = store
            .iter()
            .map(|(_, _, t)| Tensor::zeros(t.rows, t.cols))
            .collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
        }
    }

    /// Applies one update to every parameter accepted by `trainable`.
    /// Parameters rejected by the filter, or without a gradient, are left
    /// untouched (their moments too).
    pub fn update(
        &mut self,
        store: &mut ParamStore,
        grads: &Gradients,
        lr: f64,
        trainable: impl Fn(&str) -> bool,
    ) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            if !trainable(store.name(id)) {
                continue;
            }
            let Some(g) = grads.get(id) else { continue };
            let decay = {
                let p = store.get(id);
                // Gains, biases and other vectors are not decayed.
                if p.rows > 1 && p.cols > 1 {
                    self.weight_decay
                } else {
                    0.0
                }
            };
            let m = &mut self.first_moment[id.0];
            let v = &mut self.second_moment[id.0];
            let p = store.get_mut(id);
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m.data[i] = self.beta1 * m.data[i] + (1.0 - self.beta1) * gi;
                v.data[i] = self.beta2 * v.data[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = m.data[i] / bc1;
                let vhat = v.data[i] / bc2;
                p.data[i] -= lr * (mhat / (vhat.sqrt() + self.eps) + decay * p.data[i]);
            }
        }
    }
}

/// Linear warmup over `warmup` steps, then cosine decay to zero at `total`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WarmupCosine {
    pub peak_lr: f64,
    pub warmup: u64,
    pub total: u64,
}

impl WarmupCosine {
    /// Learning rate for the 0-based `step`.
    pub fn lr(&self, step: u64) -> f64 {
        if self.total == 0 {
            return self.peak_lr;
        }
        if step < self.warmup {
            return self.peak_lr * (step + 1) as f64 / self.warmup as f64;
        }
        let span = self.total.saturating_sub(self.warmup).max(1);
        let progress = ((step - self.warmup) as f64 / span as f64).min(1.0);
        self.peak_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_lr_leaves_params_bit_identical() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::from_vec(2, 2, vec![0.1, -0.2, 0.3, 0.4]));
        let before = store.clone();
        let grads = {
            let mut graph = crate::Graph::new(&before);
            let w = graph.param_named("w");
            let sq = graph.mul(w, w);
            let s = graph.sum(sq);
            graph.backward(s)
        };
        let mut opt = AdamW::new(&store, 0.01);
        for _ in 0..5 {
            opt.update(&mut store, &grads, 0.0, |_| true);
        }
        assert_eq!(store, before);
        opt.update(&mut store, &grads, 1e-2, |_| true);
        assert_ne!(store, before);
    }

    #[test]
    fn schedule_shape() {
        let s = WarmupCosine {
            peak_lr: 1.0,
            warmup: 10,
            total: 110,
        };
        assert!((s.lr(9) - 1.0).abs() < 1e-12);
        assert!(s.lr(0) < s.lr(5));
        assert!((s.lr(60) - 0.5).abs() < 1e-12);
        assert!(s.lr(109) < 1e-3);
    }
}
