//! Adam with bias correction and optional global gradient-norm clipping.

use msgdd_tensor::Tensor;

use crate::config::OptimizerConfig;
use crate::nn::{EntryKind, ParamId, ParamStore};

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip: Option<f64>,
    /// Number of updates applied so far.
    pub step: u64,
    /// First and second moments, one per store entry (empty for buffers).
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(config: &OptimizerConfig, store: &ParamStore) -> Self {
        let zeros = |kind: EntryKind, t: &Tensor| match kind {
            EntryKind::Param => Tensor::zeros(t.shape().to_vec()),
            EntryKind::Buffer => Tensor::zeros(vec![0]),
        };
        let moments: Vec<Tensor> = store.entries().iter().map(|e| zeros(e.kind, &e.value)).collect();
        Self {
            lr: config.learning_rate,
            beta1: config.beta1,
            beta2: config.beta2,
            eps: 1e-8,
            clip: config.clip,
            step: 0,
            m: moments.clone(),
            v: moments,
        }
    }

    /// Global L2 norm of a gradient set.
    pub fn grad_norm(grads: &[(ParamId, Tensor)]) -> f64 {
        grads.iter().map(|(_, g)| g.squared_norm()).sum::<f64>().sqrt()
    }

    /// Apply one update. Parameters without a gradient are left untouched.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)]) {
        self.step += 1;
        let scale = match self.clip {
            Some(max) => {
                let norm = Self::grad_norm(grads);
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (id, g) in grads {
            let i = id.index();
            let p = store.get_mut(*id).data_mut();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for k in 0..p.len() {
                let gk = g.data()[k] * scale;
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                let mhat = m[k] / c1;
                let vhat = v[k] / c2;
                p[k] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(values: Vec<f64>) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let n = values.len();
        let id = s.add("p", EntryKind::Param, Tensor::new(vec![n], values));
        (s, id)
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // with bias correction the first step is lr * g / (|g| + eps)
        let (mut s, id) = store(vec![1.0, -2.0]);
        let mut adam = Adam::new(&OptimizerConfig::default(), &s);
        adam.update(&mut s, &[(id, Tensor::new(vec![2], vec![0.5, -3.0]))]);
        let lr = adam.lr;
        let p = s.get(id).data();
        assert!((p[0] - (1.0 - lr)).abs() < 1e-10);
        assert!((p[1] - (-2.0 + lr)).abs() < 1e-10);
    }

    #[test]
    fn clipping_rescales_the_gradient() {
        let (mut a, id) = store(vec![0.0]);
        let (mut b, _) = store(vec![0.0]);
        let config = OptimizerConfig {
            clip: Some(1.0),
            ..OptimizerConfig::default()
        };
        let mut clipped = Adam::new(&config, &a);
        let mut plain = Adam::new(&OptimizerConfig::default(), &b);
        clipped.update(&mut a, &[(id, Tensor::new(vec![1], vec![10.0]))]);
        plain.update(&mut b, &[(id, Tensor::new(vec![1], vec![1.0]))]);
        assert_eq!(a, b);
        assert_eq!(clipped.m, plain.m);
    }
}
