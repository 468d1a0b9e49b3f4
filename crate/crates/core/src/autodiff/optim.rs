use std::collections::BTreeMap;

use super::ParamStore;

/// Clears the gradient of every entry, trainable or not.
pub fn zero_grad(params: &ParamStore) {
    params.iter().for_each(|(_, t)| t.zero_grad());
}

/// `x ← x − lr·∇x` on trainable entries.
pub fn sgd_step(params: &ParamStore, lr: f64) {
    for (_, t) in params.iter().filter(|(_, t)| t.requires_grad()) {
        let g = t.grad();
        let mut x = t.data_mut();
        x.iter_mut().zip(g.iter()).for_each(|(x, g)| *x -= lr * g);
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moment buffers are keyed by parameter name and
/// created lazily the first time an entry is trainable.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    t: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            t: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn with_lr(lr: f64) -> Self {
        Adam::new(AdamConfig {
            lr,
            ..AdamConfig::default()
        })
    }

    pub fn step(&mut self, params: &ParamStore) {
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for (name, t) in params.iter().filter(|(_, t)| t.requires_grad()) {
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; t.len()], vec![0.0; t.len()]));
            let g = t.grad();
            let mut x = t.data_mut();
            for k in 0..x.len() {
                m[k] = beta1 * m[k] + (1.0 - beta1) * g[k];
                v[k] = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k];
                let mhat = m[k] / c1;
                let vhat = v[k] / c2;
                x[k] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

/// Free-function form of one Adam update with a fresh optimizer state.
pub fn adam_step(params: &ParamStore, lr: f64, beta1: f64, beta2: f64, eps: f64) {
    Adam::new(AdamConfig { lr, beta1, beta2, eps }).step(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_updates_trainable_only() {
        let mut ps = ParamStore::new();
        let x = ps.insert("x", &[1], vec![1.0]).unwrap();
        let y = ps.insert("y", &[1], vec![1.0]).unwrap();
        ps.set_trainable("y", false).unwrap();
        x.grad_mut()[0] = 2.0;
        y.grad_mut()[0] = 2.0;
        sgd_step(&ps, 0.1);
        assert!((x.item() - 0.8).abs() < 1e-15);
        assert_eq!(y.item(), 1.0);
        zero_grad(&ps);
        assert_eq!(x.grad()[0], 0.0);
        assert_eq!(y.grad()[0], 0.0);
    }

    #[test]
    fn adam_finds_bowl_minimum() {
        let mut ps = ParamStore::new();
        let x = ps.insert("x", &[3], vec![0.3, -0.2, 0.25]).unwrap();
        let mut opt = Adam::with_lr(0.01);
        for _ in 0..500 {
            zero_grad(&ps);
            let loss = x.mul(&x).unwrap().sum();
            loss.backward().unwrap();
            opt.step(&ps);
        }
        assert!(x.data().iter().all(|v| v.abs() < 1e-3), "{:?}", x.data());
    }

    #[test]
    fn single_adam_step_moves_by_lr() {
        let mut ps = ParamStore::new();
        let x = ps.insert("x", &[1], vec![1.0]).unwrap();
        x.grad_mut()[0] = 3.0;
        adam_step(&ps, 0.1, 0.9, 0.999, 1e-8);
        assert!((x.item() - 0.9).abs() < 1e-6);
    }
}
