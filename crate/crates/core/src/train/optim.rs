use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Learning rate after step decay: `lr0 * factor^floor(epoch / every)`.
pub fn step_decay_lr(lr0: f64, factor: f64, every: usize, epoch: usize) -> f64 {
    if every == 0 {
        return lr0;
    }
    lr0 * factor.powi((epoch / every) as i32)
}

/// Adam with coupled L2 regularization: `weight_decay * w` is added to the
/// gradient of every weight-kind parameter, which is the gradient of
/// `weight_decay / 2 * |w|^2` added to the loss. Biases and norm affines are
/// not decayed.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        Adam {
            config,
            step: 0,
            m: store.iter().map(|p| vec![0.0; p.tensor.numel()]).collect(),
            v: store.iter().map(|p| vec![0.0; p.tensor.numel()]).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update using the gradients stored on the parameters.
    /// Parameters without a gradient are treated as having zero gradient.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64, weight_decay: f64) -> Result<()> {
        if store.len() != self.m.len() {
            return Err(Error::InvalidArgument(format!(
                "optimizer tracks {} parameters, store has {}",
                self.m.len(),
                store.len()
            )));
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (i, p) in store.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            if m.len() != p.tensor.numel() {
                return Err(Error::InvalidArgument(format!(
                    "optimizer state mismatch for {}",
                    p.name
                )));
            }
            let decay = if p.decays() { weight_decay } else { 0.0 };
            let grad = p.tensor.grad().map(|g| g.to_vec());
            let data = p.tensor.data_mut();
            for j in 0..data.len() {
                let g = grad.as_ref().map_or(0.0, |g| g[j]) + decay * data[j];
                m[j] = beta1 * m[j] + (1.0 - beta1) * g;
                v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                data[j] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// `weight_decay / 2 * sum of squared decayed weights`.
pub fn l2_penalty(store: &ParamStore, weight_decay: f64) -> f64 {
    0.5 * weight_decay
        * store
            .iter()
            .filter(|p| p.decays())
            .map(|p| p.tensor.data().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Init, ParamKind};

    fn store_with(value: f64, kind: ParamKind) -> ParamStore {
        let mut s = ParamStore::default();
        let id = s.add("w".into(), kind, None, &[1], Init::Zeros, 0);
        s.get_mut(id).tensor.data_mut()[0] = value;
        s
    }

    #[test]
    fn zero_gradient_zero_decay_is_a_no_op() {
        let mut s = store_with(0.7, ParamKind::Weight);
        let mut adam = Adam::new(AdamConfig::default(), &s);
        s.get_mut(0).tensor.accumulate_grad(&[0.0]);
        adam.step(&mut s, 1e-3, 0.0).unwrap();
        assert_eq!(s.get(0).tensor.data(), &[0.7]);
    }

    #[test]
    fn first_step_matches_hand_computation() {
        let (w0, g, lr) = (0.5, -3.0, 1e-4);
        let mut s = store_with(w0, ParamKind::Weight);
        let mut adam = Adam::new(AdamConfig::default(), &s);
        s.get_mut(0).tensor.accumulate_grad(&[g]);
        adam.step(&mut s, lr, 0.0).unwrap();
        // m = 0.1 g, v = 0.001 g^2; bias correction recovers g and g^2.
        let m_hat = (0.1 * g) / (1.0 - 0.9);
        let v_hat = (0.001 * g * g) / (1.0 - 0.999);
        let want = w0 - lr * m_hat / (v_hat.sqrt() + 1e-8);
        assert!((s.get(0).tensor.data()[0] - want).abs() < 1e-12);
        assert!((s.get(0).tensor.data()[0] - (w0 + lr)).abs() < 1e-9);
    }

    #[test]
    fn decay_skips_norm_affine() {
        let mut s = store_with(2.0, ParamKind::NormAffine);
        let mut adam = Adam::new(AdamConfig::default(), &s);
        adam.step(&mut s, 1e-2, 0.5).unwrap();
        assert_eq!(s.get(0).tensor.data(), &[2.0]);
        assert_eq!(l2_penalty(&s, 0.5), 0.0);
        let mut w = store_with(2.0, ParamKind::Weight);
        let mut adam = Adam::new(AdamConfig::default(), &w);
        adam.step(&mut w, 1e-2, 0.5).unwrap();
        assert!(w.get(0).tensor.data()[0] < 2.0);
        assert_eq!(l2_penalty(&w, 0.5), 0.25 * w.get(0).tensor.data()[0].powi(2));
    }

    #[test]
    fn schedule_steps_down_every_twenty_epochs() {
        let lr = |e| step_decay_lr(1e-4, 0.1, 20, e);
        assert_eq!(lr(0), 1e-4);
        assert_eq!(lr(19), 1e-4);
        assert!((lr(20) - 1e-5).abs() < 1e-20);
        assert!((lr(40) - 1e-6).abs() < 1e-21);
    }
}
