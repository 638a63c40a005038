//! Adam over flat parameter vectors.

use serde::{Deserialize, Serialize};

use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-15,
        }
    }
}

/// Moments are kept in f64 regardless of the parameter scalar.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(len: usize, cfg: AdamConfig) -> Self {
        Self {
            cfg,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    pub fn steps_taken(&self) -> i32 {
        self.t
    }

    /// One update; `lr(i)` gives the learning rate of parameter `i`
    /// (zero freezes it).
    pub fn step<T: Real>(&mut self, params: &mut [T], grads: &[T], lr: &dyn Fn(usize) -> f64) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.t);
        let bc2 = 1.0 - beta2.powi(self.t);
        for i in 0..params.len() {
            let rate = lr(i);
            if rate == 0.0 {
                continue;
            }
            let g = grads[i].to_f64_lossy();
            if !g.is_finite() {
                continue;
            }
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            let upd = rate * mhat / (vhat.sqrt() + eps);
            params[i] -= T::lit(upd);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        // Bias correction makes the first update exactly lr * sign(g).
        let mut p = vec![1.0f64, -2.0, 0.5];
        let mut opt = Adam::new(3, AdamConfig::default());
        opt.step(&mut p, &[3.0, -0.01, 0.0], &|_| 0.1);
        assert!((p[0] - 0.9).abs() < 1e-12);
        assert!((p[1] + 1.9).abs() < 1e-12);
        assert_eq!(p[2], 0.5);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut p = vec![5.0f64, -3.0];
        let mut opt = Adam::new(2, AdamConfig::default());
        for _ in 0..2000 {
            let g = vec![2.0 * (p[0] - 1.0), 2.0 * (p[1] + 1.0)];
            opt.step(&mut p, &g, &|_| 0.05);
        }
        assert!((p[0] - 1.0).abs() < 1e-3 && (p[1] + 1.0).abs() < 1e-3);
    }

    #[test]
    fn zero_rate_freezes() {
        let mut p = vec![1.0f32, 1.0];
        let mut opt = Adam::new(2, AdamConfig::default());
        opt.step(&mut p, &[1.0, 1.0], &|i| if i == 0 { 0.0 } else { 0.1 });
        assert_eq!(p[0], 1.0);
        assert!(p[1] < 1.0);
    }
}
