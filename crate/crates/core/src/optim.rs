//! AdamW with a linear-warmup cosine learning-rate schedule.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

/// Multiplier on the base learning rate at `step` (0-based) out of `total`.
///
/// Linear ramp over the first `warmup` steps, then half-cosine decay to zero.
pub fn cosine_with_warmup(step: usize, total: usize, warmup: usize) -> f64 {
    if step < warmup {
        return step as f64 / warmup.max(1) as f64;
    }
    let decay_steps = total.saturating_sub(warmup).max(1);
    let progress = (step - warmup) as f64 / decay_steps as f64;
    (0.5 * (1.0 + (std::f64::consts::PI * progress).cos())).max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Optimizer state for a fixed, ordered list of parameter tensors.
#[derive(Debug, Clone)]
pub struct AdamW {
    cfg: AdamWConfig,
    first: Vec<Array2<f64>>,
    second: Vec<Array2<f64>>,
    t: i32,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, shapes: &[(usize, usize)]) -> Self {
        Self {
            cfg,
            first: shapes.iter().map(|&s| Array2::zeros(s)).collect(),
            second: shapes.iter().map(|&s| Array2::zeros(s)).collect(),
            t: 0,
        }
    }

    /// One update. `params[i]` and `grads[i]` must match the i-th shape.
    pub fn step(&mut self, lr: f64, params: &mut [&mut Array2<f64>], grads: &[&Array2<f64>]) {
        assert_eq!(params.len(), self.first.len());
        assert_eq!(grads.len(), self.first.len());
        self.t += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.t);
        let bc2 = 1.0 - beta2.powi(self.t);
        for (i, p) in params.iter_mut().enumerate() {
            let g = grads[i];
            let m = &mut self.first[i];
            let v = &mut self.second[i];
            ndarray::Zip::from(&mut **p)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    *p -= lr * weight_decay * *p;
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *p -= lr * m_hat / (v_hat.sqrt() + eps);
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::array;

    #[test]
    fn schedule_shape() {
        assert_eq!(cosine_with_warmup(0, 100, 10), 0.0);
        assert_relative_eq!(cosine_with_warmup(5, 100, 10), 0.5);
        assert_relative_eq!(cosine_with_warmup(10, 100, 10), 1.0);
        assert_relative_eq!(cosine_with_warmup(55, 100, 10), 0.5, epsilon = 1e-12);
        assert!(cosine_with_warmup(99, 100, 10) < 0.01);
        // no warmup starts at full rate
        assert_relative_eq!(cosine_with_warmup(0, 100, 0), 1.0);
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut p = array![[1.0, -1.0]];
        let g = array![[0.3, -7.0]];
        let mut opt = AdamW::new(
            AdamWConfig {
                weight_decay: 0.0,
                ..Default::default()
            },
            &[(1, 2)],
        );
        opt.step(0.1, &mut [&mut p], &[&g]);
        assert_relative_eq!(p[[0, 0]], 0.9, epsilon = 1e-6);
        assert_relative_eq!(p[[0, 1]], -0.9, epsilon = 1e-6);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = array![[3.0, -2.0]];
        let mut opt = AdamW::new(AdamWConfig::default(), &[(1, 2)]);
        for _ in 0..2000 {
            let g = p.mapv(|x| 2.0 * x);
            opt.step(0.01, &mut [&mut p], &[&g]);
        }
        assert!(p.iter().all(|x| x.abs() < 1e-2));
    }
}
