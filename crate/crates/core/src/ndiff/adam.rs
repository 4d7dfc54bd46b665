use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

/// Adam with bias correction over a fixed list of parameter slices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig, shapes: &[usize]) -> Self {
        Self {
            config,
            step: 0,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn for_params(config: AdamConfig, params: &[&[f64]]) -> Self {
        let shapes: Vec<usize> = params.iter().map(|p| p.len()).collect();
        Self::new(config, &shapes)
    }

    pub fn update(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "adam tracks {} tensors, got {} params / {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.m[i].len() || g.len() != self.m[i].len() {
                return Err(Error::Shape(format!("adam tensor {i} has changed size")));
            }
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for k in 0..p.len() {
                m[k] = beta1 * m[k] + (1.0 - beta1) * g[k];
                v[k] = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k];
                let mhat = m[k] / c1;
                let vhat = v[k] / c2;
                p[k] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![1.0, -2.0];
        let mut adam = AdamState::new(AdamConfig::default(), &[2]);
        adam.update(&mut [&mut p], &[&[0.0, 0.0]]).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
    }

    #[test]
    fn first_step_has_magnitude_lr() {
        let cfg = AdamConfig::with_lr(0.01);
        let g = 3.7;
        let mut p = vec![0.0];
        let mut adam = AdamState::new(cfg, &[1]);
        adam.update(&mut [&mut p], &[&[g]]).unwrap();
        let expected = -cfg.lr * g / (g.abs() + cfg.eps);
        assert!((p[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn quadratic_bowl_converges() {
        let target = [1.5, -0.5, 3.0];
        let mut p = vec![0.0; 3];
        let mut adam = AdamState::new(AdamConfig::with_lr(0.05), &[3]);
        for _ in 0..500 {
            let g: Vec<f64> = p.iter().zip(&target).map(|(x, t)| 2.0 * (x - t)).collect();
            adam.update(&mut [&mut p], &[&g]).unwrap();
        }
        for (x, t) in p.iter().zip(&target) {
            assert!((x - t).abs() < 1e-3, "{x} vs {t}");
        }
    }

    #[test]
    fn shape_mismatch_is_error() {
        let mut adam = AdamState::new(AdamConfig::default(), &[2]);
        let mut p = vec![0.0; 3];
        assert!(adam.update(&mut [&mut p], &[&[0.0; 3]]).is_err());
    }
}
