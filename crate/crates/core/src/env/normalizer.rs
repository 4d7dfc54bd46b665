//! Running per-dimension observation statistics (Welford).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::polytope::BoxBounds;

/// Guard on the standard deviation used when normalising.
pub const STD_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizerState {
    pub count: u64,
    pub mean: Vec<f64>,
    pub m2: Vec<f64>,
}

impl NormalizerState {
    pub fn new(dim: usize) -> Self {
        Self {
            count: 0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn update(&mut self, obs: &[f64]) {
        debug_assert_eq!(obs.len(), self.mean.len());
        self.count += 1;
        let n = self.count as f64;
        for ((m, s), &x) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(obs) {
            let delta = x - *m;
            *m += delta / n;
            *s += delta * (x - *m);
        }
    }

    /// Population standard deviation per dimension.
    pub fn std(&self) -> Vec<f64> {
        if self.count == 0 {
            return vec![0.0; self.dim()];
        }
        self.m2
            .iter()
            .map(|s| (s / self.count as f64).max(0.0).sqrt())
            .collect()
    }

    fn check(&self, len: usize) -> Result<()> {
        if self.count < 2 {
            return Err(Error::Contract(format!(
                "normaliser needs at least 2 samples, has {}",
                self.count
            )));
        }
        if len != self.dim() {
            return Err(Error::Shape(format!(
                "observation length {len}, normaliser dimension {}",
                self.dim()
            )));
        }
        Ok(())
    }

    pub fn normalize(&self, obs: &[f64]) -> Result<Vec<f64>> {
        self.check(obs.len())?;
        Ok(obs
            .iter()
            .zip(&self.mean)
            .zip(self.std())
            .map(|((x, m), s)| (x - m) / s.max(STD_EPS))
            .collect())
    }

    pub fn denormalize(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.check(z.len())?;
        Ok(z.iter()
            .zip(&self.mean)
            .zip(self.std())
            .map(|((x, m), s)| m + x * s.max(STD_EPS))
            .collect())
    }

    /// Raw-unit box `[μ - δσ, μ + δσ]` over the concatenated observation
    /// blocks of `users`, each block `block_len` wide.
    pub fn observation_box(&self, users: &[usize], block_len: usize, delta: f64) -> BoxBounds {
        let std = self.std();
        let dims = users
            .iter()
            .flat_map(|&u| u * block_len..(u + 1) * block_len);
        let (lower, upper) = dims
            .map(|d| (self.mean[d] - delta * std[d], self.mean[d] + delta * std[d]))
            .unzip();
        BoxBounds::new(lower, upper).expect("δ >= 0 yields an ordered box")
    }
}
