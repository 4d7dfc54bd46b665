//! Multi-user channel: correlated Rayleigh CSI, zero-forcing beamforming and
//! achievable rates. All rates are in nats/s/Hz (natural logarithm).

mod matrix;
pub mod trace_file;

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub use matrix::{inner, norm_sqr, ComplexMatrix};

use crate::error::{Error, Result};

/// Largest admissible 1-norm condition number of `ĤᴴĤ` before a candidate
/// user set is treated as infeasible.
pub const MAX_GRAM_CONDITION: f64 = 1e6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelConfig {
    pub num_antennas: usize,
    pub num_users: usize,
    pub noise_variance: f64,
    pub tx_power: f64,
    /// Per-slot temporal correlation of every channel entry.
    pub doppler_coefficient: f64,
    pub seed: u64,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        Self {
            num_antennas: 4,
            num_users: 8,
            noise_variance: 0.1,
            tx_power: 1.0,
            doppler_coefficient: 0.99,
            seed: 0,
        }
    }
}

impl ChannelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_antennas == 0 || self.num_users == 0 {
            return Err(Error::Config("need at least one antenna and one user".into()));
        }
        if !(self.noise_variance > 0.0 && self.noise_variance.is_finite()) {
            return Err(Error::Config(format!(
                "noise variance must be positive, got {}",
                self.noise_variance
            )));
        }
        if !(self.tx_power > 0.0 && self.tx_power.is_finite()) {
            return Err(Error::Config(format!(
                "transmit power must be positive, got {}",
                self.tx_power
            )));
        }
        if !(0.0..1.0).contains(&self.doppler_coefficient) {
            return Err(Error::Config(format!(
                "doppler coefficient must lie in [0, 1), got {}",
                self.doppler_coefficient
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelState {
    pub slot: usize,
    /// `M x L`, column `l` is user `l`'s channel.
    pub true_csi: ComplexMatrix,
    /// Single-user matched-filter rate of each user.
    pub max_rates: Vec<f64>,
}

impl ChannelState {
    pub fn new(slot: usize, true_csi: ComplexMatrix, tx_power: f64, noise_variance: f64) -> Self {
        let max_rates = (0..true_csi.cols())
            .map(|l| single_user_max_rate(&true_csi.column(l), tx_power, noise_variance))
            .collect();
        Self {
            slot,
            true_csi,
            max_rates,
        }
    }
}

/// First-order Gauss-Markov Rayleigh fading,
/// `H(t+1) = ρ H(t) + sqrt(1 - ρ²) G` with `G` i.i.d. `CN(0, 1)`.
#[derive(Debug, Clone)]
pub struct FadingProcess {
    config: ChannelConfig,
    rng: ChaCha8Rng,
    current: ComplexMatrix,
    slot: usize,
}

impl FadingProcess {
    pub fn new(config: ChannelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let current = draw_cn(&mut rng, config.num_antennas, config.num_users);
        Ok(Self {
            config,
            rng,
            current,
            slot: 0,
        })
    }

    pub fn config(&self) -> &ChannelConfig {
        &self.config
    }

    pub fn state(&self) -> ChannelState {
        ChannelState::new(
            self.slot,
            self.current.clone(),
            self.config.tx_power,
            self.config.noise_variance,
        )
    }

    pub fn advance(&mut self) {
        let rho = self.config.doppler_coefficient;
        let innov = (1.0 - rho * rho).sqrt();
        let g = draw_cn(&mut self.rng, self.config.num_antennas, self.config.num_users);
        self.current = ComplexMatrix::from_fn(self.current.rows(), self.current.cols(), |r, c| {
            self.current[(r, c)] * rho + g[(r, c)] * innov
        });
        self.slot += 1;
    }
}

fn draw_cn(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> ComplexMatrix {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    ComplexMatrix::from_fn(rows, cols, |_, _| {
        let re: f64 = StandardNormal.sample(rng);
        let im: f64 = StandardNormal.sample(rng);
        Complex64::new(re * s, im * s)
    })
}

pub fn generate_csi_trace(config: &ChannelConfig, num_slots: usize) -> Result<Vec<ChannelState>> {
    if num_slots == 0 {
        return Err(Error::Config("trace needs at least one slot".into()));
    }
    let mut process = FadingProcess::new(config.clone())?;
    let mut out = Vec::with_capacity(num_slots);
    for t in 0..num_slots {
        if t > 0 {
            process.advance();
        }
        out.push(process.state());
    }
    Ok(out)
}

/// Zero-forcing beamformer `W = Ĥ(ĤᴴĤ)⁻¹` for the `M x N` reported CSI of a
/// candidate user set.
pub fn zf_beamformer(reported: &ComplexMatrix) -> Result<ComplexMatrix> {
    let n = reported.cols();
    if n == 0 || n > reported.rows() {
        return Err(Error::Singular {
            cond: f64::INFINITY,
        });
    }
    let gram = reported.gram();
    let inv = gram.inverse()?;
    let cond = gram.norm_1() * inv.norm_1();
    if !(cond < MAX_GRAM_CONDITION) {
        return Err(Error::Singular { cond });
    }
    reported.matmul(&inv)
}

/// Per-user rates `log(1 + SINR)` for the selected set. The beamformer is built
/// from the reported CSI, SINR is evaluated on the true CSI. Returns all zeros
/// when the reported subset is not ZF-feasible.
pub fn sinr_and_rates(
    true_csi: &ComplexMatrix,
    reported_csi: &ComplexMatrix,
    selected: &[usize],
    tx_power: f64,
    noise_variance: f64,
) -> Vec<f64> {
    let w = match zf_beamformer(&reported_csi.select_columns(selected)) {
        Ok(w) => w,
        Err(_) => return vec![0.0; selected.len()],
    };
    let h: Vec<Vec<Complex64>> = selected.iter().map(|&l| true_csi.column(l)).collect();
    (0..selected.len())
        .map(|i| {
            let wi = w.column(i);
            let signal = tx_power * inner(&wi, &h[i]).norm_sqr();
            let interference: f64 = (0..selected.len())
                .filter(|&j| j != i)
                .map(|j| inner(&wi, &h[j]).norm_sqr())
                .sum::<f64>()
                * tx_power;
            let sinr = signal / (noise_variance * norm_sqr(&wi) + interference);
            if sinr.is_finite() {
                sinr.ln_1p()
            } else {
                0.0
            }
        })
        .collect()
}

/// Rate of user `l` when it transmits alone with a matched filter.
pub fn single_user_max_rate(h: &[Complex64], tx_power: f64, noise_variance: f64) -> f64 {
    (tx_power * norm_sqr(h) / noise_variance).ln_1p()
}

/// Rates of all users transmitting together, used before a scheduling
/// decision: zero-forcing across all `L` users when `L <= M` and feasible,
/// otherwise matched filtering with every other user as interference.
pub fn all_users_rates(csi: &ComplexMatrix, tx_power: f64, noise_variance: f64) -> Vec<f64> {
    let all: Vec<usize> = (0..csi.cols()).collect();
    if csi.cols() <= csi.rows() && zf_beamformer(csi).is_ok() {
        return sinr_and_rates(csi, csi, &all, tx_power, noise_variance);
    }
    let cols: Vec<Vec<Complex64>> = all.iter().map(|&l| csi.column(l)).collect();
    cols.iter()
        .enumerate()
        .map(|(l, hl)| {
            let g = norm_sqr(hl);
            if g == 0.0 {
                return 0.0;
            }
            let interference: f64 = cols
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != l)
                .map(|(_, hj)| inner(hl, hj).norm_sqr())
                .sum();
            let sinr = tx_power * g * g / (noise_variance * g + tx_power * interference);
            sinr.ln_1p()
        })
        .collect()
}
