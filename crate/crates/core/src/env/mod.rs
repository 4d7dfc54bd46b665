//! Scheduling MDP: observation layout, the action codec, the proto-action
//! lattice, observation normalisation and the proportional-fair transition.

pub mod codec;
pub mod lattice;
pub mod normalizer;

use serde::{Deserialize, Serialize};

pub use codec::{action_count, binomial, decode_action, encode_action, ActionIndex, UserSubset};
pub use lattice::{ProtoLattice, ProtoPoint};
pub use normalizer::{NormalizerState, STD_EPS};

use crate::channel::{
    all_users_rates, sinr_and_rates, ChannelConfig, ChannelState, ComplexMatrix, FadingProcess,
};
use crate::error::{Error, Result};

/// Average rate every user starts from, keeps the PF ratio finite at t = 0.
pub const INITIAL_AVG_RATE: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub num_users: usize,
    pub num_antennas: usize,
    pub max_selected: usize,
    /// Weight of the previous average in the EMA `R' = (1-β) r + β R`.
    pub beta: f64,
    pub tx_power: f64,
    pub noise_variance: f64,
    pub doppler_coefficient: f64,
    pub proto_dims: usize,
    pub knn_k: usize,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            num_users: 8,
            num_antennas: 4,
            max_selected: 4,
            beta: 0.5,
            tx_power: 1.0,
            noise_variance: 0.1,
            doppler_coefficient: 0.99,
            proto_dims: 3,
            knn_k: 20,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        self.channel(0).validate()?;
        if self.max_selected == 0 || self.max_selected > self.num_users {
            return Err(Error::Config(format!(
                "max selected users must lie in 1..={}, got {}",
                self.num_users, self.max_selected
            )));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::Config(format!("beta must lie in [0, 1], got {}", self.beta)));
        }
        if self.proto_dims == 0 || self.knn_k == 0 {
            return Err(Error::Config("proto dims and k must be positive".into()));
        }
        Ok(())
    }

    pub fn channel(&self, seed: u64) -> ChannelConfig {
        ChannelConfig {
            num_antennas: self.num_antennas,
            num_users: self.num_users,
            noise_variance: self.noise_variance,
            tx_power: self.tx_power,
            doppler_coefficient: self.doppler_coefficient,
            seed,
        }
    }

    pub fn action_count(&self) -> usize {
        action_count(self.num_users, self.max_selected)
    }

    pub fn lattice(&self) -> ProtoLattice {
        ProtoLattice::new(self.action_count(), self.proto_dims)
    }

    /// Observation entries per user: `γ, R, Re/Im h_1 … h_M`.
    pub fn block_len(&self) -> usize {
        2 + 2 * self.num_antennas
    }

    pub fn obs_dim(&self) -> usize {
        self.num_users * self.block_len()
    }

    pub fn decode(&self, action: ActionIndex) -> Result<UserSubset> {
        decode_action(action, self.num_users, self.max_selected)
    }
}

/// Flat observation `[γ_l, R_l, Re h_{1,l}, Im h_{1,l}, …]` per user.
///
/// `γ_l` is the rate user `l` gets when every user transmits together
/// ([`all_users_rates`]) divided by its single-user rate.
pub fn build_observation(
    csi: &ComplexMatrix,
    avg_rates: &[f64],
    tx_power: f64,
    noise_variance: f64,
) -> Vec<f64> {
    let (m, l) = (csi.rows(), csi.cols());
    let joint = all_users_rates(csi, tx_power, noise_variance);
    let mut obs = Vec::with_capacity(l * (2 + 2 * m));
    for user in 0..l {
        let h = csi.column(user);
        let alone = crate::channel::single_user_max_rate(&h, tx_power, noise_variance);
        let gamma = if alone > 0.0 {
            (joint[user] / alone).clamp(0.0, 1.0)
        } else {
            0.0
        };
        obs.push(gamma);
        obs.push(avg_rates[user]);
        for z in h {
            obs.push(z.re);
            obs.push(z.im);
        }
    }
    obs
}

/// Writes user CSI columns back out of a flat observation; inverse of the CSI
/// part of [`build_observation`].
pub fn csi_from_block(block: &[f64], num_antennas: usize) -> Vec<num_complex::Complex64> {
    (0..num_antennas)
        .map(|m| num_complex::Complex64::new(block[2 + 2 * m], block[3 + 2 * m]))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub selected: UserSubset,
    /// Length `L`; zero for unscheduled users.
    pub rates: Vec<f64>,
    /// `Σ_{l∈S} r_l / R_l` with `R` taken before the update.
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pub slot: usize,
    pub avg_rates: Vec<f64>,
    pub channel: ChannelState,
    pub config: EnvConfig,
}

impl EnvState {
    pub fn new(config: EnvConfig, channel: ChannelState) -> Self {
        Self {
            slot: 0,
            avg_rates: vec![INITIAL_AVG_RATE; config.num_users],
            channel,
            config,
        }
    }

    pub fn observe(&self, reported_csi: &ComplexMatrix) -> Vec<f64> {
        build_observation(
            reported_csi,
            &self.avg_rates,
            self.config.tx_power,
            self.config.noise_variance,
        )
    }

    /// One slot: rates on the true channel with the reported-CSI beamformer,
    /// reward, and the EMA update. The returned state keeps the same channel.
    pub fn step(&self, action: ActionIndex, reported_csi: &ComplexMatrix) -> Result<(EnvState, StepOutcome)> {
        let selected = self.config.decode(action)?;
        let members = selected.members();
        let set_rates = sinr_and_rates(
            &self.channel.true_csi,
            reported_csi,
            members,
            self.config.tx_power,
            self.config.noise_variance,
        );
        let mut rates = vec![0.0; self.config.num_users];
        for (&user, r) in members.iter().zip(set_rates) {
            rates[user] = r;
        }
        let reward = pf_score(&rates, &self.avg_rates, members);
        let beta = self.config.beta;
        let avg_rates = rates
            .iter()
            .zip(&self.avg_rates)
            .map(|(r, avg)| (1.0 - beta) * r + beta * avg)
            .collect();
        let next = EnvState {
            slot: self.slot + 1,
            avg_rates,
            channel: self.channel.clone(),
            config: self.config.clone(),
        };
        Ok((
            next,
            StepOutcome {
                selected,
                rates,
                reward,
            },
        ))
    }
}

pub fn pf_score(rates: &[f64], avg_rates: &[f64], members: &[usize]) -> f64 {
    members.iter().map(|&l| rates[l] / avg_rates[l]).sum()
}

/// Environment driven by a fading process.
#[derive(Debug, Clone)]
pub struct Environment {
    fading: FadingProcess,
    state: EnvState,
}

impl Environment {
    pub fn new(config: EnvConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let fading = FadingProcess::new(config.channel(seed))?;
        let state = EnvState::new(config, fading.state());
        Ok(Self { fading, state })
    }

    pub fn state(&self) -> &EnvState {
        &self.state
    }

    pub fn config(&self) -> &EnvConfig {
        &self.state.config
    }

    pub fn true_csi(&self) -> &ComplexMatrix {
        &self.state.channel.true_csi
    }

    pub fn observe(&self, reported_csi: &ComplexMatrix) -> Vec<f64> {
        self.state.observe(reported_csi)
    }

    /// Applies `action` and advances the channel by one slot.
    pub fn step(&mut self, action: ActionIndex, reported_csi: &ComplexMatrix) -> Result<StepOutcome> {
        let (next, outcome) = self.state.step(action, reported_csi)?;
        self.fading.advance();
        self.state = EnvState {
            channel: self.fading.state(),
            ..next
        };
        Ok(outcome)
    }
}
