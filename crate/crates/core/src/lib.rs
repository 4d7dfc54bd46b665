//! Desk-scale laboratory for DRL-based MU-MIMO user scheduling and grey-box
//! adversarial CSI attacks driven by polytope bound propagation.
//!
//! The crate is organised bottom-up:
//!
//! * [`channel`] correlated Rayleigh CSI traces, zero-forcing beamforming and rates.
//! * [`env`] the scheduling MDP: observations, action codec, proto-action lattice.
//! * [`ndiff`] a small reverse-mode autodiff tape, ReLU MLPs, Adam and checkpoints.
//! * [`sac`] Wolpertinger soft actor-critic training.
//! * [`polytope`] backward linear bound propagation through ReLU networks.
//! * [`attack`] the bound-minimising gradient attack and its baselines.
//! * [`schedulers`] exhaustive, greedy, random and learned scheduling policies.
//! * [`harness`] experiment orchestration, metrics and report writing.

pub mod attack;
pub mod channel;
pub mod env;
pub mod error;
pub mod harness;
pub mod ndiff;
pub mod polytope;
pub mod sac;
pub mod schedulers;

pub use error::{Error, Result};
