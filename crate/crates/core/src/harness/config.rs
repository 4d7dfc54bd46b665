//! Flat `key = value` configuration files.
//!
//! One assignment per line, `#` starts a comment, blank lines are ignored.
//! Later assignments override earlier ones, so command-line `--set` pairs can
//! simply be appended.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attack::{Aggregation, AttackParams, AttackScheme};
use crate::env::EnvConfig;
use crate::error::{Error, Result};
use crate::sac::{RewardTransform, SacConfig, Temperature};
use crate::schedulers::PolicyKind;

/// Parses `key = value` lines into ordered pairs.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {raw:?}", n + 1)))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", n + 1)));
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Splits a `key=value` command-line override.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    let (k, v) = s.split_once('=').ok_or_else(|| Error::Config(format!("override {s:?} is not key=value")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

fn read_file(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {v:?}"))),
    }
}

/// Comma separated list, e.g. `64,64`.
pub fn list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').filter(|s| !s.trim().is_empty()).map(|s| num(key, s.trim())).collect()
}

/// Applies an environment key; `Ok(false)` if the key is not an environment key.
fn set_env_key(env: &mut EnvConfig, key: &str, v: &str) -> Result<bool> {
    match key {
        "users" => env.num_users = num(key, v)?,
        "antennas" => env.num_antennas = num(key, v)?,
        "max_selected" => env.max_selected = num(key, v)?,
        "beta" => env.beta = num(key, v)?,
        "tx_power" => env.tx_power = num(key, v)?,
        "noise_variance" => env.noise_variance = num(key, v)?,
        "doppler" => env.doppler_coefficient = num(key, v)?,
        "proto_dims" => env.proto_dims = num(key, v)?,
        "knn_k" => env.knn_k = num(key, v)?,
        _ => return Ok(false),
    }
    Ok(true)
}

fn env_pairs(env: &EnvConfig) -> Vec<(&'static str, String)> {
    vec![
        ("users", env.num_users.to_string()),
        ("antennas", env.num_antennas.to_string()),
        ("max_selected", env.max_selected.to_string()),
        ("beta", env.beta.to_string()),
        ("tx_power", env.tx_power.to_string()),
        ("noise_variance", env.noise_variance.to_string()),
        ("doppler", env.doppler_coefficient.to_string()),
        ("proto_dims", env.proto_dims.to_string()),
        ("knn_k", env.knn_k.to_string()),
    ]
}

fn render(pairs: &[(&str, String)]) -> String {
    pairs.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

/// One evaluation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub env: EnvConfig,
    pub num_slots: usize,
    /// Independent replicas with derived seeds; metrics are pooled.
    pub resource_blocks: usize,
    pub policy: PolicyKind,
    pub attack: AttackScheme,
    /// The first `num_adversaries` users attack; the others are victims.
    pub num_adversaries: usize,
    pub delta_adv: f64,
    pub delta_vic: f64,
    pub falsify_stats: bool,
    pub restarts: usize,
    pub iterations: usize,
    pub step_size: f64,
    pub samples: usize,
    pub aggregation: Aggregation,
    pub checkpoint: Option<PathBuf>,
    /// Precomputed `attack.json` reused instead of optimising again.
    pub attack_file: Option<PathBuf>,
    pub seed: u64,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let p = AttackParams::default();
        Self {
            env: EnvConfig::default(),
            num_slots: 500,
            resource_blocks: 1,
            policy: PolicyKind::Random,
            attack: AttackScheme::None,
            num_adversaries: 4,
            delta_adv: 2.0,
            delta_vic: 1.5,
            falsify_stats: false,
            restarts: p.restarts,
            iterations: p.iterations,
            step_size: p.step_size,
            samples: p.samples,
            aggregation: p.aggregation,
            checkpoint: None,
            attack_file: None,
            seed: 0,
            output_dir: PathBuf::from("out"),
        }
    }
}

impl ExperimentConfig {
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        if set_env_key(&mut self.env, key, v)? {
            return Ok(());
        }
        match key {
            "slots" => self.num_slots = num(key, v)?,
            "resource_blocks" => self.resource_blocks = num(key, v)?,
            "policy" => self.policy = v.parse()?,
            "attack" => self.attack = v.parse()?,
            "adversaries" => self.num_adversaries = num(key, v)?,
            "delta_adv" => self.delta_adv = num(key, v)?,
            "delta_vic" => self.delta_vic = num(key, v)?,
            "falsify_stats" => self.falsify_stats = flag(key, v)?,
            "restarts" => self.restarts = num(key, v)?,
            "iterations" => self.iterations = num(key, v)?,
            "step_size" => self.step_size = num(key, v)?,
            "samples" => self.samples = num(key, v)?,
            "aggregation" => {
                self.aggregation = match v.to_ascii_lowercase().as_str() {
                    "max" => Aggregation::Max,
                    "sum" => Aggregation::Sum,
                    _ => return Err(Error::Config(format!("aggregation: expected max or sum, got {v:?}"))),
                }
            }
            "checkpoint" => self.checkpoint = if v.is_empty() { None } else { Some(PathBuf::from(v)) },
            "attack_file" => self.attack_file = if v.is_empty() { None } else { Some(PathBuf::from(v)) },
            "seed" => self.seed = num(key, v)?,
            "output_dir" => self.output_dir = PathBuf::from(v),
            _ => return Err(Error::Config(format!("unknown experiment key {key:?}"))),
        }
        Ok(())
    }

    pub fn apply(&mut self, pairs: &[(String, String)]) -> Result<()> {
        pairs.iter().try_for_each(|(k, v)| self.set(k, v))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply(&parse_pairs(text)?)?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&read_file(path)?)
    }

    /// Renders the configuration in the format [`parse`](Self::parse) reads.
    pub fn to_text(&self) -> String {
        let mut pairs = env_pairs(&self.env);
        pairs.extend([
            ("slots", self.num_slots.to_string()),
            ("resource_blocks", self.resource_blocks.to_string()),
            ("policy", self.policy.to_string()),
            ("attack", self.attack.to_string()),
            ("adversaries", self.num_adversaries.to_string()),
            ("delta_adv", self.delta_adv.to_string()),
            ("delta_vic", self.delta_vic.to_string()),
            ("falsify_stats", self.falsify_stats.to_string()),
            ("restarts", self.restarts.to_string()),
            ("iterations", self.iterations.to_string()),
            ("step_size", self.step_size.to_string()),
            ("samples", self.samples.to_string()),
            ("aggregation", match self.aggregation {
                Aggregation::Max => "max".into(),
                Aggregation::Sum => "sum".into(),
            }),
            ("checkpoint", self.checkpoint.as_ref().map(|p| p.display().to_string()).unwrap_or_default()),
            ("attack_file", self.attack_file.as_ref().map(|p| p.display().to_string()).unwrap_or_default()),
            ("seed", self.seed.to_string()),
            ("output_dir", self.output_dir.display().to_string()),
        ]);
        render(&pairs)
    }

    pub fn attack_params(&self, seed: u64) -> AttackParams {
        AttackParams {
            restarts: self.restarts,
            iterations: self.iterations,
            step_size: self.step_size,
            samples: self.samples,
            aggregation: self.aggregation,
            seed,
        }
    }

    pub fn adversaries(&self) -> Vec<usize> {
        (0..self.num_adversaries).collect()
    }

    pub fn victims(&self) -> Vec<usize> {
        (self.num_adversaries..self.env.num_users).collect()
    }

    pub fn needs_checkpoint(&self) -> bool {
        self.policy == PolicyKind::Sac || self.attack != AttackScheme::None
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        if self.num_slots == 0 || self.resource_blocks == 0 {
            return Err(Error::Config("slots and resource_blocks must be at least 1".into()));
        }
        if self.num_adversaries >= self.env.num_users {
            return Err(Error::Config(format!(
                "{} adversaries leave no victim among {} users",
                self.num_adversaries, self.env.num_users
            )));
        }
        if self.attack != AttackScheme::None && self.num_adversaries == 0 {
            return Err(Error::Config("an attack needs at least one adversary".into()));
        }
        if !(self.delta_adv >= 0.0 && self.delta_vic >= 0.0) {
            return Err(Error::Config("delta_adv and delta_vic must be non-negative".into()));
        }
        if matches!(self.attack, AttackScheme::Fggm | AttackScheme::Spgd) && (self.restarts == 0 || !(self.step_size > 0.0)) {
            return Err(Error::Config("gradient attacks need restarts >= 1 and a positive step_size".into()));
        }
        if self.attack == AttackScheme::Spgd && self.samples == 0 {
            return Err(Error::Config("spgd needs samples >= 1".into()));
        }
        if self.policy.is_exhaustive() && self.env.num_users > crate::schedulers::MAX_EXHAUSTIVE_USERS {
            return Err(Error::Config(format!("{} is exhaustive and refuses L = {}", self.policy, self.env.num_users)));
        }
        if self.needs_checkpoint() && self.checkpoint.is_none() {
            return Err(Error::Config(format!("policy {} with attack {} needs a checkpoint", self.policy, self.attack)));
        }
        Ok(())
    }
}

/// Agent training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub env: EnvConfig,
    pub sac: SacConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let env = EnvConfig::default();
        Self {
            sac: SacConfig::for_users(env.num_users),
            env,
        }
    }
}

impl TrainConfig {
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        if set_env_key(&mut self.env, key, v)? {
            return Ok(());
        }
        let s = &mut self.sac;
        match key {
            "actor_hidden" => s.actor_hidden = list(key, v)?,
            "critic_hidden" => s.critic_hidden = list(key, v)?,
            "replay_capacity" => s.replay_capacity = num(key, v)?,
            "batch_size" => s.batch_size = num(key, v)?,
            "discount" => s.discount = num(key, v)?,
            "tau" => s.tau = num(key, v)?,
            "alpha" => {
                s.temperature = match v.strip_prefix("auto") {
                    Some(rest) => Temperature::Auto {
                        initial: match rest.trim_start_matches(':') {
                            "" => 0.2,
                            x => num(key, x)?,
                        },
                    },
                    None => Temperature::Fixed { alpha: num(key, v)? },
                }
            }
            "lr" => {
                let lr = num(key, v)?;
                (s.actor_lr, s.critic_lr, s.alpha_lr) = (lr, lr, lr);
            }
            "actor_lr" => s.actor_lr = num(key, v)?,
            "critic_lr" => s.critic_lr = num(key, v)?,
            "alpha_lr" => s.alpha_lr = num(key, v)?,
            "steps" => s.total_steps = num(key, v)?,
            "warmup" => s.warmup_steps = num(key, v)?,
            "update_every" => s.update_every = num(key, v)?,
            "episode_len" => s.episode_len = num(key, v)?,
            "reward_transform" => {
                s.reward_transform = match v.to_ascii_lowercase().as_str() {
                    "identity" => RewardTransform::Identity,
                    "log1p" => RewardTransform::Log1p,
                    _ => return Err(Error::Config(format!("reward_transform: expected identity or log1p, got {v:?}"))),
                }
            }
            "seed" => s.seed = num(key, v)?,
            _ => return Err(Error::Config(format!("unknown training key {key:?}"))),
        }
        Ok(())
    }

    /// Applies pairs; the step budget follows `users` unless `steps` is given.
    pub fn apply(&mut self, pairs: &[(String, String)]) -> Result<()> {
        let explicit_steps = pairs.iter().any(|(k, _)| k == "steps");
        for (k, v) in pairs {
            self.set(k, v)?;
        }
        if !explicit_steps {
            self.sac.total_steps = SacConfig::for_users(self.env.num_users).total_steps;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply(&parse_pairs(text)?)?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&read_file(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.sac.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn comments_blank_lines_and_overrides() {
        let c = ExperimentConfig::parse("# eval\nusers = 6\n\nslots=20 # short\npolicy = OptPF\nslots = 30\n").unwrap();
        assert_eq!(c.env.num_users, 6);
        assert_eq!(c.num_slots, 30);
        assert_eq!(c.policy, PolicyKind::OptPf);
    }

    #[test]
    fn text_roundtrip() {
        let mut c = ExperimentConfig::default();
        c.apply(&[
            ("attack".into(), "fggm".into()),
            ("checkpoint".into(), "agent.bin".into()),
            ("attack_file".into(), "attack.json".into()),
            ("delta_vic".into(), "0.5".into()),
            ("aggregation".into(), "sum".into()),
        ])
        .unwrap();
        assert_eq!(ExperimentConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn malformed_lines_are_rejected() {
        assert!(ExperimentConfig::parse("users 8").is_err());
        assert!(ExperimentConfig::parse("colour = red").is_err());
        assert!(ExperimentConfig::parse("slots = many").is_err());
    }

    #[test]
    fn validation() {
        let mut c = ExperimentConfig::default();
        assert!(c.validate().is_ok());
        c.num_slots = 0;
        assert!(c.validate().is_err());
        c.num_slots = 1;
        c.policy = PolicyKind::Sac;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        c.policy = PolicyKind::Random;
        c.num_adversaries = 8;
        assert!(c.validate().is_err());
    }

    #[test]
    fn training_keys() {
        let t = TrainConfig::parse("users = 16\nactor_hidden = 64, 64\nalpha = auto:0.1\n").unwrap();
        assert_eq!(t.sac.actor_hidden, vec![64, 64]);
        assert_eq!(t.sac.total_steps, 150_000);
        assert_eq!(t.sac.temperature, Temperature::Auto { initial: 0.1 });
        let t = TrainConfig::parse("steps = 10\nusers = 16\nalpha = 0.05\n").unwrap();
        assert_eq!(t.sac.total_steps, 10);
        assert_eq!(t.sac.temperature, Temperature::Fixed { alpha: 0.05 });
    }
}
