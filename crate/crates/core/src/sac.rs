//! Wolpertinger soft actor-critic.
//!
//! The actor maps a normalised observation to a Gaussian over `z ∈ R^D` with a
//! state-independent log-std; proto actions are `u = (tanh z + 1) / 2`. The
//! `k` nearest lattice actions are rescored by the minimum of two critics and
//! the best one is executed. Replay stores the executed lattice point.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::env::{ActionIndex, EnvConfig, Environment, NormalizerState, ProtoLattice, ProtoPoint};
use crate::error::{Error, Result};
use crate::ndiff::{load_weights, save_weights, AdamConfig, AdamState, Graph, Layer, MlpParams, OutputActivation, Tensor, Var, WeightFile};

const LOG_STD_MIN: f64 = -5.0;
const LOG_STD_MAX: f64 = 2.0;
const SQUASH_EPS: f64 = 1e-6;
const HALF_LOG_2PI: f64 = 0.918_938_533_204_672_7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum Temperature {
    Fixed { alpha: f64 },
    /// Dual descent towards entropy `-D`.
    Auto { initial: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RewardTransform {
    Identity,
    Log1p,
}

impl RewardTransform {
    pub fn apply(self, r: f64) -> f64 {
        match self {
            RewardTransform::Identity => r,
            RewardTransform::Log1p => r.max(0.0).ln_1p(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SacConfig {
    pub actor_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    pub replay_capacity: usize,
    pub batch_size: usize,
    pub discount: f64,
    pub tau: f64,
    pub temperature: Temperature,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub alpha_lr: f64,
    pub total_steps: usize,
    /// Uniform-random proto actions before learning starts.
    pub warmup_steps: usize,
    /// Environment steps per gradient update.
    pub update_every: usize,
    pub episode_len: usize,
    pub reward_transform: RewardTransform,
    pub seed: u64,
}

impl Default for SacConfig {
    fn default() -> Self {
        Self {
            actor_hidden: vec![128, 128],
            critic_hidden: vec![256, 256],
            replay_capacity: 100_000,
            batch_size: 64,
            discount: 0.95,
            tau: 0.005,
            temperature: Temperature::Auto { initial: 0.2 },
            actor_lr: 3e-4,
            critic_lr: 3e-4,
            alpha_lr: 3e-4,
            total_steps: 60_000,
            warmup_steps: 1_000,
            update_every: 1,
            episode_len: 500,
            reward_transform: RewardTransform::Log1p,
            seed: 0,
        }
    }
}

impl SacConfig {
    /// Default budget for a system with `num_users` users.
    pub fn for_users(num_users: usize) -> Self {
        Self {
            total_steps: if num_users > 8 { 150_000 } else { 60_000 },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 || self.batch_size > self.replay_capacity {
            return bad("need 1 <= batch_size <= replay_capacity");
        }
        if self.actor_hidden.iter().chain(&self.critic_hidden).any(|&h| h == 0) {
            return bad("hidden layer widths must be positive");
        }
        if !(0.0..=1.0).contains(&self.discount) || !(0.0..=1.0).contains(&self.tau) {
            return bad("discount and tau must lie in [0, 1]");
        }
        if self.episode_len == 0 || self.update_every == 0 {
            return bad("episode_len and update_every must be positive");
        }
        match self.temperature {
            Temperature::Fixed { alpha } if alpha < 0.0 => bad("temperature must be non-negative"),
            Temperature::Auto { initial } if !(initial > 0.0) => bad("initial temperature must be positive"),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    /// Raw (unnormalised) observations.
    pub obs: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_obs: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Transition>,
    next: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            items: Vec::with_capacity(capacity.min(1 << 16)),
            next: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.next] = t;
        }
        self.next = (self.next + 1) % self.capacity;
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items.iter()
    }

    /// Uniform sampling with replacement.
    pub fn sample<R: Rng>(&self, n: usize, rng: &mut R) -> Vec<&Transition> {
        (0..n).map(|_| &self.items[rng.gen_range(0..self.items.len())]).collect()
    }
}

/// A training batch with normalised observations.
#[derive(Debug, Clone)]
pub struct Batch {
    pub obs: Tensor,
    pub actions: Tensor,
    pub rewards: Vec<f64>,
    pub next_obs: Tensor,
}

impl Batch {
    pub fn from_transitions(items: &[&Transition], norm: &NormalizerState) -> Result<Self> {
        let rows = |f: &dyn Fn(&Transition) -> Result<Vec<f64>>| -> Result<Tensor> {
            Ok(Tensor::from_rows(&items.iter().map(|t| f(t)).collect::<Result<Vec<_>>>()?))
        };
        Ok(Self {
            obs: rows(&|t| norm.normalize(&t.obs))?,
            actions: rows(&|t| Ok(t.action.clone()))?,
            rewards: items.iter().map(|t| t.reward).collect(),
            next_obs: rows(&|t| norm.normalize(&t.next_obs))?,
        })
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }
}

/// Networks of the agent. The actor outputs the Gaussian mean of `z`.
#[derive(Debug, Clone, PartialEq)]
pub struct SacNets {
    pub actor: MlpParams,
    pub log_std: Vec<f64>,
    pub critics: [MlpParams; 2],
    pub targets: [MlpParams; 2],
    pub log_alpha: f64,
}

impl SacNets {
    pub fn init<R: Rng>(obs_dim: usize, proto_dims: usize, config: &SacConfig, rng: &mut R) -> Self {
        let dims = |inp: usize, hidden: &[usize], out: usize| -> Vec<usize> {
            std::iter::once(inp).chain(hidden.iter().copied()).chain(std::iter::once(out)).collect()
        };
        let actor = MlpParams::init(&dims(obs_dim, &config.actor_hidden, proto_dims), OutputActivation::Identity, 0.1, rng);
        let cdims = dims(obs_dim + proto_dims, &config.critic_hidden, 1);
        let c1 = MlpParams::init(&cdims, OutputActivation::Identity, 1.0, rng);
        let c2 = MlpParams::init(&cdims, OutputActivation::Identity, 1.0, rng);
        let initial_alpha = match config.temperature {
            Temperature::Fixed { alpha } => alpha,
            Temperature::Auto { initial } => initial,
        };
        Self {
            actor,
            log_std: vec![-0.5; proto_dims],
            critics: [c1.clone(), c2.clone()],
            targets: [c1, c2],
            log_alpha: initial_alpha.ln(),
        }
    }

    pub fn alpha(&self) -> f64 {
        self.log_alpha.exp()
    }
}

/// `(tanh z + 1) / 2`, equal to `sigmoid(2z)`.
pub fn squash(z: f64) -> f64 {
    0.5 * (z.tanh() + 1.0)
}

/// The deterministic actor `x ↦ (tanh μ(x) + 1)/2` as a plain sigmoid-output
/// network, suitable for bound propagation.
pub fn greedy_actor(actor: &MlpParams) -> MlpParams {
    let mut p = actor.clone();
    let last = p.layers.last_mut().expect("actor has layers");
    *last = Layer {
        weight: last.weight.map(|w| 2.0 * w),
        bias: last.bias.iter().map(|b| 2.0 * b).collect(),
    };
    p.output = OutputActivation::Sigmoid;
    p
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActionMode {
    Explore,
    Greedy,
}

/// Critic input rows `[obs | point]` for each candidate.
fn critic_inputs(obs: &[f64], points: &[&[f64]]) -> Tensor {
    Tensor::from_rows(&points.iter().map(|p| [obs, p].concat()).collect::<Vec<_>>())
}

/// Chooses among the `k` nearest lattice actions of the actor's proto action
/// the one with the highest `min(Q1, Q2)`; equal scores go to the smaller
/// action index.
#[allow(clippy::too_many_arguments)]
pub fn select_action<R: Rng>(
    actor: &MlpParams,
    log_std: &[f64],
    critics: [&MlpParams; 2],
    lattice: &ProtoLattice,
    obs: &[f64],
    k: usize,
    mode: ActionMode,
    rng: &mut R,
) -> Result<(ActionIndex, ProtoPoint)> {
    if obs.len() != actor.in_dim() || critics.iter().any(|c| c.in_dim() != obs.len() + lattice.dims()) {
        return Err(Error::Shape(format!(
            "observation of length {} does not fit actor input {} / critic input {}",
            obs.len(),
            actor.in_dim(),
            critics[0].in_dim()
        )));
    }
    let mean = actor.forward_batch(&Tensor::row(obs.to_vec())).into_vec();
    let proto: Vec<f64> = match mode {
        ActionMode::Greedy => mean.iter().map(|&m| squash(m)).collect(),
        ActionMode::Explore => mean
            .iter()
            .zip(log_std)
            .map(|(&m, &s)| squash(m + s.exp() * rng.sample::<f64, _>(StandardNormal)))
            .collect(),
    };
    let cands = lattice.knn(&proto, k.max(1));
    if cands.len() == 1 {
        let a = cands[0].0;
        return Ok((a, ProtoPoint(lattice.point(a).to_vec())));
    }
    let points: Vec<&[f64]> = cands.iter().map(|(a, _)| lattice.point(*a)).collect();
    let x = critic_inputs(obs, &points);
    let (q1, q2) = (critics[0].forward_batch(&x), critics[1].forward_batch(&x));
    let mut best = (cands[0].0, f64::NEG_INFINITY);
    for (i, (a, _)) in cands.iter().enumerate() {
        let q = q1.data()[i].min(q2.data()[i]);
        if q > best.1 || (q == best.1 && *a < best.0) {
            best = (*a, q);
        }
    }
    Ok((best.0, ProtoPoint(lattice.point(best.0).to_vec())))
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct Losses {
    pub critic: f64,
    pub actor: f64,
    pub alpha: f64,
    /// Mean `-log π` of the batch's fresh actor samples.
    pub entropy: f64,
}

impl Losses {
    pub fn is_finite(&self) -> bool {
        self.critic.is_finite() && self.actor.is_finite() && self.alpha.is_finite() && self.entropy.is_finite()
    }
}

/// Optimiser state for [`sac_update`].
#[derive(Debug, Clone)]
pub struct SacOptimizers {
    pub actor: AdamState,
    pub critics: [AdamState; 2],
    pub alpha: AdamState,
}

impl SacOptimizers {
    pub fn new(nets: &SacNets, config: &SacConfig) -> Self {
        let mut actor_params = nets.actor.params();
        actor_params.push(&nets.log_std);
        Self {
            actor: AdamState::for_params(AdamConfig::with_lr(config.actor_lr), &actor_params),
            critics: [
                AdamState::for_params(AdamConfig::with_lr(config.critic_lr), &nets.critics[0].params()),
                AdamState::for_params(AdamConfig::with_lr(config.critic_lr), &nets.critics[1].params()),
            ],
            alpha: AdamState::new(AdamConfig::with_lr(config.alpha_lr), &[1]),
        }
    }
}

/// Squashed-Gaussian sample on the graph: returns `(u, log π(u))`, `u` is
/// `B x D`, `log π` is `B x 1`.
fn sample_on_graph(g: &mut Graph, mean: Var, log_std: Var, eps: &Tensor) -> (Var, Var) {
    let eps_v = g.constant(eps.clone());
    let std = g.exp(log_std);
    let noise = g.mul(std, eps_v);
    let z = g.add(mean, noise);
    let t = g.tanh(z);
    let one = g.scalar(1.0);
    let tp1 = g.add(t, one);
    let u = g.scale(tp1, 0.5);
    // log N(z; μ, σ) - log |du/dz| with du/dz = (1 - t²)/2
    let gauss = g.constant(eps.map(|e| -0.5 * e * e - HALF_LOG_2PI + std::f64::consts::LN_2));
    let t2 = g.mul(t, t);
    let jac_arg0 = g.sub(one, t2);
    let eps_c = g.scalar(SQUASH_EPS);
    let jac_arg = g.add(jac_arg0, eps_c);
    let log_jac = g.log(jac_arg);
    let per_dim0 = g.sub(gauss, log_std);
    let per_dim = g.sub(per_dim0, log_jac);
    let logp = g.sum_cols(per_dim);
    (u, logp)
}

fn sample_plain(mean: &Tensor, log_std: &[f64], eps: &Tensor) -> (Tensor, Vec<f64>) {
    let d = mean.cols();
    let mut u = Tensor::zeros(mean.rows(), d);
    let mut logp = vec![0.0; mean.rows()];
    for i in 0..mean.rows() {
        for j in 0..d {
            let e = eps.get(i, j);
            let z = mean.get(i, j) + log_std[j].exp() * e;
            let t = z.tanh();
            u.set(i, j, 0.5 * (t + 1.0));
            logp[i] += -0.5 * e * e - HALF_LOG_2PI - log_std[j] + std::f64::consts::LN_2 - (1.0 - t * t + SQUASH_EPS).ln();
        }
    }
    (u, logp)
}

fn normal_tensor<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// One gradient step on both critics, the actor and (in auto mode) the
/// temperature, followed by Polyak averaging of the target critics.
pub fn sac_update<R: Rng>(nets: &mut SacNets, opt: &mut SacOptimizers, batch: &Batch, config: &SacConfig, rng: &mut R) -> Result<Losses> {
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let b = batch.len();
    let d = nets.log_std.len();
    let alpha = nets.alpha();

    // critic targets
    let next_mean = nets.actor.forward_batch(&batch.next_obs);
    let (next_u, next_logp) = sample_plain(&next_mean, &nets.log_std, &normal_tensor(b, d, rng));
    let next_x = concat_rows(&batch.next_obs, &next_u);
    let (t1, t2) = (nets.targets[0].forward_batch(&next_x), nets.targets[1].forward_batch(&next_x));
    let y: Vec<f64> = (0..b)
        .map(|i| batch.rewards[i] + config.discount * (t1.data()[i].min(t2.data()[i]) - alpha * next_logp[i]))
        .collect();

    let x = concat_rows(&batch.obs, &batch.actions);
    let mut critic_loss = 0.0;
    for c in 0..2 {
        let mut g = Graph::new();
        let vars = nets.critics[c].register(&mut g, true);
        let xv = g.constant(x.clone());
        let q = vars.forward(&mut g, xv);
        let yv = g.constant(Tensor::column(y.clone()));
        let diff = g.sub(q, yv);
        let sq = g.mul(diff, diff);
        let loss = g.mean(sq);
        critic_loss += 0.5 * g.value(loss).item();
        let grads = g.backward(loss);
        let gs: Vec<Tensor> = vars.param_vars().iter().map(|&v| grads.get_or_zeros(v, g.value(v).shape())).collect();
        let gslices: Vec<&[f64]> = gs.iter().map(|t| t.data()).collect();
        opt.critics[c].update(&mut nets.critics[c].params_mut(), &gslices)?;
    }

    // actor
    let mut g = Graph::new();
    let avars = nets.actor.register(&mut g, true);
    let log_std = g.input(Tensor::row(nets.log_std.clone()));
    let ov = g.constant(batch.obs.clone());
    let mean = avars.forward(&mut g, ov);
    let (u, logp) = sample_on_graph(&mut g, mean, log_std, &normal_tensor(b, d, rng));
    let ov2 = g.constant(batch.obs.clone());
    let xin = g.concat_cols(&[ov2, u]);
    let c1 = nets.critics[0].register(&mut g, false);
    let c2 = nets.critics[1].register(&mut g, false);
    let q1 = c1.forward(&mut g, xin);
    let q2 = c2.forward(&mut g, xin);
    let q = g.min(q1, q2);
    let scaled = g.scale(logp, alpha);
    let obj = g.sub(scaled, q);
    let loss = g.mean(obj);
    let actor_loss = g.value(loss).item();
    let logp_vals = g.value(logp).data().to_vec();
    let grads = g.backward(loss);
    let mut gs: Vec<Tensor> = avars.param_vars().iter().map(|&v| grads.get_or_zeros(v, g.value(v).shape())).collect();
    gs.push(grads.get_or_zeros(log_std, (1, d)));
    let gslices: Vec<&[f64]> = gs.iter().map(|t| t.data()).collect();
    {
        let mut params = nets.actor.params_mut();
        params.push(nets.log_std.as_mut_slice());
        opt.actor.update(&mut params, &gslices)?;
    }
    nets.log_std.iter_mut().for_each(|s| *s = s.clamp(LOG_STD_MIN, LOG_STD_MAX));

    // temperature: L(log α) = -log α · mean(log π + target)
    let mean_logp = logp_vals.iter().sum::<f64>() / b as f64;
    let target = -(d as f64);
    let alpha_loss = -nets.log_alpha * (mean_logp + target);
    if let Temperature::Auto { .. } = config.temperature {
        let grad = [-(mean_logp + target)];
        let mut la = [nets.log_alpha];
        opt.alpha.update(&mut [&mut la], &[&grad])?;
        nets.log_alpha = la[0];
    }

    for c in 0..2 {
        let src = nets.critics[c].clone();
        nets.targets[c].soft_update(&src, config.tau);
    }
    Ok(Losses {
        critic: critic_loss,
        actor: actor_loss,
        alpha: alpha_loss,
        entropy: -mean_logp,
    })
}

fn concat_rows(a: &Tensor, b: &Tensor) -> Tensor {
    Tensor::from_fn(a.rows(), a.cols() + b.cols(), |i, j| if j < a.cols() { a.get(i, j) } else { b.get(i, j - a.cols()) })
}

/// Trained agent: networks, normaliser and the configuration that built them.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub env: EnvConfig,
    pub config: SacConfig,
    pub actor: MlpParams,
    pub log_std: Vec<f64>,
    pub critics: [MlpParams; 2],
    pub normalizer: NormalizerState,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    env: EnvConfig,
    sac: SacConfig,
}

impl Checkpoint {
    pub fn from_nets(env: EnvConfig, config: SacConfig, nets: &SacNets, normalizer: NormalizerState) -> Self {
        Self {
            env,
            config,
            actor: nets.actor.clone(),
            log_std: nets.log_std.clone(),
            critics: nets.critics.clone(),
            normalizer,
        }
    }

    pub fn lattice(&self) -> ProtoLattice {
        self.env.lattice()
    }

    /// Deterministic actor in proto-action space.
    pub fn greedy_actor(&self) -> MlpParams {
        greedy_actor(&self.actor)
    }

    /// Critic attacked by default.
    pub fn critic(&self) -> &MlpParams {
        &self.critics[0]
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        let obs = self.env.obs_dim();
        let d = self.env.proto_dims;
        let ok = self.actor.in_dim() == obs
            && self.actor.out_dim() == d
            && self.log_std.len() == d
            && self.normalizer.dim() == obs
            && self.critics.iter().all(|c| c.in_dim() == obs + d && c.out_dim() == 1);
        if ok {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "checkpoint networks do not match L={}, M={}, D={}",
                self.env.num_users, self.env.num_antennas, d
            )))
        }
    }

    /// Greedy Wolpertinger decision for a raw observation.
    pub fn greedy_action(&self, lattice: &ProtoLattice, raw_obs: &[f64]) -> Result<(ActionIndex, ProtoPoint)> {
        let obs = self.normalizer.normalize(raw_obs)?;
        let mut unused = ChaCha8Rng::seed_from_u64(0);
        select_action(
            &self.actor,
            &self.log_std,
            [&self.critics[0], &self.critics[1]],
            lattice,
            &obs,
            self.env.knn_k,
            ActionMode::Greedy,
            &mut unused,
        )
    }

    pub fn to_weight_file(&self) -> Result<WeightFile> {
        Ok(WeightFile {
            networks: vec![
                ("actor".into(), self.actor.clone()),
                ("critic1".into(), self.critics[0].clone()),
                ("critic2".into(), self.critics[1].clone()),
            ],
            vectors: vec![("log_std".into(), self.log_std.clone())],
            normalizer: Some(self.normalizer.clone()),
            meta: serde_json::to_value(CheckpointMeta {
                env: self.env.clone(),
                sac: self.config.clone(),
            })?,
        })
    }

    pub fn from_weight_file(wf: &WeightFile) -> Result<Self> {
        let meta: CheckpointMeta = serde_json::from_value(wf.meta.clone()).map_err(|e| Error::Format(format!("checkpoint metadata: {e}")))?;
        let ck = Self {
            env: meta.env,
            config: meta.sac,
            actor: wf.network("actor")?.clone(),
            log_std: wf.vector("log_std")?.to_vec(),
            critics: [wf.network("critic1")?.clone(), wf.network("critic2")?.clone()],
            normalizer: wf.normalizer.clone().ok_or_else(|| Error::Format("checkpoint without normalizer".into()))?,
        };
        ck.validate()?;
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_weights(&self.to_weight_file()?, path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_weight_file(&load_weights(path)?)
    }
}

/// Seed of training episode `episode`.
pub fn episode_seed(seed: u64, episode: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(episode.wrapping_mul(0xD1B5_4A32_D192_ED03)) ^ 0x5EED
}

/// Trains an agent. One CSV row per finished episode is written to `curve`:
/// `step,episode,mean_reward,critic_loss,actor_loss,alpha,entropy`.
pub fn train(env_config: &EnvConfig, config: &SacConfig, mut curve: Option<&mut dyn Write>) -> Result<Checkpoint> {
    env_config.validate()?;
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let obs_dim = env_config.obs_dim();
    let d = env_config.proto_dims;
    let lattice = env_config.lattice();
    let mut nets = SacNets::init(obs_dim, d, config, &mut rng);
    let mut opt = SacOptimizers::new(&nets, config);
    let mut norm = NormalizerState::new(obs_dim);
    let mut replay = ReplayBuffer::new(config.replay_capacity);
    let io = |e: std::io::Error| Error::io("<training curve>", e);
    if let Some(w) = curve.as_deref_mut() {
        writeln!(w, "step,episode,mean_reward,critic_loss,actor_loss,alpha,entropy").map_err(io)?;
    }

    let mut losses = Losses::default();
    let mut step = 0;
    let mut episode = 0u64;
    while step < config.total_steps {
        let mut env = Environment::new(env_config.clone(), episode_seed(config.seed, episode))?;
        let mut reward_sum = 0.0;
        let mut slots = 0;
        let mut obs = env.observe(&env.true_csi().clone());
        while slots < config.episode_len && step < config.total_steps {
            norm.update(&obs);
            let (action, point) = if step < config.warmup_steps || norm.count < 2 {
                let u: Vec<f64> = (0..d).map(|_| rng.gen::<f64>()).collect();
                let a = lattice.knn(&u, 1)[0].0;
                (a, lattice.point(a).to_vec())
            } else {
                let z = norm.normalize(&obs)?;
                let (a, p) = select_action(
                    &nets.actor,
                    &nets.log_std,
                    [&nets.critics[0], &nets.critics[1]],
                    &lattice,
                    &z,
                    env_config.knn_k,
                    ActionMode::Explore,
                    &mut rng,
                )?;
                (a, p.0)
            };
            let csi = env.true_csi().clone();
            let outcome = env.step(action, &csi)?;
            let next_obs = env.observe(&env.true_csi().clone());
            reward_sum += outcome.reward;
            replay.push(Transition {
                obs: std::mem::replace(&mut obs, next_obs.clone()),
                action: point,
                reward: config.reward_transform.apply(outcome.reward),
                next_obs,
            });
            step += 1;
            slots += 1;
            if step >= config.warmup_steps && replay.len() >= config.batch_size && step % config.update_every == 0 {
                let items = replay.sample(config.batch_size, &mut rng);
                let batch = Batch::from_transitions(&items, &norm)?;
                losses = sac_update(&mut nets, &mut opt, &batch, config, &mut rng)?;
                let params_ok = nets.actor.params().iter().chain(nets.critics[0].params().iter()).all(|p| p.iter().all(|v| v.is_finite()));
                if !losses.is_finite() || !params_ok || !nets.log_alpha.is_finite() {
                    return Err(Error::Diverged {
                        step,
                        what: format!("non-finite SAC losses {losses:?}"),
                    });
                }
            }
        }
        if let Some(w) = curve.as_deref_mut() {
            writeln!(
                w,
                "{step},{episode},{:.6},{:.6},{:.6},{:.6},{:.6}",
                reward_sum / slots as f64,
                losses.critic,
                losses.actor,
                nets.alpha(),
                losses.entropy
            )
            .map_err(io)?;
        }
        episode += 1;
    }
    Ok(Checkpoint::from_nets(env_config.clone(), config.clone(), &nets, norm))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndiff::forward_mlp;

    fn tiny_env() -> EnvConfig {
        EnvConfig {
            num_users: 4,
            num_antennas: 4,
            max_selected: 2,
            knn_k: 4,
            ..EnvConfig::default()
        }
    }

    fn tiny_config(steps: usize) -> SacConfig {
        SacConfig {
            actor_hidden: vec![16],
            critic_hidden: vec![16],
            replay_capacity: 256,
            batch_size: 16,
            total_steps: steps,
            warmup_steps: 20,
            episode_len: 50,
            seed: 3,
            ..SacConfig::default()
        }
    }

    fn constant_critic(in_dim: usize, weights: Vec<f64>, bias: f64) -> MlpParams {
        MlpParams::new(vec![Layer { weight: Tensor::from_vec(1, in_dim, weights), bias: vec![bias] }], OutputActivation::Identity).unwrap()
    }

    #[test]
    fn squash_matches_sigmoid_view() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let actor = MlpParams::init(&[5, 8, 3], OutputActivation::Identity, 1.0, &mut rng);
        let x = [0.2, -0.4, 1.0, 0.0, 0.3];
        let mean = forward_mlp(&actor, &x).unwrap();
        let view = forward_mlp(&greedy_actor(&actor), &x).unwrap();
        for (m, v) in mean.iter().zip(&view) {
            assert!((squash(*m) - v).abs() < 1e-12);
        }
    }

    #[test]
    fn k1_returns_nearest_and_ties_go_to_smaller_index() {
        let lattice = ProtoLattice::new(8, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let actor = MlpParams::new(vec![Layer { weight: Tensor::zeros(3, 2), bias: vec![10.0, -10.0, 10.0] }], OutputActivation::Identity).unwrap();
        let zero = constant_critic(5, vec![0.0; 5], 0.0);
        let (a, p) = select_action(&actor, &[0.0; 3], [&zero, &zero], &lattice, &[0.0, 0.0], 1, ActionMode::Greedy, &mut rng).unwrap();
        assert_eq!(p.0, vec![1.0, 0.0, 1.0]);
        assert_eq!(lattice.point(a), &[1.0, 0.0, 1.0]);
        let (a, _) = select_action(&actor, &[0.0; 3], [&zero, &zero], &lattice, &[0.0, 0.0], 8, ActionMode::Greedy, &mut rng).unwrap();
        assert_eq!(a, ActionIndex(0));
    }

    #[test]
    fn critic_preference_decides() {
        let lattice = ProtoLattice::new(8, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let actor = MlpParams::new(vec![Layer { weight: Tensor::zeros(3, 2), bias: vec![0.0; 3] }], OutputActivation::Identity).unwrap();
        // Q grows with the third proto coordinate and shrinks with the first.
        let c = constant_critic(5, vec![0.0, 0.0, -1.0, 0.0, 1.0], 0.0);
        let (_, p) = select_action(&actor, &[0.0; 3], [&c, &c], &lattice, &[0.0, 0.0], 8, ActionMode::Greedy, &mut rng).unwrap();
        assert_eq!(p.0, vec![0.0, 0.0, 1.0]);
        // The pessimistic twin decides.
        let c2 = constant_critic(5, vec![0.0, 0.0, 0.0, 0.0, -5.0], 0.0);
        let (_, p) = select_action(&actor, &[0.0; 3], [&c, &c2], &lattice, &[0.0, 0.0], 8, ActionMode::Greedy, &mut rng).unwrap();
        assert_eq!(p.0[2], 0.0);
    }

    #[test]
    fn replay_ring_buffer() {
        let mut rb = ReplayBuffer::new(3);
        for i in 0..5 {
            rb.push(Transition { obs: vec![i as f64], action: vec![0.5], reward: i as f64, next_obs: vec![0.0] });
        }
        assert_eq!(rb.len(), 3);
        let mut rewards: Vec<f64> = rb.iter().map(|t| t.reward).collect();
        rewards.sort_by(f64::total_cmp);
        assert_eq!(rewards, vec![2.0, 3.0, 4.0]);
    }

    #[test]
    fn zero_steps_returns_initialisation() {
        let env = tiny_env();
        let cfg = tiny_config(0);
        let ck = train(&env, &cfg, None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let nets = SacNets::init(env.obs_dim(), env.proto_dims, &cfg, &mut rng);
        assert_eq!(ck.actor, nets.actor);
        assert_eq!(ck.critics, nets.critics);
        assert_eq!(ck.normalizer.count, 0);
    }

    #[test]
    fn training_is_reproducible_and_roundtrips() {
        let env = tiny_env();
        let cfg = tiny_config(120);
        let mut curve = Vec::new();
        let a = train(&env, &cfg, Some(&mut curve)).unwrap();
        let b = train(&env, &cfg, None).unwrap();
        assert_eq!(a, b);
        assert!(String::from_utf8(curve).unwrap().lines().count() >= 3);
        assert_eq!(a.normalizer.count, 120);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("agent.bin");
        a.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, a);
        let lattice = a.lattice();
        let mut env_run = Environment::new(env, 9).unwrap();
        for _ in 0..5 {
            let obs = env_run.observe(&env_run.true_csi().clone());
            assert_eq!(a.greedy_action(&lattice, &obs).unwrap(), back.greedy_action(&lattice, &obs).unwrap());
            let csi = env_run.true_csi().clone();
            env_run.step(ActionIndex(0), &csi).unwrap();
        }
    }

    fn frozen_batch(b: usize, obs_dim: usize, d: usize, rng: &mut ChaCha8Rng) -> Batch {
        Batch {
            obs: normal_tensor(b, obs_dim, rng),
            actions: Tensor::from_fn(b, d, |_, _| rng.gen()),
            rewards: (0..b).map(|_| rng.gen_range(0.0..2.0)).collect(),
            next_obs: normal_tensor(b, obs_dim, rng),
        }
    }

    #[test]
    fn degenerate_targets_drive_q_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = SacConfig {
            actor_hidden: vec![8],
            critic_hidden: vec![8],
            discount: 0.0,
            temperature: Temperature::Fixed { alpha: 0.0 },
            critic_lr: 1e-2,
            ..SacConfig::default()
        };
        let mut nets = SacNets::init(4, 2, &cfg, &mut rng);
        let mut opt = SacOptimizers::new(&nets, &cfg);
        let mut batch = frozen_batch(32, 4, 2, &mut rng);
        batch.rewards = vec![0.0; 32];
        let first = sac_update(&mut nets, &mut opt, &batch, &cfg, &mut rng).unwrap().critic;
        let mut last = first;
        for _ in 0..300 {
            last = sac_update(&mut nets, &mut opt, &batch, &cfg, &mut rng).unwrap().critic;
        }
        assert!(last < 1e-3 && last < first, "{first} -> {last}");
    }

    #[test]
    fn critic_loss_decreases_on_frozen_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cfg = SacConfig {
            actor_hidden: vec![16],
            critic_hidden: vec![32, 32],
            critic_lr: 1e-3,
            ..SacConfig::default()
        };
        let mut nets = SacNets::init(6, 3, &cfg, &mut rng);
        let mut opt = SacOptimizers::new(&nets, &cfg);
        let batch = frozen_batch(64, 6, 3, &mut rng);
        let trace: Vec<f64> = (0..100).map(|_| sac_update(&mut nets, &mut opt, &batch, &cfg, &mut rng).unwrap().critic).collect();
        let head: f64 = trace[..10].iter().sum();
        let tail: f64 = trace[90..].iter().sum();
        assert!(tail < head, "{head} -> {tail}");
    }

    #[test]
    fn temperature_falls_when_entropy_exceeds_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cfg = SacConfig {
            actor_hidden: vec![8],
            critic_hidden: vec![8],
            ..SacConfig::default()
        };
        let mut nets = SacNets::init(4, 3, &cfg, &mut rng);
        // Unit Gaussian squashed to [0,1]: close to uniform, entropy far above -D.
        nets.log_std = vec![0.0; 3];
        let mut opt = SacOptimizers::new(&nets, &cfg);
        let batch = frozen_batch(32, 4, 3, &mut rng);
        let before = nets.log_alpha;
        let l = sac_update(&mut nets, &mut opt, &batch, &cfg, &mut rng).unwrap();
        assert!(l.entropy > -3.0);
        assert!(nets.log_alpha < before);
    }

    #[test]
    fn actor_gradient_matches_finite_differences() {
        // Fixed noise: the loss is a smooth function of the actor parameters.
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let actor = MlpParams::init(&[3, 4, 2], OutputActivation::Identity, 1.0, &mut rng);
        let critic = MlpParams::init(&[5, 6, 1], OutputActivation::Identity, 1.0, &mut rng);
        let obs = normal_tensor(5, 3, &mut rng);
        let eps = normal_tensor(5, 2, &mut rng);
        let log_std = vec![-0.3, 0.2];
        let loss_of = |a: &MlpParams| -> (f64, Vec<Tensor>) {
            let mut g = Graph::new();
            let av = a.register(&mut g, true);
            let ls = g.constant(Tensor::row(log_std.clone()));
            let ov = g.constant(obs.clone());
            let mean = av.forward(&mut g, ov);
            let (u, logp) = sample_on_graph(&mut g, mean, ls, &eps);
            let ov2 = g.constant(obs.clone());
            let x = g.concat_cols(&[ov2, u]);
            let cv = critic.register(&mut g, false);
            let q = cv.forward(&mut g, x);
            let s = g.scale(logp, 0.3);
            let o = g.sub(s, q);
            let loss = g.mean(o);
            let grads = g.backward(loss);
            let gs = av.param_vars().iter().map(|&v| grads.get_or_zeros(v, g.value(v).shape())).collect();
            (g.value(loss).item(), gs)
        };
        let (_, grads) = loss_of(&actor);
        let h = 1e-6;
        for (pi, grad) in grads.iter().enumerate() {
            for k in 0..grad.len() {
                let mut plus = actor.clone();
                plus.params_mut()[pi][k] += h;
                let mut minus = actor.clone();
                minus.params_mut()[pi][k] -= h;
                let fd = (loss_of(&plus).0 - loss_of(&minus).0) / (2.0 * h);
                let an = grad.data()[k];
                assert!((fd - an).abs() <= 1e-5 * (1.0 + fd.abs()), "param {pi}[{k}]: fd {fd} vs {an}");
            }
        }
    }

    #[test]
    fn plain_and_graph_sampling_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mean = normal_tensor(4, 3, &mut rng);
        let eps = normal_tensor(4, 3, &mut rng);
        let ls = vec![-1.0, 0.0, 0.5];
        let (u, lp) = sample_plain(&mean, &ls, &eps);
        let mut g = Graph::new();
        let mv = g.constant(mean.clone());
        let lv = g.constant(Tensor::row(ls.clone()));
        let (gu, glp) = sample_on_graph(&mut g, mv, lv, &eps);
        for (a, b) in u.data().iter().zip(g.value(gu).data()) {
            assert!((a - b).abs() < 1e-12 && (0.0..=1.0).contains(a));
        }
        for (a, b) in lp.iter().zip(g.value(glp).data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn config_validation() {
        assert!(SacConfig::default().validate().is_ok());
        assert!(SacConfig { batch_size: 10, replay_capacity: 5, ..SacConfig::default() }.validate().is_err());
        assert!(SacConfig { temperature: Temperature::Auto { initial: 0.0 }, ..SacConfig::default() }.validate().is_err());
    }
}
