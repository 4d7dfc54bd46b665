//! Grey-box CSI falsification attacks on a trained Wolpertinger scheduler.
//!
//! Adversarial users control their own observation block `o_adv`. The victims'
//! blocks are only known to lie within `μ ± δ_vic σ` of the agent's observation
//! normaliser. [`fggm`] minimises a sound polytope upper bound on the critic
//! over every proto action of a victim-containing action that the actor can
//! still reach; [`spgd`] replaces the bound by a maximum over sampled victim
//! observations; [`noise_attack`] reports random CSI.
//!
//! Optimisation happens in normalised observation units, where the clip box is
//! `±δ_adv σ / max(σ, ε_σ)` around zero.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{decode_action, ActionIndex, EnvConfig, NormalizerState, ProtoLattice, STD_EPS};
use crate::error::{Error, Result};
use crate::ndiff::{AdamConfig, AdamState, Graph, MlpParams, Tensor};
use crate::polytope::{bound_network, propagate_bounds, upper_bound_value_and_gradient, BoundOptions, BoxBounds};

/// Tolerance for lattice points on the boundary of the actor's output box.
pub const REACH_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackScheme {
    None,
    Fggm,
    Spgd,
    Noise,
}

impl AttackScheme {
    pub fn name(self) -> &'static str {
        match self {
            AttackScheme::None => "none",
            AttackScheme::Fggm => "fggm",
            AttackScheme::Spgd => "spgd",
            AttackScheme::Noise => "noise",
        }
    }
}

impl std::str::FromStr for AttackScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(AttackScheme::None),
            "fggm" => Ok(AttackScheme::Fggm),
            "spgd" => Ok(AttackScheme::Spgd),
            "noise" => Ok(AttackScheme::Noise),
            _ => Err(Error::Config(format!("unknown attack scheme {s:?} (expected none, fggm, spgd or noise)"))),
        }
    }
}

impl std::fmt::Display for AttackScheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    /// `max_i q̄_i`
    Max,
    /// `Σ_i q̄_i`, for ablations.
    Sum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThreatModel {
    pub num_users: usize,
    pub num_antennas: usize,
    pub adversaries: Vec<usize>,
    pub victims: Vec<usize>,
    pub delta_adv: f64,
    pub delta_vic: f64,
    pub normalizer: NormalizerState,
    /// Adversaries also control their `γ` and `R` entries.
    pub falsify_stats: bool,
}

impl ThreatModel {
    pub fn new(env: &EnvConfig, adversaries: Vec<usize>, delta_adv: f64, delta_vic: f64, normalizer: NormalizerState) -> Result<Self> {
        let mut adversaries = adversaries;
        adversaries.sort_unstable();
        adversaries.dedup();
        let victims: Vec<usize> = (0..env.num_users).filter(|u| !adversaries.contains(u)).collect();
        let t = Self {
            num_users: env.num_users,
            num_antennas: env.num_antennas,
            adversaries,
            victims,
            delta_adv,
            delta_vic,
            normalizer,
            falsify_stats: false,
        };
        t.validate()?;
        Ok(t)
    }

    /// The first `num_adversaries` users attack, the rest are victims.
    pub fn first_adversaries(env: &EnvConfig, num_adversaries: usize, delta_adv: f64, delta_vic: f64, normalizer: NormalizerState) -> Result<Self> {
        Self::new(env, (0..num_adversaries).collect(), delta_adv, delta_vic, normalizer)
    }

    pub fn validate(&self) -> Result<()> {
        if self.adversaries.iter().any(|&u| u >= self.num_users) {
            return Err(Error::Config("adversary index out of range".into()));
        }
        if !(self.delta_adv >= 0.0 && self.delta_vic >= 0.0) {
            return Err(Error::Config("attack deltas must be non-negative".into()));
        }
        if self.normalizer.dim() != self.obs_dim() {
            return Err(Error::Shape(format!(
                "normaliser has {} dims, observation has {}",
                self.normalizer.dim(),
                self.obs_dim()
            )));
        }
        if self.normalizer.count < 2 {
            return Err(Error::Contract("threat model needs a normaliser fed with at least two observations".into()));
        }
        Ok(())
    }

    pub fn block_len(&self) -> usize {
        2 + 2 * self.num_antennas
    }

    pub fn obs_dim(&self) -> usize {
        self.num_users * self.block_len()
    }

    pub fn adv_len(&self) -> usize {
        self.adversaries.len() * self.block_len()
    }

    /// Observation index of position `i` of `o_adv`.
    pub fn adv_obs_dim(&self, i: usize) -> usize {
        let b = self.block_len();
        self.adversaries[i / b] * b + i % b
    }

    /// Positions within `o_adv` the attacker optimises.
    pub fn controlled(&self) -> Vec<usize> {
        (0..self.adv_len()).filter(|i| self.falsify_stats || i % self.block_len() >= 2).collect()
    }

    fn scales(&self) -> Vec<f64> {
        self.normalizer.std().iter().map(|s| s / s.max(STD_EPS)).collect()
    }

    /// Mean adversary block in raw units.
    pub fn adv_mean(&self) -> Vec<f64> {
        (0..self.adv_len()).map(|i| self.normalizer.mean[self.adv_obs_dim(i)]).collect()
    }

    /// Raw-unit clip box of `o_adv`; uncontrolled dims are pinned at the mean.
    pub fn adv_clip_box(&self) -> BoxBounds {
        let std = self.normalizer.std();
        let ctrl = self.controlled();
        let (lo, hi) = (0..self.adv_len())
            .map(|i| {
                let d = self.adv_obs_dim(i);
                let m = self.normalizer.mean[d];
                let w = if ctrl.contains(&i) { self.delta_adv * std[d] } else { 0.0 };
                (m - w, m + w)
            })
            .unzip();
        BoxBounds::new(lo, hi).expect("non-negative delta")
    }

    fn denormalize_adv(&self, z: &[f64]) -> Vec<f64> {
        let std = self.normalizer.std();
        z.iter()
            .enumerate()
            .map(|(i, x)| {
                let d = self.adv_obs_dim(i);
                self.normalizer.mean[d] + x * std[d].max(STD_EPS)
            })
            .collect()
    }

    /// Normalised observation box: `o_adv` (normalised) is concrete, victims
    /// span `±δ_vic` normaliser standard deviations.
    pub fn normalized_box(&self, adv_norm: &[f64]) -> BoxBounds {
        let scales = self.scales();
        let b = self.block_len();
        let mut lo = vec![0.0; self.obs_dim()];
        let mut hi = vec![0.0; self.obs_dim()];
        for (i, z) in adv_norm.iter().enumerate() {
            let d = self.adv_obs_dim(i);
            lo[d] = *z;
            hi[d] = *z;
        }
        for &v in &self.victims {
            for d in v * b..(v + 1) * b {
                lo[d] = -self.delta_vic * scales[d];
                hi[d] = self.delta_vic * scales[d];
            }
        }
        BoxBounds::new(lo, hi).expect("non-negative delta")
    }
}

/// Raw-unit observation box: adversary dims equal `o_adv`, victim dims span
/// `μ ± δ_vic σ`, in environment observation order.
pub fn build_attack_box(threat: &ThreatModel, o_adv: &[f64]) -> Result<BoxBounds> {
    if o_adv.len() != threat.adv_len() {
        return Err(Error::Shape(format!("o_adv has {} entries, adversary blocks need {}", o_adv.len(), threat.adv_len())));
    }
    let std = threat.normalizer.std();
    let b = threat.block_len();
    let mut lo = threat.normalizer.mean.clone();
    let mut hi = lo.clone();
    for (i, x) in o_adv.iter().enumerate() {
        let d = threat.adv_obs_dim(i);
        lo[d] = *x;
        hi[d] = *x;
    }
    for &v in &threat.victims {
        for d in v * b..(v + 1) * b {
            lo[d] -= threat.delta_vic * std[d];
            hi[d] += threat.delta_vic * std[d];
        }
    }
    BoxBounds::new(lo, hi)
}

/// Actions whose user set contains at least one victim.
pub fn victim_actions(num_users: usize, max_selected: usize, victims: &[usize]) -> Result<Vec<ActionIndex>> {
    if victims.is_empty() {
        return Err(Error::Contract("victim set must be non-empty".into()));
    }
    let n = crate::env::action_count(num_users, max_selected);
    let mut out = Vec::new();
    for a in 0..n {
        if decode_action(ActionIndex(a), num_users, max_selected)?.members().iter().any(|u| victims.contains(u)) {
            out.push(ActionIndex(a));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reachable {
    pub actions: Vec<ActionIndex>,
    /// No victim lattice point was inside the actor's output box.
    pub fallback: bool,
}

/// Victim actions whose lattice point lies inside `[u_lo, u_hi]`, or all of
/// them if none does.
pub fn protos_in_box(lattice: &ProtoLattice, u_lo: &[f64], u_hi: &[f64], candidates: &[ActionIndex]) -> Reachable {
    let inside: Vec<ActionIndex> = candidates
        .iter()
        .copied()
        .filter(|&a| {
            lattice
                .point(a)
                .iter()
                .zip(u_lo.iter().zip(u_hi))
                .all(|(p, (l, h))| *p >= l - REACH_TOL && *p <= h + REACH_TOL)
        })
        .collect();
    if inside.is_empty() {
        Reachable {
            actions: candidates.to_vec(),
            fallback: true,
        }
    } else {
        Reachable {
            actions: inside,
            fallback: false,
        }
    }
}

/// Bounds the greedy actor (sigmoid-output view) over `obs_box` and keeps the
/// victim lattice points it can reach.
pub fn reachable_victim_protos(actor: &MlpParams, obs_box: &BoxBounds, lattice: &ProtoLattice, victim_set: &[ActionIndex]) -> Result<Reachable> {
    let r = propagate_bounds(actor, obs_box)?;
    Ok(protos_in_box(lattice, &r.lower, &r.upper, victim_set))
}

/// Trained networks under attack, in normalised observation units.
#[derive(Debug, Clone, Copy)]
pub struct Target<'a> {
    /// Deterministic actor with a sigmoid output in `[0,1]^D`.
    pub actor: &'a MlpParams,
    pub critic: &'a MlpParams,
    pub lattice: &'a ProtoLattice,
    pub max_selected: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackParams {
    pub restarts: usize,
    pub iterations: usize,
    pub step_size: f64,
    pub samples: usize,
    pub aggregation: Aggregation,
    pub seed: u64,
}

impl Default for AttackParams {
    fn default() -> Self {
        Self {
            restarts: 10,
            iterations: 300,
            step_size: 0.05,
            samples: 100,
            aggregation: Aggregation::Max,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackResult {
    pub scheme: AttackScheme,
    /// Adversary observation blocks in raw units.
    pub o_adv: Vec<f64>,
    pub o_adv_normalized: Vec<f64>,
    /// Undefined (`null` in JSON) for noise.
    #[serde(deserialize_with = "null_as_nan")]
    pub objective: f64,
    pub best_restart: usize,
    /// Best-so-far objective per restart and iteration (entry 0 is the
    /// initial point).
    pub traces: Vec<Vec<f64>>,
    /// Victim actions targeted at the returned point.
    pub attacked_actions: Vec<usize>,
    pub fallback: bool,
    /// Not serialised so reports stay byte-reproducible.
    #[serde(skip)]
    pub wall_time_s: f64,
}

fn null_as_nan<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
}

impl AttackResult {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Format(format!("attack result: {e}")))
    }
}

fn check_target(target: &Target, threat: &ThreatModel) -> Result<()> {
    threat.validate()?;
    let d = target.lattice.dims();
    if target.actor.in_dim() != threat.obs_dim() || target.actor.out_dim() != d || target.critic.in_dim() != threat.obs_dim() + d || target.critic.out_dim() != 1 {
        return Err(Error::Shape("networks do not match the threat model's observation layout".into()));
    }
    if threat.victims.is_empty() {
        return Err(Error::Contract("no victim actions: every user is an adversary".into()));
    }
    Ok(())
}

fn critic_box(obs_box: &BoxBounds, point: &[f64]) -> BoxBounds {
    obs_box.concat(&BoxBounds::point(point.to_vec()))
}

/// Upper bounds `q̄_a` of the critic over the box for each action's proto.
pub fn critic_upper_bounds(critic: &MlpParams, obs_box: &BoxBounds, lattice: &ProtoLattice, actions: &[ActionIndex]) -> Result<Vec<f64>> {
    actions
        .iter()
        .map(|&a| {
            let bx = critic_box(obs_box, lattice.point(a));
            let mut g = Graph::new();
            let mid = g.constant(Tensor::row(bx.mid()));
            let bv = bound_network(&mut g, critic, mid, &bx.radius(), BoundOptions::default())?;
            Ok(g.value(bv.upper).item())
        })
        .collect()
}

struct Objective {
    value: f64,
    /// Gradient over the controlled dims (normalised units).
    grad: Vec<f64>,
    actions: Vec<ActionIndex>,
    fallback: bool,
}

fn fggm_objective(target: &Target, threat: &ThreatModel, victim_set: &[ActionIndex], adv: &[f64], agg: Aggregation, with_grad: bool) -> Result<Objective> {
    let obs_box = threat.normalized_box(adv);
    let reach = reachable_victim_protos(target.actor, &obs_box, target.lattice, victim_set)?;
    let q = critic_upper_bounds(target.critic, &obs_box, target.lattice, &reach.actions)?;
    let (value, chosen): (f64, Vec<usize>) = match agg {
        Aggregation::Max => {
            let (i, v) = q.iter().enumerate().fold((0, f64::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b });
            (v, vec![i])
        }
        Aggregation::Sum => (q.iter().sum(), (0..q.len()).collect()),
    };
    let ctrl = threat.controlled();
    let mut grad = vec![0.0; ctrl.len()];
    if with_grad {
        let dims: Vec<usize> = ctrl.iter().map(|&i| threat.adv_obs_dim(i)).collect();
        for i in chosen {
            let bx = critic_box(&obs_box, target.lattice.point(reach.actions[i]));
            let (_, g, _) = upper_bound_value_and_gradient(target.critic, &bx, &dims, 0, BoundOptions::default())?;
            grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
    }
    Ok(Objective {
        value,
        grad,
        actions: reach.actions,
        fallback: reach.fallback,
    })
}

/// Shared restart / Adam / clip loop: `objective(adv_norm, with_grad,
/// restart, rng)`.
fn optimise(
    threat: &ThreatModel,
    params: &AttackParams,
    scheme: AttackScheme,
    mut objective: impl FnMut(&[f64], bool, usize, &mut ChaCha8Rng) -> Result<Objective>,
) -> Result<AttackResult> {
    let start = Instant::now();
    let ctrl = threat.controlled();
    let scales = threat.scales();
    let bound: Vec<f64> = ctrl.iter().map(|&i| threat.delta_adv * scales[threat.adv_obs_dim(i)]).collect();
    let mut best: Option<(f64, usize, Vec<f64>, Vec<ActionIndex>, bool)> = None;
    let mut traces = Vec::with_capacity(params.restarts.max(1));
    for restart in 0..params.restarts.max(1) {
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed.wrapping_add(restart as u64));
        let mut adv = vec![0.0; threat.adv_len()];
        for (k, &i) in ctrl.iter().enumerate() {
            adv[i] = if bound[k] > 0.0 { rng.gen_range(-bound[k]..=bound[k]) } else { 0.0 };
        }
        let mut adam = AdamState::new(AdamConfig::with_lr(params.step_size), &[ctrl.len()]);
        let mut obj = objective(&adv, params.iterations > 0, restart, &mut rng)?;
        let mut run_best = (obj.value, adv.clone(), obj.actions.clone(), obj.fallback);
        let mut trace = vec![obj.value];
        for it in 0..params.iterations {
            let mut x: Vec<f64> = ctrl.iter().map(|&i| adv[i]).collect();
            adam.update(&mut [&mut x], &[&obj.grad])?;
            for (k, &i) in ctrl.iter().enumerate() {
                adv[i] = x[k].clamp(-bound[k], bound[k]);
            }
            obj = objective(&adv, it + 1 < params.iterations, restart, &mut rng)?;
            if obj.value < run_best.0 {
                run_best = (obj.value, adv.clone(), obj.actions.clone(), obj.fallback);
            }
            trace.push(run_best.0);
        }
        traces.push(trace);
        if best.as_ref().map_or(true, |b| run_best.0 < b.0) {
            best = Some((run_best.0, restart, run_best.1, run_best.2, run_best.3));
        }
    }
    let (objective_value, best_restart, adv, actions, fallback) = best.expect("at least one restart");
    Ok(AttackResult {
        scheme,
        o_adv: threat.denormalize_adv(&adv),
        o_adv_normalized: adv,
        objective: objective_value,
        best_restart,
        traces,
        attacked_actions: actions.iter().map(|a| a.0).collect(),
        fallback,
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

/// Bound-minimising gradient attack.
pub fn fggm(target: &Target, threat: &ThreatModel, params: &AttackParams) -> Result<AttackResult> {
    check_target(target, threat)?;
    let victim_set = victim_actions(threat.num_users, target.max_selected, &threat.victims)?;
    optimise(threat, params, AttackScheme::Fggm, |adv, with_grad, _, _| {
        fggm_objective(target, threat, &victim_set, adv, params.aggregation, with_grad)
    })
}

/// Samples `n` victim observations (normalised) uniformly from the box.
fn sample_victims(threat: &ThreatModel, n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let obs_box = threat.normalized_box(&vec![0.0; threat.adv_len()]);
    (0..n)
        .map(|_| {
            obs_box
                .lower()
                .iter()
                .zip(obs_box.upper())
                .map(|(l, h)| if l < h { rng.gen_range(*l..=*h) } else { *l })
                .collect()
        })
        .collect()
}

/// Sampling-based baseline: maximises the exact critic over sampled victim
/// observations instead of bounding it.
pub fn spgd(target: &Target, threat: &ThreatModel, params: &AttackParams) -> Result<AttackResult> {
    check_target(target, threat)?;
    if params.samples == 0 {
        return Err(Error::Contract("spgd needs at least one sample".into()));
    }
    let victim_set = victim_actions(threat.num_users, target.max_selected, &threat.victims)?;
    let ctrl = threat.controlled();
    let adv_dims: Vec<usize> = (0..threat.adv_len()).map(|i| threat.adv_obs_dim(i)).collect();
    let mut samples: Option<(usize, Vec<Vec<f64>>)> = None;
    optimise(threat, params, AttackScheme::Spgd, |adv, with_grad, restart, rng| {
        // One sample set per restart, drawn right after initialisation.
        if samples.as_ref().map_or(true, |(r, _)| *r != restart) {
            samples = Some((restart, sample_victims(threat, params.samples, rng)));
        }
        let set = &samples.as_ref().unwrap().1;
        let obs: Vec<Vec<f64>> = set
            .iter()
            .map(|s| {
                let mut o = s.clone();
                for (i, &d) in adv_dims.iter().enumerate() {
                    o[d] = adv[i];
                }
                o
            })
            .collect();
        let obs_t = Tensor::from_rows(&obs);
        let u = target.actor.forward_batch(&obs_t);
        let d = u.cols();
        let u_lo: Vec<f64> = (0..d).map(|j| (0..u.rows()).map(|i| u.get(i, j)).fold(f64::INFINITY, f64::min)).collect();
        let u_hi: Vec<f64> = (0..d).map(|j| (0..u.rows()).map(|i| u.get(i, j)).fold(f64::NEG_INFINITY, f64::max)).collect();
        let reach = protos_in_box(target.lattice, &u_lo, &u_hi, &victim_set);
        let rows: Vec<Vec<f64>> = obs
            .iter()
            .flat_map(|o| reach.actions.iter().map(move |&a| (o, a)))
            .map(|(o, a)| [o.as_slice(), target.lattice.point(a)].concat())
            .collect();
        let q = target.critic.forward_batch(&Tensor::from_rows(&rows));
        let (best_row, value) = q.data().iter().enumerate().fold((0, f64::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b });
        let mut grad = vec![0.0; ctrl.len()];
        if with_grad {
            let mut g = Graph::new();
            let xc = g.input(Tensor::row(ctrl.iter().map(|&i| adv[i]).collect()));
            let dims: Vec<usize> = ctrl.iter().map(|&i| adv_dims[i]).collect();
            let x = crate::polytope::embed_concrete(&mut g, xc, &dims, &rows[best_row]);
            let cv = target.critic.register(&mut g, false);
            let qv = cv.forward(&mut g, x);
            let grads = g.backward(qv);
            grad = grads.get_or_zeros(xc, (1, ctrl.len())).into_vec();
        }
        Ok(Objective {
            value,
            grad,
            actions: reach.actions,
            fallback: reach.fallback,
        })
    })
}

/// Fresh uniform CSI in `μ ± δ_adv σ` for every adversary; `γ` and `R`
/// entries are left at the mean (they are reported truthfully downstream).
pub fn noise_attack(threat: &ThreatModel, slot_seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(slot_seed);
    let clip = threat.adv_clip_box();
    clip.lower()
        .iter()
        .zip(clip.upper())
        .map(|(l, h)| if l < h { rng.gen_range(*l..=*h) } else { *l })
        .collect()
}

/// A single [`noise_attack`] draw packaged like the optimised attacks.
pub fn noise_result(threat: &ThreatModel, seed: u64) -> Result<AttackResult> {
    threat.validate()?;
    let start = Instant::now();
    let o_adv = noise_attack(threat, seed);
    let std = threat.normalizer.std();
    let o_adv_normalized = o_adv
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let d = threat.adv_obs_dim(i);
            (x - threat.normalizer.mean[d]) / std[d].max(STD_EPS)
        })
        .collect();
    Ok(AttackResult {
        scheme: AttackScheme::Noise,
        o_adv,
        o_adv_normalized,
        objective: f64::NAN,
        best_restart: 0,
        traces: Vec::new(),
        attacked_actions: Vec::new(),
        fallback: false,
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndiff::{forward_mlp, Layer, OutputActivation};

    fn env4() -> EnvConfig {
        EnvConfig {
            num_users: 4,
            num_antennas: 2,
            max_selected: 2,
            knn_k: 3,
            ..EnvConfig::default()
        }
    }

    fn fitted_normalizer(env: &EnvConfig, seed: u64) -> NormalizerState {
        let mut n = NormalizerState::new(env.obs_dim());
        let mut e = crate::env::Environment::new(env.clone(), seed).unwrap();
        for t in 0..200 {
            let h = e.true_csi().clone();
            n.update(&e.observe(&h));
            e.step(ActionIndex(t % env.action_count()), &h).unwrap();
        }
        n
    }

    fn nets(env: &EnvConfig, seed: u64) -> (MlpParams, MlpParams) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = env.proto_dims;
        let mut actor = MlpParams::init(&[env.obs_dim(), 16, d], OutputActivation::Sigmoid, 1.0, &mut rng);
        let mut critic = MlpParams::init(&[env.obs_dim() + d, 16, 16, 1], OutputActivation::Identity, 1.0, &mut rng);
        for l in actor.layers.iter_mut().chain(critic.layers.iter_mut()) {
            l.bias.iter_mut().for_each(|b| *b = rng.gen_range(-0.3..0.3));
        }
        (actor, critic)
    }

    #[test]
    fn victim_action_enumeration() {
        let acts = victim_actions(4, 2, &[3]).unwrap();
        let sets: Vec<Vec<usize>> = acts.iter().map(|&a| decode_action(a, 4, 2).unwrap().members().to_vec()).collect();
        assert_eq!(sets, vec![vec![3], vec![0, 3], vec![1, 3], vec![2, 3]]);
        assert_eq!(victim_actions(8, 4, &(0..8).collect::<Vec<_>>()).unwrap().len(), 162);
        assert!(victim_actions(4, 2, &[]).is_err());
    }

    #[test]
    fn reachable_set_membership() {
        let lattice = ProtoLattice::new(216, 3);
        let all: Vec<ActionIndex> = (0..216).map(ActionIndex).collect();
        let r = protos_in_box(&lattice, &[0.4; 3], &[0.6; 3], &all);
        assert!(!r.fallback);
        assert_eq!(r.actions.len(), 8);
        for a in &r.actions {
            assert!(lattice.point(*a).iter().all(|&c| (c - 0.4).abs() < 1e-9 || (c - 0.6).abs() < 1e-9));
        }
        let full = protos_in_box(&lattice, &[0.0; 3], &[1.0; 3], &all);
        assert_eq!(full.actions.len(), 216);
        let point = protos_in_box(&lattice, &[0.5; 3], &[0.5; 3], &all);
        assert!(point.fallback && point.actions.len() == 216);
        let exact = protos_in_box(&lattice, &[0.2, 0.4, 0.6], &[0.2, 0.4, 0.6], &all);
        assert_eq!(exact.actions.len(), 1);
    }

    #[test]
    fn attack_box_layout() {
        let env = env4();
        let norm = fitted_normalizer(&env, 1);
        let t = ThreatModel::first_adversaries(&env, 1, 2.0, 0.0, norm.clone()).unwrap();
        let o: Vec<f64> = (0..t.adv_len()).map(|i| i as f64).collect();
        let bx = build_attack_box(&t, &o).unwrap();
        assert_eq!(&bx.lower()[..6], o.as_slice());
        assert_eq!(bx.lower(), bx.upper());
        assert_eq!(&bx.lower()[6..], &norm.mean[6..]);
        let all = ThreatModel::first_adversaries(&env, 3, 2.0, 1.0, norm.clone()).unwrap();
        let bx = build_attack_box(&all, &vec![0.5; all.adv_len()]).unwrap();
        assert!(bx.lower()[..18].iter().zip(&bx.upper()[..18]).all(|(l, h)| l == h));
        assert!(bx.lower()[18..].iter().zip(&bx.upper()[18..]).any(|(l, h)| l < h));
        assert!(build_attack_box(&all, &[0.0]).is_err());
    }

    #[test]
    fn zero_delta_adv_cannot_move() {
        let env = env4();
        let (actor, critic) = nets(&env, 2);
        let lattice = env.lattice();
        let target = Target { actor: &actor, critic: &critic, lattice: &lattice, max_selected: env.max_selected };
        let t = ThreatModel::first_adversaries(&env, 2, 0.0, 1.0, fitted_normalizer(&env, 2)).unwrap();
        let r = fggm(&target, &t, &AttackParams { restarts: 2, iterations: 5, ..AttackParams::default() }).unwrap();
        assert_eq!(r.o_adv, t.adv_mean());
        assert!(r.traces.iter().all(|tr| tr.iter().all(|&v| v == tr[0])));
    }

    #[test]
    fn fggm_stays_in_clip_box_and_never_worsens() {
        let env = env4();
        let (actor, critic) = nets(&env, 3);
        let lattice = env.lattice();
        let target = Target { actor: &actor, critic: &critic, lattice: &lattice, max_selected: env.max_selected };
        let t = ThreatModel::first_adversaries(&env, 2, 2.0, 1.5, fitted_normalizer(&env, 3)).unwrap();
        let params = AttackParams { restarts: 2, iterations: 25, seed: 4, ..AttackParams::default() };
        let r = fggm(&target, &t, &params).unwrap();
        let clip = t.adv_clip_box();
        for (i, x) in r.o_adv.iter().enumerate() {
            assert!(*x >= clip.lower()[i] - 1e-9 && *x <= clip.upper()[i] + 1e-9);
        }
        for tr in &r.traces {
            assert!(tr.windows(2).all(|w| w[1] <= w[0]));
        }
        assert!(r.traces[r.best_restart].last().unwrap() < &r.traces[r.best_restart][0]);
        assert_eq!(fggm(&target, &t, &params).unwrap().to_json().unwrap(), r.to_json().unwrap());

        // The objective bounds the critic over sampled victims.
        let obs_box = t.normalized_box(&r.o_adv_normalized);
        let acts: Vec<ActionIndex> = r.attacked_actions.iter().map(|&a| ActionIndex(a)).collect();
        let q = critic_upper_bounds(&critic, &obs_box, &lattice, &acts).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let x: Vec<f64> = obs_box.lower().iter().zip(obs_box.upper()).map(|(l, h)| if l < h { rng.gen_range(*l..=*h) } else { *l }).collect();
            for (a, qb) in acts.iter().zip(&q) {
                let v = forward_mlp(&critic, &[x.as_slice(), lattice.point(*a)].concat()).unwrap()[0];
                assert!(v <= qb + 1e-7);
            }
        }
    }

    #[test]
    fn spgd_single_sample_zero_width_matches_exact_q() {
        let env = env4();
        let (actor, critic) = nets(&env, 6);
        let lattice = env.lattice();
        let target = Target { actor: &actor, critic: &critic, lattice: &lattice, max_selected: env.max_selected };
        let t = ThreatModel::first_adversaries(&env, 2, 1.0, 0.0, fitted_normalizer(&env, 6)).unwrap();
        let r = spgd(&target, &t, &AttackParams { restarts: 1, iterations: 0, samples: 1, seed: 2, ..AttackParams::default() }).unwrap();
        let obs_box = t.normalized_box(&r.o_adv_normalized);
        let x = obs_box.lower().to_vec();
        let exact = r
            .attacked_actions
            .iter()
            .map(|&a| forward_mlp(&critic, &[x.as_slice(), lattice.point(ActionIndex(a))].concat()).unwrap()[0])
            .fold(f64::NEG_INFINITY, f64::max);
        assert!((r.objective - exact).abs() < 1e-12);
        let r = spgd(&target, &t, &AttackParams { restarts: 2, iterations: 20, samples: 10, seed: 2, ..AttackParams::default() }).unwrap();
        for tr in &r.traces {
            assert!(tr.windows(2).all(|w| w[1] <= w[0]));
        }
    }

    #[test]
    fn noise_draws_vary_and_stay_inside() {
        let env = env4();
        let t = ThreatModel::first_adversaries(&env, 2, 2.0, 1.0, fitted_normalizer(&env, 7)).unwrap();
        let clip = t.adv_clip_box();
        let (a, b) = (noise_attack(&t, 1), noise_attack(&t, 2));
        assert_ne!(a, b);
        assert!(clip.contains(&a) && clip.contains(&b));
        let n = 10_000;
        let mut mean = vec![0.0; t.adv_len()];
        for s in 0..n {
            noise_attack(&t, 100 + s).iter().zip(mean.iter_mut()).for_each(|(x, m)| *m += x / n as f64);
        }
        let std = t.normalizer.std();
        for (i, m) in mean.iter().enumerate() {
            let d = t.adv_obs_dim(i);
            let half = clip.upper()[i] - t.normalizer.mean[d];
            // uniform on ±half: std half/√3
            let se = half / 3f64.sqrt() / (n as f64).sqrt();
            assert!((m - t.normalizer.mean[d]).abs() <= 3.0 * se + 1e-12, "dim {i}: {m} vs {} (σ {})", t.normalizer.mean[d], std[d]);
        }
    }

    #[test]
    fn box_contains_in_range_victims() {
        let env = env4();
        let norm = fitted_normalizer(&env, 8);
        let t = ThreatModel::first_adversaries(&env, 2, 2.0, 1.5, norm.clone()).unwrap();
        let bx = build_attack_box(&t, &t.adv_mean()).unwrap();
        let std = norm.std();
        let mut e = crate::env::Environment::new(env.clone(), 99).unwrap();
        let mut checked = 0;
        for _ in 0..100 {
            let h = e.true_csi().clone();
            let mut o = e.observe(&h);
            let within = (0..o.len()).filter(|d| t.victims.contains(&(d / t.block_len()))).all(|d| (o[d] - norm.mean[d]).abs() <= 1.5 * std[d]);
            for i in 0..t.adv_len() {
                o[t.adv_obs_dim(i)] = t.adv_mean()[i];
            }
            if within {
                checked += 1;
                assert!(bx.contains(&o));
            }
            e.step(ActionIndex(0), &h).unwrap();
        }
        let _ = checked;
    }

    #[test]
    fn noise_result_roundtrips_through_json() {
        let env = env4();
        let t = ThreatModel::first_adversaries(&env, 2, 1.0, 1.0, fitted_normalizer(&env, 1)).unwrap();
        let r = noise_result(&t, 9).unwrap();
        assert_eq!(r.o_adv, noise_attack(&t, 9));
        let back = AttackResult::from_json(&r.to_json().unwrap()).unwrap();
        assert!(back.objective.is_nan());
        assert_eq!(back.o_adv, r.o_adv);
        assert_eq!(t.normalized_box(&back.o_adv_normalized).len(), t.obs_dim());
    }

    #[test]
    fn constant_actor_off_lattice_falls_back() {
        // sigmoid(0) = 0.5 in every dim: the n = 3 lattice point (0.5, 0.5, 0.5)
        // is index 13, past the 10 assigned actions, so nothing is reachable.
        let env = env4();
        let lattice = env.lattice();
        let d = env.proto_dims;
        let actor = MlpParams::new(
            vec![Layer { weight: Tensor::zeros(d, env.obs_dim()), bias: vec![0.0; d] }],
            OutputActivation::Sigmoid,
        )
        .unwrap();
        let bx = BoxBounds::new(vec![-1.0; env.obs_dim()], vec![1.0; env.obs_dim()]).unwrap();
        let all: Vec<ActionIndex> = (0..lattice.action_count()).map(ActionIndex).collect();
        let r = reachable_victim_protos(&actor, &bx, &lattice, &all).unwrap();
        assert_eq!(lattice.points_per_dim(), 3);
        assert!(r.fallback);
        assert_eq!(r.actions, all);
    }
}
