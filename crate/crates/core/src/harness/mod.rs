//! Experiment orchestration: seeded evaluation runs under a scheduler and an
//! attack scheme, metrics, parameter sweeps and report files.
//!
//! A run writes `metrics.csv` (one row per slot), `summary.csv` (aggregates,
//! `metric,value`) and, when attacked, `attack.json`.

pub mod config;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

pub use config::{ExperimentConfig, TrainConfig};

use crate::attack::{fggm, noise_attack, noise_result, spgd, AttackResult, AttackScheme, Target, ThreatModel};
use crate::channel::ComplexMatrix;
use crate::env::{csi_from_block, pf_score, Environment};
use crate::error::{Error, Result};
use crate::sac::Checkpoint;
use crate::schedulers::{opt_mr, opt_pf, opt_pf_ug, random_policy, sac_policy, PolicyKind};

/// Overrides the output directory of `eval` and `sweep`.
pub const OUTPUT_DIR_ENV: &str = "MUMIMO_LAB_OUT";

/// Output directory: the environment override wins over the configuration.
pub fn resolve_output_dir(configured: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_DIR_ENV) {
        Some(d) if !d.is_empty() => PathBuf::from(d),
        _ => configured.to_path_buf(),
    }
}

/// Independent stream `stream`, item `index` of a run seed.
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    // splitmix64 finaliser over a mixed key
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STREAM_CHANNEL: u64 = 1;
const STREAM_POLICY: u64 = 2;
const STREAM_ATTACK: u64 = 3;
const STREAM_NOISE: u64 = 4;

/// `(Σ R)² / (L Σ R²)`.
pub fn jfi(rates: &[f64]) -> Result<f64> {
    let sum: f64 = rates.iter().sum();
    let sq: f64 = rates.iter().map(|r| r * r).sum();
    if rates.is_empty() || sq == 0.0 {
        return Err(Error::UndefinedMetric("Jain fairness of an all-zero rate vector".into()));
    }
    Ok(sum * sum / (rates.len() as f64 * sq))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SlotRecord {
    pub block: usize,
    pub slot: usize,
    pub selected: Vec<usize>,
    /// Instantaneous rates on the true channel; zero for unscheduled users.
    pub rates: Vec<f64>,
    /// Average rates before this slot's update.
    pub avg_rates: Vec<f64>,
    pub pf_score: f64,
    /// Fairness of the updated average rates, diagnostics only.
    pub jfi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub mean_pf_score: f64,
    /// Fairness of the average rates after the last slot, mean over blocks.
    pub final_jfi: f64,
    pub selection_probability: Vec<f64>,
    pub mean_rate: Vec<f64>,
    pub victim_mean_selection: f64,
    pub victim_min_selection: f64,
    pub victim_mean_rate: f64,
    pub victim_min_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttackReport {
    pub scheme: AttackScheme,
    pub adversaries: Vec<usize>,
    pub victims: Vec<usize>,
    pub delta_adv: f64,
    pub delta_vic: f64,
    /// Optimised attacks only; noise is redrawn every slot.
    pub result: Option<AttackResult>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub num_users: usize,
    pub victims: Vec<usize>,
    pub slots: Vec<SlotRecord>,
    pub summary: Summary,
    pub attack: Option<AttackReport>,
}

/// Loads the checkpoint a configuration names, if it needs one.
pub fn load_checkpoint(config: &ExperimentConfig) -> Result<Option<Checkpoint>> {
    match (&config.checkpoint, config.needs_checkpoint()) {
        (Some(p), true) => Ok(Some(Checkpoint::load(p)?)),
        _ => Ok(None),
    }
}

fn check_consistent(config: &ExperimentConfig, ck: &Checkpoint) -> Result<()> {
    let (a, b) = (&config.env, &ck.env);
    if (a.num_users, a.num_antennas, a.max_selected, a.proto_dims) != (b.num_users, b.num_antennas, b.max_selected, b.proto_dims) {
        return Err(Error::Config(format!(
            "experiment has L={}, M={}, N̄={}, D={} but the checkpoint was trained with L={}, M={}, N̄={}, D={}",
            a.num_users, a.num_antennas, a.max_selected, a.proto_dims, b.num_users, b.num_antennas, b.max_selected, b.proto_dims
        )));
    }
    Ok(())
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<MetricsReport> {
    config.validate()?;
    let ck = load_checkpoint(config)?;
    run_experiment_with(config, ck.as_ref())
}

/// Same as [`run_experiment`] with an already loaded checkpoint.
pub fn run_experiment_with(config: &ExperimentConfig, checkpoint: Option<&Checkpoint>) -> Result<MetricsReport> {
    config.validate()?;
    let ck = match (config.needs_checkpoint(), checkpoint) {
        (true, Some(ck)) => {
            check_consistent(config, ck)?;
            Some(ck)
        }
        (true, None) => return Err(Error::Config("this experiment needs a loaded checkpoint".into())),
        (false, _) => None,
    };
    let env_cfg = &config.env;
    let threat = match (config.attack, ck) {
        (AttackScheme::None, _) | (_, None) => None,
        (_, Some(ck)) => {
            let mut t = ThreatModel::first_adversaries(env_cfg, config.num_adversaries, config.delta_adv, config.delta_vic, ck.normalizer.clone())?;
            t.falsify_stats = config.falsify_stats;
            Some(t)
        }
    };
    let attack = match (&threat, ck) {
        (Some(t), Some(ck)) => Some(precompute_attack(config, t, ck)?),
        _ => None,
    };

    let lattice = env_cfg.lattice();
    let l = env_cfg.num_users;
    let b = env_cfg.block_len();
    let mut slots = Vec::with_capacity(config.num_slots * config.resource_blocks);
    let mut final_jfi = 0.0;
    for block in 0..config.resource_blocks {
        let mut env = Environment::new(env_cfg.clone(), derive_seed(config.seed, STREAM_CHANNEL, block as u64))?;
        let mut policy_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, STREAM_POLICY, block as u64));
        let noise_seed = derive_seed(config.seed, STREAM_NOISE, block as u64);
        for slot in 0..config.num_slots {
            let truth = env.true_csi().clone();
            let o_adv = match (&threat, &attack) {
                (Some(t), Some(a)) => match &a.result {
                    Some(r) => Some(r.o_adv.clone()),
                    None => Some(noise_attack(t, derive_seed(noise_seed, 0, slot as u64))),
                },
                _ => None,
            };
            let mut reported = truth.clone();
            if let (Some(t), Some(o)) = (&threat, &o_adv) {
                inject(&mut reported, t, o);
            }
            let mut obs = env.observe(&reported);
            if let (Some(t), Some(o)) = (&threat, &o_adv) {
                // γ and R of adversaries: truthful unless they are falsified too.
                let honest = env.observe(&truth);
                for (k, &u) in t.adversaries.iter().enumerate() {
                    for j in 0..2 {
                        obs[u * b + j] = if t.falsify_stats { o[k * b + j] } else { honest[u * b + j] };
                    }
                }
            }
            let avg_rates = env.state().avg_rates.clone();
            let action = match config.policy {
                PolicyKind::Random => random_policy(&mut policy_rng, lattice.action_count()),
                PolicyKind::OptPf => opt_pf(&reported, &avg_rates, env_cfg.tx_power, env_cfg.noise_variance, env_cfg.max_selected)?,
                PolicyKind::OptMr => opt_mr(&reported, env_cfg.tx_power, env_cfg.noise_variance, env_cfg.max_selected)?,
                PolicyKind::OptPfUg => opt_pf_ug(&reported, &avg_rates, env_cfg.tx_power, env_cfg.noise_variance, env_cfg.max_selected)?,
                PolicyKind::Sac => sac_policy(ck.expect("validated"), &lattice, &obs)?,
            };
            let outcome = env.step(action, &reported)?;
            let selected = outcome.selected.members().to_vec();
            let jfi_now = jfi(&env.state().avg_rates)?;
            slots.push(SlotRecord {
                block,
                slot,
                pf_score: pf_score(&outcome.rates, &avg_rates, &selected),
                selected,
                rates: outcome.rates,
                avg_rates,
                jfi: jfi_now,
            });
        }
        final_jfi += jfi(&env.state().avg_rates)?;
    }
    final_jfi /= config.resource_blocks as f64;

    let victims = config.victims();
    let summary = summarize(l, &victims, &slots, final_jfi);
    Ok(MetricsReport {
        num_users: l,
        victims,
        slots,
        summary,
        attack,
    })
}

/// Writes adversary CSI columns from raw `o_adv` blocks into `reported`.
fn inject(reported: &mut ComplexMatrix, threat: &ThreatModel, o_adv: &[f64]) {
    let b = threat.block_len();
    for (k, &u) in threat.adversaries.iter().enumerate() {
        reported.set_column(u, &csi_from_block(&o_adv[k * b..(k + 1) * b], threat.num_antennas));
    }
}

fn precompute_attack(config: &ExperimentConfig, threat: &ThreatModel, ck: &Checkpoint) -> Result<AttackReport> {
    let result = match (config.attack, &config.attack_file) {
        (AttackScheme::Fggm | AttackScheme::Spgd, Some(path)) => Some(load_attack(path, config.attack, threat)?),
        (AttackScheme::Fggm | AttackScheme::Spgd, None) => Some(run_attack(config, threat, ck)?),
        _ => None,
    };
    Ok(AttackReport {
        scheme: config.attack,
        adversaries: threat.adversaries.clone(),
        victims: threat.victims.clone(),
        delta_adv: threat.delta_adv,
        delta_vic: threat.delta_vic,
        result,
    })
}

/// Reads an `attack.json` and checks it fits the threat model.
pub fn load_attack(path: &Path, scheme: AttackScheme, threat: &ThreatModel) -> Result<AttackResult> {
    let r = AttackResult::from_json(&std::fs::read_to_string(path).map_err(io_err(path))?)?;
    if r.scheme != scheme || r.o_adv.len() != threat.adv_len() {
        return Err(Error::Config(format!(
            "{} holds a {} attack with {} entries, expected {scheme} with {}",
            path.display(),
            r.scheme,
            r.o_adv.len(),
            threat.adv_len()
        )));
    }
    Ok(r)
}

/// Runs the configured attack against a checkpoint; noise yields one draw.
pub fn run_attack(config: &ExperimentConfig, threat: &ThreatModel, ck: &Checkpoint) -> Result<AttackResult> {
    let actor = ck.greedy_actor();
    let lattice = ck.lattice();
    let target = Target {
        actor: &actor,
        critic: ck.critic(),
        lattice: &lattice,
        max_selected: ck.env.max_selected,
    };
    let params = config.attack_params(derive_seed(config.seed, STREAM_ATTACK, 0));
    match config.attack {
        AttackScheme::Fggm => fggm(&target, threat, &params),
        AttackScheme::Spgd => spgd(&target, threat, &params),
        AttackScheme::Noise => noise_result(threat, params.seed),
        AttackScheme::None => Err(Error::Config("no attack scheme configured".into())),
    }
}

fn summarize(l: usize, victims: &[usize], slots: &[SlotRecord], final_jfi: f64) -> Summary {
    let n = slots.len() as f64;
    let mut selection_probability = vec![0.0; l];
    let mut mean_rate = vec![0.0; l];
    for s in slots {
        for &u in &s.selected {
            selection_probability[u] += 1.0;
        }
        for (m, r) in mean_rate.iter_mut().zip(&s.rates) {
            *m += r;
        }
    }
    selection_probability.iter_mut().chain(mean_rate.iter_mut()).for_each(|v| *v /= n);
    let over = |v: &[f64]| {
        let xs: Vec<f64> = victims.iter().map(|&u| v[u]).collect();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        (mean, xs.iter().copied().fold(f64::INFINITY, f64::min))
    };
    let (victim_mean_selection, victim_min_selection) = over(&selection_probability);
    let (victim_mean_rate, victim_min_rate) = over(&mean_rate);
    Summary {
        mean_pf_score: slots.iter().map(|s| s.pf_score).sum::<f64>() / n,
        final_jfi,
        selection_probability,
        mean_rate,
        victim_mean_selection,
        victim_min_selection,
        victim_mean_rate,
        victim_min_rate,
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |e| Error::io(path, e)
}

pub fn write_metrics_csv(report: &MetricsReport, w: &mut dyn Write) -> std::io::Result<()> {
    let l = report.num_users;
    let mut header = vec!["block".to_string(), "slot".into(), "selected".into(), "pf_score".into(), "jfi".into()];
    header.extend((0..l).map(|u| format!("rate_{u}")));
    header.extend((0..l).map(|u| format!("avg_rate_{u}")));
    writeln!(w, "{}", header.join(","))?;
    for s in &report.slots {
        let sel: Vec<String> = s.selected.iter().map(|u| u.to_string()).collect();
        write!(w, "{},{},{},{},{}", s.block, s.slot, sel.join(";"), s.pf_score, s.jfi)?;
        for v in s.rates.iter().chain(&s.avg_rates) {
            write!(w, ",{v}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

pub fn write_summary_csv(report: &MetricsReport, w: &mut dyn Write) -> std::io::Result<()> {
    let s = &report.summary;
    writeln!(w, "metric,value")?;
    for (k, v) in [
        ("mean_pf_score", s.mean_pf_score),
        ("final_jfi", s.final_jfi),
        ("victim_mean_selection", s.victim_mean_selection),
        ("victim_min_selection", s.victim_min_selection),
        ("victim_mean_rate", s.victim_mean_rate),
        ("victim_min_rate", s.victim_min_rate),
    ] {
        writeln!(w, "{k},{v}")?;
    }
    for (u, p) in s.selection_probability.iter().enumerate() {
        writeln!(w, "selection_probability_{u},{p}")?;
    }
    for (u, r) in s.mean_rate.iter().enumerate() {
        writeln!(w, "mean_rate_{u},{r}")?;
    }
    Ok(())
}

fn write_file(path: &Path, f: impl FnOnce(&mut dyn Write) -> std::io::Result<()>) -> Result<()> {
    let file = std::fs::File::create(path).map_err(io_err(path))?;
    let mut w = std::io::BufWriter::new(file);
    f(&mut w).and_then(|_| w.flush()).map_err(io_err(path))
}

/// Writes `metrics.csv`, `summary.csv` and, for attacked runs, `attack.json`.
pub fn write_report(report: &MetricsReport, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut written = Vec::new();
    let metrics = dir.join("metrics.csv");
    write_file(&metrics, |w| write_metrics_csv(report, w))?;
    written.push(metrics);
    let summary = dir.join("summary.csv");
    write_file(&summary, |w| write_summary_csv(report, w))?;
    written.push(summary);
    if let Some(a) = &report.attack {
        let path = dir.join("attack.json");
        let json = serde_json::to_string_pretty(a)?;
        write_file(&path, |w| writeln!(w, "{json}"))?;
        written.push(path);
    }
    Ok(written)
}

/// What a sweep varies.
#[derive(Debug, Clone, PartialEq)]
pub enum SweepGrid {
    /// Every `(δ_adv, δ_vic)` pair.
    Deltas { delta_adv: Vec<f64>, delta_vic: Vec<f64> },
    /// Number of adversaries.
    Adversaries(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub delta_adv: f64,
    pub delta_vic: f64,
    pub num_adversaries: usize,
}

impl SweepGrid {
    pub fn cells(&self, base: &ExperimentConfig) -> Vec<SweepCell> {
        match self {
            SweepGrid::Deltas { delta_adv, delta_vic } => delta_adv
                .iter()
                .flat_map(|&a| delta_vic.iter().map(move |&v| (a, v)))
                .map(|(a, v)| SweepCell {
                    delta_adv: a,
                    delta_vic: v,
                    num_adversaries: base.num_adversaries,
                })
                .collect(),
            SweepGrid::Adversaries(ns) => ns
                .iter()
                .map(|&n| SweepCell {
                    delta_adv: base.delta_adv,
                    delta_vic: base.delta_vic,
                    num_adversaries: n,
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub cell: SweepCell,
    pub seed: u64,
    /// Failed cells keep their error message; the sweep goes on.
    pub outcome: std::result::Result<Summary, String>,
}

impl SweepCell {
    pub fn config(&self, base: &ExperimentConfig, seed: u64) -> ExperimentConfig {
        ExperimentConfig {
            delta_adv: self.delta_adv,
            delta_vic: self.delta_vic,
            num_adversaries: self.num_adversaries,
            seed,
            ..base.clone()
        }
    }
}

/// One experiment per cell and seed, run on all available cores. Rows come
/// back in grid order regardless of scheduling.
pub fn sweep(base: &ExperimentConfig, grid: &SweepGrid, seeds: &[u64], checkpoint: Option<&Checkpoint>) -> Result<Vec<SweepRow>> {
    let cells = grid.cells(base);
    if cells.is_empty() || seeds.is_empty() {
        return Err(Error::Config("sweep grid and seed list must be non-empty".into()));
    }
    let jobs: Vec<(SweepCell, u64)> = cells.iter().flat_map(|c| seeds.iter().map(move |&s| (c.clone(), s))).collect();
    let results: Vec<Mutex<Option<SweepRow>>> = jobs.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(jobs.len());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some((cell, seed)) = jobs.get(i) else { break };
                let outcome = run_experiment_with(&cell.config(base, *seed), checkpoint).map(|r| r.summary).map_err(|e| e.to_string());
                *results[i].lock().expect("no poisoned cells") = Some(SweepRow {
                    cell: cell.clone(),
                    seed: *seed,
                    outcome,
                });
            });
        }
    });
    Ok(results.into_iter().map(|m| m.into_inner().expect("no poisoned cells").expect("every job ran")).collect())
}

pub fn write_sweep_csv(rows: &[SweepRow], w: &mut dyn Write) -> std::io::Result<()> {
    writeln!(w, "delta_adv,delta_vic,adversaries,seed,victim_mean_selection,victim_min_selection,victim_mean_rate,victim_min_rate,mean_pf_score,final_jfi,error")?;
    for r in rows {
        let c = &r.cell;
        write!(w, "{},{},{},{},", c.delta_adv, c.delta_vic, c.num_adversaries, r.seed)?;
        match &r.outcome {
            Ok(s) => writeln!(
                w,
                "{},{},{},{},{},{},",
                s.victim_mean_selection, s.victim_min_selection, s.victim_mean_rate, s.victim_min_rate, s.mean_pf_score, s.final_jfi
            )?,
            Err(e) => writeln!(w, ",,,,,,\"{}\"", e.replace('"', "'"))?,
        }
    }
    Ok(())
}

/// Per-cell means over the seeds that succeeded.
pub fn write_sweep_summary_csv(rows: &[SweepRow], w: &mut dyn Write) -> std::io::Result<()> {
    writeln!(w, "delta_adv,delta_vic,adversaries,runs,failed,victim_mean_selection,victim_min_selection,victim_mean_rate,victim_min_rate")?;
    let mut i = 0;
    while i < rows.len() {
        let cell = &rows[i].cell;
        let group: Vec<&SweepRow> = rows[i..].iter().take_while(|r| &r.cell == cell).collect();
        i += group.len();
        let ok: Vec<&Summary> = group.iter().filter_map(|r| r.outcome.as_ref().ok()).collect();
        write!(w, "{},{},{},{},{}", cell.delta_adv, cell.delta_vic, cell.num_adversaries, ok.len(), group.len() - ok.len())?;
        if ok.is_empty() {
            writeln!(w, ",,,,")?;
        } else {
            let mean = |f: fn(&Summary) -> f64| ok.iter().map(|s| f(s)).sum::<f64>() / ok.len() as f64;
            writeln!(
                w,
                ",{},{},{},{}",
                mean(|s| s.victim_mean_selection),
                mean(|s| s.victim_min_selection),
                mean(|s| s.victim_mean_rate),
                mean(|s| s.victim_min_rate)
            )?;
        }
    }
    Ok(())
}

/// Writes `sweep.csv` and `sweep_summary.csv`.
pub fn write_sweep(rows: &[SweepRow], dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let a = dir.join("sweep.csv");
    write_file(&a, |w| write_sweep_csv(rows, w))?;
    let b = dir.join("sweep_summary.csv");
    write_file(&b, |w| write_sweep_summary_csv(rows, w))?;
    Ok(vec![a, b])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::EnvConfig;

    fn small(policy: PolicyKind) -> ExperimentConfig {
        ExperimentConfig {
            env: EnvConfig {
                num_users: 4,
                num_antennas: 2,
                max_selected: 2,
                knn_k: 3,
                ..EnvConfig::default()
            },
            num_slots: 40,
            policy,
            num_adversaries: 2,
            seed: 3,
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn jfi_examples() {
        assert_eq!(jfi(&[2.0; 5]).unwrap(), 1.0);
        let mut one = vec![0.0; 8];
        one[3] = 1.7;
        assert!((jfi(&one).unwrap() - 0.125).abs() < 1e-15);
        assert!((jfi(&[1.0, 2.0, 3.0]).unwrap() - 6.0 / 7.0).abs() < 1e-15);
        assert!(matches!(jfi(&[0.0; 3]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn random_runs_are_reproducible() {
        let c = small(PolicyKind::Random);
        let a = run_experiment(&c).unwrap();
        assert_eq!(a, run_experiment(&c).unwrap());
        let other = run_experiment(&ExperimentConfig { seed: 4, ..c }).unwrap();
        assert_ne!(a.slots, other.slots);
    }

    #[test]
    fn slot_invariants() {
        for p in [PolicyKind::Random, PolicyKind::OptPf, PolicyKind::OptMr, PolicyKind::OptPfUg] {
            let c = small(p);
            let r = run_experiment(&c).unwrap();
            for s in &r.slots {
                assert!(s.selected.len() <= c.env.max_selected);
                let direct: f64 = s.selected.iter().map(|&u| s.rates[u] / s.avg_rates[u]).sum();
                assert_eq!(s.pf_score, direct);
            }
            let sm = &r.summary;
            assert!(sm.selection_probability.iter().all(|p| (0.0..=1.0).contains(p)));
            let l = c.env.num_users as f64;
            assert!(sm.final_jfi >= 1.0 / l - 1e-12 && sm.final_jfi <= 1.0 + 1e-12);
            assert!(sm.victim_min_selection <= sm.victim_mean_selection);
            assert!(sm.victim_min_rate <= sm.victim_mean_rate);
        }
    }

    #[test]
    fn two_users_sum_rate_matches_enumeration() {
        let c = ExperimentConfig {
            env: EnvConfig {
                num_users: 2,
                num_antennas: 2,
                max_selected: 2,
                proto_dims: 2,
                knn_k: 2,
                ..EnvConfig::default()
            },
            num_slots: 300,
            policy: PolicyKind::OptMr,
            num_adversaries: 0,
            ..ExperimentConfig::default()
        };
        let r = run_experiment(&c).unwrap();
        let mut env = Environment::new(c.env.clone(), derive_seed(c.seed, STREAM_CHANNEL, 0)).unwrap();
        let mut both = 0;
        for s in &r.slots {
            let h = env.true_csi().clone();
            let rate = |m: &[usize]| crate::channel::sinr_and_rates(&h, &h, m, 1.0, 0.1).iter().sum::<f64>();
            let best = [vec![0], vec![1], vec![0, 1]]
                .into_iter()
                .fold((vec![], f64::NEG_INFINITY), |b, m| if rate(&m) > b.1 { (m.clone(), rate(&m)) } else { b });
            assert_eq!(s.selected, best.0, "slot {}", s.slot);
            both += (s.selected.len() == 2) as usize;
            env.step(crate::env::ActionIndex(0), &h).unwrap();
        }
        // Correlated draws make a single user win often; both outcomes occur.
        assert!(both > 0 && both < r.slots.len(), "pair chosen in {both} slots");
    }

    #[test]
    fn resource_blocks_pool_independent_replicas() {
        let c = ExperimentConfig {
            resource_blocks: 3,
            ..small(PolicyKind::OptPf)
        };
        let r = run_experiment(&c).unwrap();
        assert_eq!(r.slots.len(), 3 * c.num_slots);
        let first: Vec<_> = r.slots.iter().filter(|s| s.block == 0).map(|s| &s.selected).collect();
        let second: Vec<_> = r.slots.iter().filter(|s| s.block == 1).map(|s| &s.selected).collect();
        assert_ne!(first, second);
    }

    #[test]
    fn report_files() {
        let dir = tempfile::tempdir().unwrap();
        let r = run_experiment(&small(PolicyKind::OptPfUg)).unwrap();
        let files = write_report(&r, dir.path()).unwrap();
        assert_eq!(files.len(), 2);
        let metrics = std::fs::read_to_string(&files[0]).unwrap();
        assert_eq!(metrics.lines().count(), 41);
        assert!(metrics.starts_with("block,slot,selected,pf_score,jfi,rate_0"));
        let summary = std::fs::read_to_string(&files[1]).unwrap();
        assert!(summary.contains("\nvictim_min_rate,"));
    }

    #[test]
    fn sweep_cells_match_single_runs_and_record_failures() {
        let base = small(PolicyKind::OptPf);
        let grid = SweepGrid::Adversaries(vec![1, 4]);
        let rows = sweep(&base, &grid, &[7], None).unwrap();
        assert_eq!(rows.len(), 2);
        let single = run_experiment(&ExperimentConfig {
            num_adversaries: 1,
            seed: 7,
            ..base.clone()
        })
        .unwrap();
        assert_eq!(rows[0].outcome.as_ref().unwrap(), &single.summary);
        assert!(rows[1].outcome.is_err());
        let mut csv = Vec::new();
        write_sweep_csv(&rows, &mut csv).unwrap();
        assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 3);
    }

    #[test]
    fn checkpoint_required_up_front() {
        let c = ExperimentConfig {
            attack: AttackScheme::Noise,
            checkpoint: Some("missing.bin".into()),
            ..small(PolicyKind::OptPf)
        };
        assert!(run_experiment(&c).is_err());
        assert!(matches!(run_experiment_with(&c, None), Err(Error::Config(_))));
    }

    #[test]
    fn saved_attacks_must_match_scheme_and_shape() {
        let c = small(PolicyKind::Random);
        let mut norm = crate::env::NormalizerState::new(c.env.obs_dim());
        norm.update(&vec![0.5; c.env.obs_dim()]);
        norm.update(&vec![1.5; c.env.obs_dim()]);
        let t = ThreatModel::first_adversaries(&c.env, 2, 1.0, 1.0, norm.clone()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("attack.json");
        let r = noise_result(&t, 5).unwrap();
        std::fs::write(&path, r.to_json().unwrap()).unwrap();
        assert_eq!(load_attack(&path, AttackScheme::Noise, &t).unwrap().o_adv, r.o_adv);
        assert!(matches!(load_attack(&path, AttackScheme::Fggm, &t), Err(Error::Config(_))));
        let one = ThreatModel::first_adversaries(&c.env, 1, 1.0, 1.0, norm).unwrap();
        assert!(load_attack(&path, AttackScheme::Noise, &one).is_err());
    }
}
