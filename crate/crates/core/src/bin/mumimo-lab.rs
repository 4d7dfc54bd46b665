use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mumimo_lab::attack::{AttackScheme, ThreatModel};
use mumimo_lab::harness::config::{list, parse_override};
use mumimo_lab::harness::{
    load_checkpoint, resolve_output_dir, run_attack, run_experiment_with, sweep, write_report, write_sweep, ExperimentConfig, SweepGrid,
    TrainConfig,
};
use mumimo_lab::sac::{train, Checkpoint};
use mumimo_lab::{Error, Result};

#[derive(Parser)]
#[command(name = "mumimo-lab", version, about = "MU-MIMO scheduling agents and grey-box CSI attacks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration key, repeatable: `--set users=16`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn pairs(&self) -> Result<Vec<(String, String)>> {
        let mut pairs = match &self.config {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                mumimo_lab::harness::config::parse_pairs(&text)?
            }
            None => Vec::new(),
        };
        for o in &self.overrides {
            pairs.push(parse_override(o)?);
        }
        Ok(pairs)
    }

    fn experiment(&self, seed: u64) -> Result<ExperimentConfig> {
        let mut c = ExperimentConfig::default();
        c.apply(&self.pairs()?)?;
        c.seed = seed;
        Ok(c)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a Wolpertinger SAC agent and save a checkpoint.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        seed: Option<u64>,
        /// Checkpoint file to write.
        #[arg(long, short)]
        out: PathBuf,
        /// Training curve CSV, one row per episode.
        #[arg(long)]
        curve: Option<PathBuf>,
    },
    /// Optimise adversarial CSI against a checkpoint and write attack.json.
    Attack {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// fggm, spgd or noise; defaults to the configured scheme, else fggm.
        #[arg(long)]
        scheme: Option<AttackScheme>,
        #[arg(long)]
        delta_adv: Option<f64>,
        #[arg(long)]
        delta_vic: Option<f64>,
        /// Number of adversaries (the first users).
        #[arg(long)]
        adversaries: Option<usize>,
        #[arg(long)]
        restarts: Option<usize>,
        #[arg(long)]
        iterations: Option<usize>,
        /// Sample count for spgd.
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        seed: u64,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Run one experiment and write metrics.csv, summary.csv and attack.json.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Grid over (delta_adv, delta_vic) pairs or adversary counts.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// First evaluation seed.
        #[arg(long)]
        seed: u64,
        /// Number of consecutive seeds per cell.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        #[arg(long, value_name = "LIST", requires = "delta_vic", conflicts_with = "adversaries")]
        delta_adv: Option<String>,
        #[arg(long, value_name = "LIST", requires = "delta_adv")]
        delta_vic: Option<String>,
        #[arg(long, value_name = "LIST")]
        adversaries: Option<String>,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
}

fn output_dir(flag: Option<PathBuf>, config: &ExperimentConfig) -> PathBuf {
    match flag {
        Some(d) => d,
        None => resolve_output_dir(&config.output_dir),
    }
}

fn announce(paths: &[PathBuf]) {
    for p in paths {
        println!("wrote {}", p.display());
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { cfg, seed, out, curve } => {
            let mut t = TrainConfig::default();
            t.apply(&cfg.pairs()?)?;
            if let Some(s) = seed {
                t.sac.seed = s;
            }
            t.validate()?;
            let ck = match &curve {
                Some(p) => {
                    let mut w = create(p)?;
                    let ck = train(&t.env, &t.sac, Some(&mut w))?;
                    w.flush().map_err(|e| Error::io(p, e))?;
                    ck
                }
                None => train(&t.env, &t.sac, None)?,
            };
            ck.save(&out)?;
            announce(&[out]);
            announce(&curve.into_iter().collect::<Vec<_>>());
        }
        Command::Attack { cfg, checkpoint, scheme, delta_adv, delta_vic, adversaries, restarts, iterations, samples, seed, out } => {
            let mut c = cfg.experiment(seed)?;
            if let Some(p) = checkpoint {
                c.checkpoint = Some(p);
            }
            c.delta_adv = delta_adv.unwrap_or(c.delta_adv);
            c.delta_vic = delta_vic.unwrap_or(c.delta_vic);
            c.num_adversaries = adversaries.unwrap_or(c.num_adversaries);
            c.restarts = restarts.unwrap_or(c.restarts);
            c.iterations = iterations.unwrap_or(c.iterations);
            c.samples = samples.unwrap_or(c.samples);
            c.attack = match (scheme, c.attack) {
                (Some(s), _) => s,
                (None, AttackScheme::None) => AttackScheme::Fggm,
                (None, s) => s,
            };
            c.validate()?;
            // noise needs the checkpoint too: its box comes from the stored normaliser
            let path = c.checkpoint.as_deref().ok_or_else(|| Error::Config("attack needs a checkpoint".into()))?;
            let ck = Checkpoint::load(path)?;
            let mut threat = ThreatModel::first_adversaries(&ck.env, c.num_adversaries, c.delta_adv, c.delta_vic, ck.normalizer.clone())?;
            threat.falsify_stats = c.falsify_stats;
            let result = run_attack(&c, &threat, &ck)?;
            let mut w = create(&out)?;
            writeln!(w, "{}", result.to_json()?).and_then(|_| w.flush()).map_err(|e| Error::io(&out, e))?;
            eprintln!("objective {:.6} after {} restarts ({:.2} s)", result.objective, result.traces.len(), result.wall_time_s);
            announce(&[out]);
        }
        Command::Eval { cfg, seed, output_dir: dir } => {
            let c = cfg.experiment(seed)?;
            c.validate()?;
            let ck = load_checkpoint(&c)?;
            let report = run_experiment_with(&c, ck.as_ref())?;
            let s = &report.summary;
            eprintln!(
                "mean PF {:.4}, final JFI {:.4}, victim selection mean {:.4} / min {:.4}, victim rate mean {:.4} / min {:.4}",
                s.mean_pf_score, s.final_jfi, s.victim_mean_selection, s.victim_min_selection, s.victim_mean_rate, s.victim_min_rate
            );
            announce(&write_report(&report, &output_dir(dir, &c))?);
        }
        Command::Sweep { cfg, seed, seeds, delta_adv, delta_vic, adversaries, output_dir: dir } => {
            let c = cfg.experiment(seed)?;
            let grid = match (delta_adv, delta_vic, adversaries) {
                (Some(a), Some(v), None) => SweepGrid::Deltas {
                    delta_adv: list("delta_adv", &a)?,
                    delta_vic: list("delta_vic", &v)?,
                },
                (None, None, Some(n)) => SweepGrid::Adversaries(list("adversaries", &n)?),
                _ => return Err(Error::Config("give either --delta-adv with --delta-vic, or --adversaries".into())),
            };
            // Cells validate themselves; only the checkpoint is checked up front.
            let ck = load_checkpoint(&c)?;
            let seed_list: Vec<u64> = (0..seeds).map(|k| seed + k).collect();
            let rows = sweep(&c, &grid, &seed_list, ck.as_ref())?;
            let failed = rows.iter().filter(|r| r.outcome.is_err()).count();
            if failed > 0 {
                eprintln!("{failed} of {} runs failed; see the error column", rows.len());
            }
            announce(&write_sweep(&rows, &output_dir(dir, &c))?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
