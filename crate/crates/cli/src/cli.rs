use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use trajdiff::sim::SimMode;

use crate::commands;
use crate::config::RunConfig;
use crate::error::CliResult;

#[derive(Debug, Parser)]
#[command(name = "trajdiff", version, about = "Language-conditioned diffusion traffic simulation")]
pub struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (or file for evaluate/render).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Uncond,
    Text,
    Adversarial,
}

impl From<ModeArg> for SimMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Uncond => SimMode::Uncond,
            ModeArg::Text => SimMode::Text,
            ModeArg::Adversarial => SimMode::Adversarial,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic scenario dataset.
    GenData {
        #[arg(long)]
        count: Option<usize>,
    },
    /// Open-loop training from scratch.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Continue training under a shorter diffusion schedule.
    Retarget {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Target number of diffusion steps.
        #[arg(long)]
        k: Option<usize>,
    },
    /// Closed-loop fine-tuning.
    TrainCl {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Accept a source checkpoint trained for a different step count.
        #[arg(long)]
        force: bool,
    },
    /// Closed-loop simulation with replanning.
    Simulate {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long, allow_negative_numbers = true)]
        cfg_weight: Option<f64>,
        /// Joint samples per plan (M).
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        guidance_alpha: Option<f64>,
    },
    /// Realism metrics, minADE and collision rate of a rollout directory.
    Evaluate {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        rollouts: Option<PathBuf>,
        /// Unconditional rollouts for a paired comparison.
        #[arg(long)]
        baseline: Option<PathBuf>,
    },
    /// Draw a scenario, and optionally one rollout, as SVG.
    Render {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        rollouts: Option<PathBuf>,
        #[arg(long)]
        scenario: Option<usize>,
        #[arg(long)]
        rollout: Option<usize>,
    },
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn set_opt<T>(slot: &mut Option<T>, v: Option<T>) {
    if v.is_some() {
        *slot = v;
    }
}

/// Config file first, then flags.
pub fn resolve(cli: &Cli) -> CliResult<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    set_opt(&mut cfg.seed, cli.seed);
    set_opt(&mut cfg.workers, cli.workers);
    set_opt(&mut cfg.paths.out, cli.out.clone());
    match &cli.command {
        Command::GenData { count } => set(&mut cfg.gen_data.count, *count),
        Command::Train { data } => set_opt(&mut cfg.paths.data, data.clone()),
        Command::Retarget { data, checkpoint, k } => {
            set_opt(&mut cfg.paths.data, data.clone());
            set_opt(&mut cfg.paths.checkpoint, checkpoint.clone());
            set(&mut cfg.retarget.k, *k);
        }
        Command::TrainCl { data, checkpoint, .. } => {
            set_opt(&mut cfg.paths.data, data.clone());
            set_opt(&mut cfg.paths.checkpoint, checkpoint.clone());
        }
        Command::Simulate { data, checkpoint, mode, cfg_weight, samples, guidance_alpha } => {
            set_opt(&mut cfg.paths.data, data.clone());
            set_opt(&mut cfg.paths.checkpoint, checkpoint.clone());
            set(&mut cfg.simulate.mode, mode.map(SimMode::from));
            set(&mut cfg.simulate.sample.cfg_weight, *cfg_weight);
            set(&mut cfg.simulate.sample.samples, *samples);
            set(&mut cfg.simulate.guidance_alpha, *guidance_alpha);
        }
        Command::Evaluate { data, rollouts, baseline } => {
            set_opt(&mut cfg.paths.data, data.clone());
            set_opt(&mut cfg.paths.rollouts, rollouts.clone());
            set_opt(&mut cfg.paths.baseline, baseline.clone());
        }
        Command::Render { data, rollouts, scenario, rollout } => {
            set_opt(&mut cfg.paths.data, data.clone());
            set_opt(&mut cfg.paths.rollouts, rollouts.clone());
            set(&mut cfg.render.scenario, *scenario);
            set_opt(&mut cfg.render.rollout, *rollout);
        }
    }
    Ok(cfg)
}

/// Runs one parsed invocation and returns a one-line summary.
pub fn execute(cli: &Cli) -> CliResult<String> {
    let cfg = resolve(cli)?;
    let out = cfg.paths.out.as_deref().map(|p| p.display().to_string()).unwrap_or_default();
    Ok(match &cli.command {
        Command::GenData { .. } => {
            let m = commands::gen_data(&cfg)?;
            format!("wrote {} scenarios in {} shards to {out}", m.count, m.shards.len())
        }
        Command::Train { .. } => {
            let m = commands::train(&cfg)?;
            format!("trained K={} checkpoint to {out} (final loss {:.5})", m.k, m.final_loss.unwrap_or(f64::NAN))
        }
        Command::Retarget { .. } => {
            let m = commands::retarget(&cfg)?;
            format!("retargeted checkpoint to K={} at {out}", m.k)
        }
        Command::TrainCl { force, .. } => {
            let m = commands::train_cl(&cfg, *force)?;
            format!("closed-loop checkpoint (K={}) written to {out}", m.k)
        }
        Command::Simulate { .. } => {
            let m = commands::simulate_cmd(&cfg)?;
            format!("simulated {} scenarios ({:?}) to {out}", m.scenario_count, m.mode)
        }
        Command::Evaluate { .. } => {
            let r = commands::evaluate_cmd(&cfg)?;
            let mut s = format!(
                "composite {:.4} minADE {:.3} collision rate {:.3} over {} scenarios",
                r.report.composite, r.report.min_ade, r.report.collision_rate, r.report.scenario_count
            );
            if let Some(p) = &r.paired {
                s.push_str(&format!("; paired delta {:.3}", p.delta));
            }
            s
        }
        Command::Render { .. } => {
            commands::render_cmd(&cfg)?;
            format!("rendered {out}")
        }
    })
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(&cli) {
        Ok(msg) => {
            println!("{msg}");
            0
        }
        Err(e) => {
            eprintln!("trajdiff: {e}");
            e.exit_code()
        }
    }
}
