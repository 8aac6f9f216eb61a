//! Command-line driver for reconstruction, transfer, segregation and SEIR runs.

pub mod commands;
pub mod config;
pub mod plots;

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use odflow::geodata::Scenario;
use odflow::synthcity::Sparsity;

use config::*;

#[derive(Debug, Parser)]
#[command(name = "odflow", version, about = "Origin-destination flow reconstruction and analysis")]
pub struct Cli {
    /// TOML run configuration; command-line flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, default_value = "odflow-out")]
    pub out_dir: PathBuf,
    /// Allow writing into a non-empty output directory.
    #[arg(long, global = true)]
    pub overwrite: bool,
    /// Independent seeded repetitions (reconstruct only).
    #[arg(long, global = true)]
    pub repeats: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct InputArgs {
    #[arg(long)]
    pub regions: Option<PathBuf>,
    #[arg(long)]
    pub features: Option<PathBuf>,
    #[arg(long)]
    pub flows: Option<PathBuf>,
}

impl InputArgs {
    fn apply(&self, input: &mut CityInput) {
        if let Some(p) = &self.regions {
            input.regions = Some(p.clone());
        }
        if let Some(p) = &self.features {
            input.features = Some(p.clone());
        }
        if let Some(p) = &self.flows {
            input.flows = Some(p.clone());
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train on a partial observation and predict the hidden flows.
    Reconstruct {
        #[command(flatten)]
        input: InputArgs,
        #[arg(long)]
        scenario: Option<Scenario>,
        #[arg(long)]
        ratio: Option<f64>,
        #[arg(long)]
        top_fraction: Option<f64>,
    },
    /// Apply a checkpoint (or a directory of ensemble members) to another city.
    Transfer {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        regions: Option<PathBuf>,
        #[arg(long)]
        features: Option<PathBuf>,
        /// True flows of the target city, for evaluation only.
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Train an ensemble on zone subsamples.
    TrainEnsemble {
        #[command(flatten)]
        input: InputArgs,
        #[arg(long)]
        members: Option<usize>,
        #[arg(long)]
        scenario: Option<Scenario>,
        #[arg(long)]
        ratio: Option<f64>,
    },
    /// Spatial income segregation index.
    Segindex {
        #[arg(long)]
        regions: Option<PathBuf>,
        #[arg(long)]
        k: Option<usize>,
        /// Report SI for every K from 2 to N/2.
        #[arg(long)]
        scan: bool,
    },
    /// Flow-driven SEIR simulation, paired when estimated flows are given.
    Seir {
        #[command(flatten)]
        input: InputArgs,
        #[arg(long)]
        estimated_flows: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long)]
        mixing: Option<f64>,
        #[arg(long)]
        horizon: Option<usize>,
    },
    /// Generate a synthetic city (or a pair of cities).
    Synth {
        /// Region count; a target edge count is rescaled to keep the density.
        #[arg(long)]
        n_regions: Option<usize>,
        /// Emit a second city with this generator divergence.
        #[arg(long)]
        divergence: Option<f64>,
        #[arg(long, requires = "divergence")]
        si_offset: Option<f64>,
    },
    /// Metrics of predicted against true flows.
    Eval {
        #[arg(long)]
        regions: Option<PathBuf>,
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long)]
        predicted: Option<PathBuf>,
    },
}

fn prepare_out_dir(dir: &Path, overwrite: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = std::fs::read_dir(dir)
            .with_context(|| format!("reading {}", dir.display()))?
            .next()
            .is_some();
        if non_empty && !overwrite {
            bail!("output directory {} is not empty; pass --overwrite to reuse it", dir.display());
        }
    }
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn set<T: Clone>(slot: &mut T, value: &Option<T>) {
    if let Some(v) = value {
        *slot = v.clone();
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = cli.config.as_deref();
    if cli.repeats.is_some_and(|r| r != 1) && !matches!(cli.command, Command::Reconstruct { .. }) {
        bail!("--repeats is only supported by reconstruct");
    }
    let out = cli.out_dir.as_path();
    match &cli.command {
        Command::Reconstruct { input, scenario, ratio, top_fraction } => {
            let mut run: ReconstructRun = load(cfg)?;
            input.apply(&mut run.input);
            set(&mut run.scenario, scenario);
            set(&mut run.ratio, ratio);
            set(&mut run.top_fraction, top_fraction);
            set(&mut run.seed, &cli.seed);
            set(&mut run.repeats, &cli.repeats);
            prepare_out_dir(out, cli.overwrite)?;
            commands::cmd_reconstruct(&run, out)
        }
        Command::Transfer { checkpoint, regions, features, truth } => {
            let mut run: TransferRun = load(cfg)?;
            set(&mut run.checkpoint, checkpoint);
            InputArgs { regions: regions.clone(), features: features.clone(), flows: truth.clone() }.apply(&mut run.target);
            set(&mut run.target.synth.seed, &cli.seed);
            prepare_out_dir(out, cli.overwrite)?;
            commands::cmd_transfer(&run, out)
        }
        Command::TrainEnsemble { input, members, scenario, ratio } => {
            let mut run: EnsembleRun = load(cfg)?;
            input.apply(&mut run.input);
            set(&mut run.members, members);
            set(&mut run.scenario, scenario);
            set(&mut run.ratio, ratio);
            set(&mut run.seed, &cli.seed);
            prepare_out_dir(out, cli.overwrite)?;
            commands::cmd_train_ensemble(&run, out)
        }
        Command::Segindex { regions, k, scan } => {
            let mut run: SegindexRun = load(cfg)?;
            if regions.is_some() {
                run.regions = regions.clone();
            }
            if k.is_some() {
                run.k = *k;
            }
            run.scan |= *scan;
            set(&mut run.synth.seed, &cli.seed);
            prepare_out_dir(out, cli.overwrite)?;
            commands::cmd_segindex(&run, out)
        }
        Command::Seir { input, estimated_flows, checkpoint, beta, mixing, horizon } => {
            let mut run: SeirRun = load(cfg)?;
            input.apply(&mut run.input);
            if estimated_flows.is_some() {
                run.estimated_flows = estimated_flows.clone();
            }
            if checkpoint.is_some() {
                run.checkpoint = checkpoint.clone();
            }
            set(&mut run.params.beta, beta);
            set(&mut run.params.mixing, mixing);
            set(&mut run.params.horizon, horizon);
            set(&mut run.input.synth.seed, &cli.seed);
            prepare_out_dir(out, cli.overwrite)?;
            commands::cmd_seir(&run, out)
        }
        Command::Synth { n_regions, divergence, si_offset } => {
            let mut run: SynthRun = load(cfg)?;
            if let Some(n) = *n_regions {
                let pairs = |n: usize| (n * n.saturating_sub(1)) as f64;
                if let Sparsity::TargetEdges(t) = run.synth.sparsity {
                    let scaled = (t as f64 * pairs(n) / pairs(run.synth.n_regions).max(1.0)).round() as usize;
                    run.synth.sparsity = Sparsity::TargetEdges(scaled.max(1));
                }
                run.synth.n_regions = n;
            }
            if let Some(d) = divergence {
                run.pair = Some(PairSpec { divergence: *d, si_offset: si_offset.unwrap_or(0.0) });
            }
            set(&mut run.synth.seed, &cli.seed);
            prepare_out_dir(out, cli.overwrite)?;
            commands::cmd_synth(&run, out)
        }
        Command::Eval { regions, truth, predicted } => {
            let mut run: EvalRun = load(cfg)?;
            set(&mut run.regions, regions);
            set(&mut run.truth, truth);
            set(&mut run.predicted, predicted);
            prepare_out_dir(out, cli.overwrite)?;
            commands::cmd_eval(&run, out)
        }
    }
}

/// The error and its causes, skipping causes already quoted by their parent.
pub fn describe(err: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in err.chain() {
        let text = cause.to_string();
        if !out.contains(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
    }
    out
}

/// 3 for training failures, 2 for everything else.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    let training = err.chain().any(|e| {
        matches!(
            e.downcast_ref::<odflow::Error>(),
            Some(odflow::Error::Diverged { .. } | odflow::Error::RankDeficient { .. })
        )
    });
    if training {
        3
    } else {
        2
    }
}
