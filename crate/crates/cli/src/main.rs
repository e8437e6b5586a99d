//! Command-line front end: run searches, compare variants, certify the
//! exact-iteration improvement guarantee, resume checkpointed runs, and
//! serve the out-of-process oracle protocol.

mod commands;
mod config;
mod runio;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use ma2ml_core::trainer::Variant;

fn parse_variant(s: &str) -> Result<Variant, String> {
    match s {
        "ma2ml" => Ok(Variant::Ma2ml),
        "lite" => Ok(Variant::Lite),
        "onpolicy" => Ok(Variant::Onpolicy),
        other => Err(format!("unknown variant `{other}` (ma2ml|lite|onpolicy)")),
    }
}

#[derive(Parser)]
#[command(
    name = "ma2ml",
    about = "Multi-agent black-box search over joint pipeline configurations",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct RunFlags {
    /// Run config file.
    #[arg(long, env = "MA2ML_CONFIG")]
    config: PathBuf,
    /// Update rule: ma2ml | lite | onpolicy.
    #[arg(long, env = "MA2ML_VARIANT", value_parser = parse_variant)]
    variant: Option<Variant>,
    /// Root seed; drives every random stream of the run.
    #[arg(long, env = "MA2ML_SEED")]
    seed: Option<u64>,
    /// Iteration budget override.
    #[arg(long, env = "MA2ML_MAX_ITER")]
    max_iter: Option<usize>,
    /// Output directory for logs, reports, and checkpoints.
    #[arg(long, env = "MA2ML_OUT")]
    out: Option<PathBuf>,
    /// Oracle override: separable | coupled | tabular:PATH | exec:CMD.
    #[arg(long, env = "MA2ML_ORACLE")]
    oracle: Option<String>,
    /// FLOPs constraint of the multi-objective reward transform.
    #[arg(long, env = "MA2ML_FLOPS_CONSTRAINT")]
    flops_constraint: Option<f64>,
    /// Cost exponent of the multi-objective reward transform.
    #[arg(long, env = "MA2ML_W", allow_hyphen_values = true)]
    w: Option<f64>,
}

impl RunFlags {
    fn overrides(&self) -> config::Overrides {
        config::Overrides {
            variant: self.variant,
            seed: self.seed,
            max_iter: self.max_iter,
            out: self.out.clone(),
            oracle: self.oracle.clone(),
            flops_constraint: self.flops_constraint,
            w: self.w,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run one search and write its logs, top-k report, and checkpoint.
    Search {
        #[command(flatten)]
        flags: RunFlags,
        /// Stop (with a checkpoint) after this iteration; for testing
        /// interrupt/resume flows.
        #[arg(long, hide = true)]
        stop_after: Option<usize>,
    },
    /// Run several variants over paired seeds and emit comparison CSVs.
    Compare {
        #[command(flatten)]
        flags: RunFlags,
        /// Comma-separated variants to run.
        #[arg(long, default_value = "ma2ml,lite,onpolicy")]
        variants: String,
        /// Number of paired seeds (seed, seed+1, ...).
        #[arg(long)]
        seeds: u64,
        /// Reward threshold for evaluations-to-threshold; computed from the
        /// enumerated optimum when omitted and the space is enumerable.
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Certify monotonic improvement of the exact divergence iteration.
    Certify {
        /// Divergence regularization coefficient (must be > 0).
        #[arg(long, default_value_t = 0.2)]
        lambda: f64,
        #[arg(long, default_value_t = 3)]
        agents: usize,
        #[arg(long, default_value_t = 6)]
        actions: usize,
        #[arg(long, default_value_t = 200)]
        iterations: usize,
        #[arg(long, default_value_t = 50)]
        seeds: u64,
        /// Coordinate-ascent sweeps per outer step.
        #[arg(long, default_value_t = 3)]
        sweeps: usize,
        /// Trajectory CSV path.
        #[arg(long, env = "MA2ML_OUT")]
        out: Option<PathBuf>,
    },
    /// Continue a checkpointed run to its full budget.
    Resume {
        /// Run directory or manifest file.
        manifest: PathBuf,
        #[arg(long, hide = true)]
        stop_after: Option<usize>,
    },
    /// Serve oracle evaluations over stdin/stdout (one JSON document per
    /// line), the wire protocol the exec oracle speaks.
    Worker {
        /// Space config file.
        #[arg(long, env = "MA2ML_SPACE")]
        space: PathBuf,
        /// Oracle spec: separable | coupled | tabular:PATH.
        #[arg(long, env = "MA2ML_ORACLE", default_value = "coupled")]
        oracle: String,
        /// Seed of the synthetic oracle tables.
        #[arg(long, default_value_t = 0)]
        oracle_seed: u64,
    },
}

fn main() {
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Search { flags, stop_after } => {
            commands::search(&flags.config, &flags.overrides(), stop_after)
        }
        Command::Compare {
            flags,
            variants,
            seeds,
            threshold,
        } => commands::compare(&flags.config, &flags.overrides(), &variants, seeds, threshold),
        Command::Certify {
            lambda,
            agents,
            actions,
            iterations,
            seeds,
            sweeps,
            out,
        } => commands::certify(lambda, agents, actions, iterations, seeds, sweeps, out.as_deref()),
        Command::Resume {
            manifest,
            stop_after,
        } => commands::resume(&manifest, stop_after),
        Command::Worker {
            space,
            oracle,
            oracle_seed,
        } => commands::worker(&space, &oracle, oracle_seed),
    };
    match code {
        Ok(code) => std::process::exit(code),
        Err(err) => {
            eprintln!("error: {err:#}");
            std::process::exit(2);
        }
    }
}
