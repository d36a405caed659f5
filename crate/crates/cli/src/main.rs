//! `tracemark`: batch pipelines over watermarked multi-agent traces.

mod commands;
mod config;
mod error;
mod io;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tracemark::simulator::Pattern;

use commands::{BaselineOptions, Method, Mode};
use config::{ExperimentConfig, Overrides};
use error::{CliError, CliResult};

const DEFAULT_OUT: &str = "tracemark-out";

#[derive(Debug, Parser)]
#[command(name = "tracemark", version, about = "Generate, trace, corrupt, restore and score watermarked agent logs")]
struct Cli {
    /// JSON experiment config; flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, env = "TRACEMARK_OUT")]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    kappa: Option<f64>,
    #[arg(long, global = true)]
    window: Option<usize>,
    #[arg(long, global = true)]
    step: Option<usize>,
    #[arg(long = "tau-c", global = true)]
    tau_c: Option<f64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Synthesize traces, logs and keys for each configured topology.
    Generate {
        #[arg(long)]
        topology: Option<Pattern>,
        #[arg(long)]
        agents: Option<usize>,
        #[arg(long = "n-traces")]
        n_traces: Option<usize>,
    },
    /// Detect segments, attribution and transition graph per trace file.
    Trace {
        #[command(flatten)]
        input: Inputs,
        #[arg(long)]
        keys: Option<PathBuf>,
        /// Also write the window score field as CSV.
        #[arg(long = "field-csv")]
        field_csv: bool,
    },
    /// Obfuscate structured logs.
    Corrupt {
        #[command(flatten)]
        input: Inputs,
        /// Defaults to the config's `corruptions`, applied in order.
        #[arg(long)]
        mode: Option<Mode>,
    },
    /// Recover turn boundaries and agent names from the watermark.
    Restore {
        #[command(flatten)]
        input: Inputs,
        #[arg(long)]
        keys: Option<PathBuf>,
    },
    /// Score predictions against ground-truth traces.
    Eval {
        /// Prediction records (or traces, to score the truth itself).
        #[arg(long, required = true, num_args = 1..)]
        pred: Vec<PathBuf>,
        #[arg(long, required = true, num_args = 1..)]
        truth: Vec<PathBuf>,
        /// Restored logs, scored against `--original`.
        #[arg(long, num_args = 1.., requires = "original")]
        restored: Vec<PathBuf>,
        #[arg(long, num_args = 1.., requires = "restored")]
        original: Vec<PathBuf>,
    },
    /// Watermark-free attribution baselines.
    Baseline {
        #[command(flatten)]
        input: Inputs,
        #[arg(long)]
        method: Method,
        /// Agent roster; defaults to the agents in each trace's ground truth.
        #[arg(long)]
        keys: Option<PathBuf>,
        /// Viterbi self-transition probability.
        #[arg(long, default_value_t = tracemark::baselines::DEFAULT_STICKINESS)]
        rho: f64,
        /// Token id treated as a newline by the recursive splitter.
        #[arg(long = "newline-token")]
        newline_token: Option<u32>,
    },
}

#[derive(Debug, Args)]
struct Inputs {
    /// Files or directories of `*.json` files.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
}

fn run(cli: Cli) -> CliResult<()> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    let (topology, agents) = match &cli.command {
        Command::Generate { topology, agents, n_traces } => {
            if let Some(n) = n_traces {
                cfg.n_traces = *n;
            }
            (*topology, *agents)
        }
        _ => (None, None),
    };
    cfg.apply(&Overrides {
        seed: cli.seed,
        topology,
        agents,
        kappa: cli.kappa,
        window: cli.window,
        step: cli.step,
        tau_c: cli.tau_c,
    });
    let out = cli.out.clone().or_else(|| cfg.out.clone()).unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));

    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(w) = cli.workers {
        if w == 0 {
            return Err(CliError::param("--workers", "must be >= 1"));
        }
        pool = pool.num_threads(w);
    }
    let pool = pool.build().map_err(|e| CliError::param("--workers", e))?;

    pool.install(|| match &cli.command {
        Command::Generate { .. } => commands::generate(&cfg, &out),
        Command::Trace { input, keys, field_csv } => commands::trace(&cfg, &input.inputs, keys.as_deref(), &out, *field_csv),
        Command::Corrupt { input, mode } => {
            let modes = match mode {
                Some(m) => vec![*m],
                None => cfg
                    .corruptions
                    .iter()
                    .map(|m| m.parse().map_err(|e| CliError::param("corruptions", e)))
                    .collect::<CliResult<Vec<Mode>>>()?,
            };
            if modes.is_empty() {
                return Err(CliError::param("--mode", "pass --mode or list \"corruptions\" in the config"));
            }
            commands::corrupt(&cfg, &input.inputs, &modes, &out)
        }
        Command::Restore { input, keys } => commands::restore_logs(&cfg, &input.inputs, keys.as_deref(), &out),
        Command::Eval { pred, truth, restored, original } => {
            let pair = (!restored.is_empty()).then_some((restored.as_slice(), original.as_slice()));
            commands::eval(&cfg, pred, truth, pair, &out)
        }
        Command::Baseline { input, method, keys, rho, newline_token } => {
            let opts = BaselineOptions { method: *method, keys: keys.as_deref(), rho: *rho, newline_token: *newline_token };
            commands::baseline(&cfg, &input.inputs, &opts, &out)
        }
    })
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
