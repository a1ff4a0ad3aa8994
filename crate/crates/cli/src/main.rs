//! `gcr`: train, sweep, diagnose and export graph-consistency-regularized
//! classifiers from a TOML manifest.
//!
//! Exit codes: 0 success, 1 failed check, 2 configuration or input error,
//! 3 divergence.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::{Axis, GraphKind, GraphOptions, RunOptions};
use gcr_core::diagnostics::DEFAULT_EDGE_THRESHOLD;
use gcr_core::OpKind;
use manifest::{parse_seeds, Preset};

#[derive(Parser)]
#[command(name = "gcr", version, about = "Graph consistency regularization experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Wrapper so clap treats the parsed list as one value.
#[derive(Clone)]
struct Seeds(Vec<u64>);

#[derive(Args, Clone)]
struct Common {
    /// Run manifest (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Comma-separated seeds or ranges such as `0..5`; overrides the manifest.
    #[arg(long, value_parser = |s: &str| parse_seeds(s).map(Seeds))]
    seeds: Option<Seeds>,
    /// Output directory; overrides the manifest.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Concurrent training runs.
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Schedule defaults for fields the manifest leaves out.
    #[arg(long, value_enum)]
    preset: Option<Preset>,
}

impl From<Common> for RunOptions {
    fn from(c: Common) -> Self {
        RunOptions {
            config: c.config,
            seeds: c.seeds.map(|s| s.0),
            out: c.out,
            workers: c.workers,
            preset: c.preset,
        }
    }
}

#[derive(Args)]
struct GraphArgs {
    /// Rows in the seeded evaluation batch.
    #[arg(long, default_value_t = 64)]
    batch: usize,
    /// Seed selecting the evaluation batch and the spectral perturbation.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Minimum edge weight kept in graph exports.
    #[arg(long, default_value_t = DEFAULT_EDGE_THRESHOLD)]
    threshold: f64,
    /// Also write Graphviz DOT files.
    #[arg(long)]
    dot: bool,
}

impl From<GraphArgs> for GraphOptions {
    fn from(g: GraphArgs) -> Self {
        GraphOptions {
            batch: g.batch,
            seed: g.seed,
            threshold: g.threshold,
            dot: g.dot,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train one run per seed.
    Train(Common),
    /// Train every seed for every value of one axis and summarize.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        axis: Axis,
        /// Comma-separated values; defaults to the full axis.
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<String>>,
    },
    /// Compute structural metrics for a trained checkpoint on the test split.
    Diagnose {
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint file, or a run directory containing `checkpoint.json`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Defaults to `<run dir>/diagnostics`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        graph: GraphArgs,
    },
    /// Write one batch similarity graph as a node-link document.
    ExportGraph {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "feature")]
        graph_kind: GraphKind,
        /// Feature layer; defaults to the deepest tap-eligible layer.
        #[arg(long)]
        layer: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        graph: GraphArgs,
    },
    /// Compare analytic and finite-difference gradients of the training
    /// objective for every parameter tensor.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 8)]
        batch: usize,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        #[arg(long, hide = true)]
        corrupt_rule: Option<OpKind>,
    },
}

fn checkpoint_file(p: PathBuf) -> PathBuf {
    if p.is_dir() {
        p.join("checkpoint.json")
    } else {
        p
    }
}

fn run(cli: Cli) -> anyhow::Result<u8> {
    match cli.command {
        Command::Train(c) => commands::cmd_train(&c.into()),
        Command::Sweep { common, axis, values } => commands::cmd_sweep(&common.into(), axis, values.as_deref()),
        Command::Diagnose { config, checkpoint, out, graph } => {
            let file = checkpoint_file(checkpoint);
            let out = out.unwrap_or_else(|| {
                file.parent().map(PathBuf::from).unwrap_or_default().join("diagnostics")
            });
            commands::cmd_diagnose(&config, &file, &out, &graph.into())
        }
        Command::ExportGraph { config, checkpoint, graph_kind, layer, out, graph } => {
            commands::cmd_export_graph(&config, &checkpoint_file(checkpoint), graph_kind, layer, &out, &graph.into())
        }
        Command::Gradcheck { common, batch, eps, corrupt_rule } => {
            commands::cmd_gradcheck(&common.into(), batch, eps, corrupt_rule)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code_for(&e))
        }
    }
}
