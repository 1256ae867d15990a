// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use trajdest::exec::{set_worker_threads, Execution};
use trajdest::models::ModelKind;

use commands::{Ctx, EvalArgs, RouteArgs, Source};
use config::{DataFormat, RunConfig, DATA_DIR_ENV};
use error::{exit_code, CliResult, EXIT_OK, EXIT_VALIDATION};

/// Trajectory destination and route prediction.
#[derive(Debug, Parser)]
#[command(name = "trajdest", version)]
struct Cli {
    /// TOML run configuration; defaults apply when absent.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Root directory of all stage outputs.
    #[arg(long, global = true, env = DATA_DIR_ENV)]
    data_dir: Option<PathBuf>,
    /// Caps the worker threads of the parallel stages.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Runs every stage on one thread.
    #[arg(long, global = true)]
    sequential: bool,
    /// More log output (repeatable).
    #[arg(long, short, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

fn parse_kind(s: &str) -> Result<ModelKind, String> {
    s.parse()
        .map_err(|e: trajdest::models::ModelError| e.to_string())
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Parse a Porto CSV or a CRAWDAD directory into the trip store.
    Ingest {
        /// Porto CSV file or CRAWDAD directory; `[ingest] input` when absent.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long, value_enum)]
        format: Option<DataFormat>,
        /// Weather CSV `date,hour,temperature_c,precip_mm`.
        #[arg(long)]
        weather: Option<PathBuf>,
    },
    /// Generate the synthetic city: trips and road graph.
    Synth,
    /// Filter trips and split them 90/5/5.
    Preprocess {
        /// Trip store to read; detected when absent (ingest, then synth).
        #[arg(long, value_enum)]
        source: Option<Source>,
    },
    /// Build the k-d tree partition on the training points.
    Partition,
    /// Train one model on the training split.
    Train {
        /// multi_lstm, single_lstm, mlp or baseline.
        #[arg(long, default_value = "multi_lstm", value_parser = parse_kind)]
        model: ModelKind,
        /// Full-scale recipe; slow, reported but never gated.
        #[arg(long)]
        full_repro: bool,
    },
    /// Evaluate a trained model on the test split.
    Eval {
        #[arg(long, default_value = "multi_lstm", value_parser = parse_kind)]
        model: ModelKind,
        /// Write TRIP_ID,LATITUDE,LONGITUDE predictions here.
        #[arg(long)]
        kaggle_out: Option<PathBuf>,
        /// Also evaluate random time windows of this many seconds.
        #[arg(long)]
        snippet_seconds: Option<i64>,
        /// Compare against the published figures (informational).
        #[arg(long)]
        full_repro: bool,
    },
    /// Predict the destination of one partial trajectory.
    Predict {
        #[arg(long, default_value = "multi_lstm", value_parser = parse_kind)]
        model: ModelKind,
        /// JSON lines of `[lat, lon]` plus an optional metadata object.
        #[arg(long)]
        input: PathBuf,
        /// Output file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Routes to the top-n predicted destinations with merged edge scores.
    Route {
        #[arg(long, default_value = "multi_lstm", value_parser = parse_kind)]
        model: ModelKind,
        /// Partial trajectory, same format as `predict`.
        #[arg(long)]
        input: PathBuf,
        /// Number of top regions to route to.
        #[arg(long, default_value_t = 5)]
        n: usize,
        /// Node file `id lat lon`; the synthetic graph when absent.
        #[arg(long)]
        nodes: Option<PathBuf>,
        /// Edge file `u v cost`.
        #[arg(long)]
        edges: Option<PathBuf>,
        /// GeoJSON output; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the partition regions as GeoJSON.
    ExportRegions {
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Ingest { .. } => "ingest",
            Command::Synth => "synth",
            Command::Preprocess { .. } => "preprocess",
            Command::Partition => "partition",
            Command::Train { .. } => "train",
            Command::Eval { .. } => "eval",
            Command::Predict { .. } => "predict",
            Command::Route { .. } => "route",
            Command::ExportRegions { .. } => "export-regions",
        }
    }
}

fn run(cli: Cli) -> CliResult<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(error::invalid("--threads must be at least 1"));
        }
        if !set_worker_threads(n) {
            log::warn!("--threads ignored: worker pool unavailable");
        }
    }
    let cfg = RunConfig::load(cli.config.as_deref(), cli.data_dir)?;
    let ctx = Ctx {
        cfg,
        exec: if cli.sequential {
            Execution::Sequential
        } else {
            Execution::Parallel
        },
        threads: cli.threads,
        command: cli.command.name(),
        started: Instant::now(),
    };
    match cli.command {
        Command::Ingest {
            input,
            format,
            weather,
        } => commands::ingest(&ctx, input, format, weather),
        Command::Synth => commands::synth(&ctx),
        Command::Preprocess { source } => commands::preprocess(&ctx, source),
        Command::Partition => commands::partition(&ctx),
        Command::Train { model, full_repro } => commands::train_cmd(&ctx, model, full_repro),
        Command::Eval {
            model,
            kaggle_out,
            snippet_seconds,
            full_repro,
        } => commands::eval_cmd(
            &ctx,
            EvalArgs {
                kind: model,
                kaggle_out,
                snippet_seconds,
                full_repro,
            },
        ),
        Command::Predict { model, input, out } => {
            commands::predict(&ctx, model, &input, out.as_deref())
        }
        Command::Route {
            model,
            input,
            n,
            nodes,
            edges,
            out,
        } => commands::route(
            &ctx,
            RouteArgs {
                kind: model,
                input,
                n,
                nodes,
                edges,
                out,
            },
        ),
        Command::ExportRegions { out } => commands::export_regions(&ctx, out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            let code = if e.use_stderr() {
                EXIT_VALIDATION
            } else {
                EXIT_OK
            };
            return ExitCode::from(code as u8);
        }
    };
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
