//! Command-line driver: phantom generation, training, attribution and the
//! voxel-inversion scenario evaluation, with reproducible artifact dirs.

mod commands;
mod config;

use clap::{Parser, Subcommand};
use config::RunConfig;
use relvox_core::error::Error;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "relvox", version, about = "volumetric attribution toolkit")]
struct Cli {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override every section's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for batch and pool fan-out.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Enable 64-bit verification passes.
    #[arg(long = "f64-checks", global = true, default_value_t = false)]
    f64_checks: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic phantom dataset directory.
    GenPhantom {
        #[arg(long)]
        out: PathBuf,
    },
    /// Cross-validated training; writes checkpoints and metrics.
    Train {
        /// Dataset directory produced by gen-phantom.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write relevance bundles per sample per scenario.
    Explain {
        #[arg(long)]
        data: PathBuf,
        /// Training output directory (checkpoints + summary).
        #[arg(long)]
        train_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Restrict to one scenario id.
        #[arg(long)]
        scenario: Option<u8>,
        /// Restrict to one subject id.
        #[arg(long)]
        subject: Option<u32>,
    },
    /// Run the voxel-inversion scenario grid and write the ranked report.
    Scenarios {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        train_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render PGM montages and a Markdown summary from a scenarios run.
    Report {
        /// Output directory of a `scenarios` run.
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code_for(err: &Error) -> (u8, &'static str) {
    match err {
        Error::Config(_) | Error::Json(_) => (2, "E_CONFIG"),
        Error::Data(_) | Error::ShapeMismatch { .. } | Error::Format { .. } | Error::Io(_) => {
            (3, "E_DATA")
        }
        Error::Numeric { .. } => (4, "E_NUMERIC"),
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    let cfg = RunConfig::load(cli.config.as_deref())?.with_overrides(cli.seed, cli.threads);
    match &cli.cmd {
        Cmd::GenPhantom { out } => commands::gen_phantom(&cfg, out),
        Cmd::Train { data, out } => commands::train(&cfg, data, out, cli.f64_checks),
        Cmd::Explain { data, train_dir, out, scenario, subject } => {
            commands::explain(&cfg, data, train_dir, out, *scenario, *subject, cli.f64_checks)
        }
        Cmd::Scenarios { data, train_dir, out } => {
            commands::scenarios_cmd(&cfg, data, train_dir, out, cli.f64_checks)
        }
        Cmd::Report { run, out } => commands::report_cmd(run, out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (code, tag) = exit_code_for(&e);
            eprintln!("error[{}]: {}", tag, e);
            ExitCode::from(code)
        }
    }
}
