//! `bode`: run, resume and inspect sequential design campaigns.

mod commands;
mod config;
mod error;
mod oracle;
mod store;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "bode", version, about = "Sequential design of experiments for quantities of interest")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Overrides {
    /// Master seed; overrides the config file and BODE_SEED.
    #[arg(long)]
    seed: Option<u64>,
    /// Use the reduced sampler and quadrature presets.
    #[arg(long)]
    desk_scale: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run a campaign to completion, writing state and traces to --out.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
        /// Continue an existing campaign in --out instead of refusing.
        #[arg(long)]
        resume: bool,
        /// Stop after this many acquisition cycles in this invocation.
        #[arg(long)]
        max_iterations: Option<usize>,
    },
    /// Continue the campaign stored in --out with its saved configuration.
    Resume {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        max_iterations: Option<usize>,
    },
    /// Print the next design as a CSV row without changing the campaign.
    Suggest {
        #[arg(long)]
        out: PathBuf,
        /// Configuration for a campaign directory that does not exist yet.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Append an externally measured observation.
    Record {
        #[arg(long)]
        out: PathBuf,
        /// Design as comma-separated coordinates.
        #[arg(long, allow_hyphen_values = true)]
        x: String,
        #[arg(long, allow_hyphen_values = true)]
        y: f64,
        /// Configuration for a campaign directory that does not exist yet.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Replicated comparison of acquisition functions on builtin benchmarks.
    Compare {
        /// Template configuration; its oracle section is replaced per benchmark.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        benchmarks: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "ekld,us")]
        acquisitions: Vec<String>,
        #[arg(long, default_value_t = 5)]
        replications: usize,
        /// Brute-force evaluations for the reference QoI.
        #[arg(long, default_value_t = 100_000)]
        n_oracle: usize,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Brute-force QoI of a builtin benchmark.
    OracleQoi {
        #[arg(long)]
        benchmark: String,
        #[arg(long, default_value = "expectation")]
        kind: String,
        #[arg(long, default_value_t = 0.025)]
        alpha: f64,
        #[arg(long, default_value_t = 100_000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config, out, overrides, resume, max_iterations } => {
            commands::run(&config, &out, overrides.desk_scale, overrides.seed, resume, max_iterations)
        }
        Command::Resume { out, max_iterations } => commands::resume(&out, max_iterations),
        Command::Suggest { out, config, overrides } => {
            commands::suggest(&out, config.as_deref(), overrides.desk_scale, overrides.seed)
        }
        Command::Record { out, x, y, config, overrides } => {
            commands::record(&out, &x, y, config.as_deref(), overrides.desk_scale, overrides.seed)
        }
        Command::Compare { config, out, benchmarks, acquisitions, replications, n_oracle, overrides } => {
            commands::compare(
                &config,
                &out,
                &benchmarks,
                &acquisitions,
                replications,
                n_oracle,
                overrides.desk_scale,
                overrides.seed,
            )
        }
        Command::OracleQoi { benchmark, kind, alpha, n, seed } => commands::oracle_qoi(&benchmark, &kind, alpha, n, seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("bode: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
