use std::path::PathBuf;
use std::process::ExitCode;

use airvote::cli;
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "airvote", version, about = "Hierarchical vote over a fading multiple-access channel")]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment section of a config and write metrics.csv / run.json.
    Train {
        config: PathBuf,
        /// Output directory (overrides AIRVOTE_OUT and the config).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the Monte Carlo bound suite; exits 3 if any bound is violated.
    ValidateBounds {
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print per-round operation counts for a scheme.
    Counts {
        /// hierarchical | digital_gm | rotaf | aircomp_gm
        #[arg(long)]
        scheme: String,
        #[arg(long, short = 'k', default_value_t = 50)]
        k: usize,
        #[arg(long, short = 'p', default_value_t = 0.1)]
        p: f64,
        /// Cluster count for rotaf.
        #[arg(long, short = 'g', default_value_t = 10)]
        g: usize,
        /// Weiszfeld iterations for aircomp_gm.
        #[arg(long, short = 'u', default_value_t = 200)]
        u: usize,
    },
}

fn main() -> ExitCode {
    let args = Args::parse();
    let code = match args.command {
        Command::Train { config, out } => cli::cmd_train(&config, out.as_deref()),
        Command::ValidateBounds { config, out } => cli::cmd_validate_bounds(&config, out.as_deref()),
        Command::Counts { scheme, k, p, g, u } => cli::cmd_counts(&scheme, k, p, g, u),
    };
    ExitCode::from(code as u8)
}
