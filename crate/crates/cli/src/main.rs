use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use qfibound_cli::commands::{fig2_defaults, run, Command, RunError, RunOptions};
use qfibound_cli::config::{self, ConfigError};

/// Environment variable naming the output directory when `--out` is absent.
const OUT_DIR_ENV: &str = "QFIBOUND_OUT_DIR";

#[derive(Parser)]
#[command(name = "qfibound", version, about = "Quantum Fisher information bounds and error-correction protocols")]
struct Cli {
    #[command(subcommand)]
    command: Sub,
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (falls back to $QFIBOUND_OUT_DIR, then the working directory).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Configuration edit as dot.path=value; repeatable.
    #[arg(long = "override", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Also write an SVG chart next to each CSV.
    #[arg(long, global = true)]
    plot: bool,
}

#[derive(Subcommand)]
enum Sub {
    /// DHLS/DHNLS classification on the time grid.
    Classify,
    /// Integrated upper bound on the QFI.
    Bound,
    /// Asymptotic branch of the bound against the catalog closed form.
    Asymptote,
    /// Simulated free-evolution QFI with trace and positivity diagnostics.
    Oracle,
    /// Exact error correction with the optimal code path.
    Qec,
    /// Approximate error correction with ε-perturbed codes.
    Aqec {
        /// Code parameter ε in (0, 1).
        #[arg(long, default_value_t = 0.1)]
        epsilon_code: f64,
    },
    /// Bound trajectories, asymptotes and tail exponents for the four catalog panels.
    #[command(name = "reproduce-fig2")]
    ReproduceFig2,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (command, epsilon_code) = match cli.command {
        Sub::Classify => (Command::Classify, 0.1),
        Sub::Bound => (Command::Bound, 0.1),
        Sub::Asymptote => (Command::Asymptote, 0.1),
        Sub::Oracle => (Command::Oracle, 0.1),
        Sub::Qec => (Command::Qec, 0.1),
        Sub::Aqec { epsilon_code } => (Command::Aqec, epsilon_code),
        Sub::ReproduceFig2 => (Command::ReproduceFig2, 0.1),
    };
    let cfg = match (&cli.config, command) {
        (Some(path), _) => config::load(path, &cli.overrides),
        (None, Command::ReproduceFig2) => config::from_defaults(&fig2_defaults(), &cli.overrides),
        (None, _) => Err(ConfigError { location: "--config".into(), message: format!("'{}' needs a configuration file", command.name()) }),
    };
    let cfg = match cfg {
        Ok(c) => c,
        Err(e) => {
            eprintln!("{}", RunError::Config(e));
            return ExitCode::from(2);
        }
    };
    let out_dir = cli.out.or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from)).unwrap_or_else(|| PathBuf::from("."));
    let opts = RunOptions { out_dir, plot: cli.plot, epsilon_code };
    match run(command, &cfg, &opts) {
        Ok(report) => {
            for line in &report.summary {
                println!("{line}");
            }
            for w in &report.warnings {
                eprintln!("warning: {w}");
            }
            for f in &report.files {
                println!("wrote {}", f.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}
