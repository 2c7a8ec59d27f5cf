use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use shylab::{cmd_certify, cmd_simulate, cmd_stats, cmd_verify, exit, CliError, ExperimentConfig, Overrides};
use shylab_core::certificates::VerificationReport;

#[derive(Parser)]
#[command(name = "shylab", version, about = "Couplings of reflected Brownian motion in convex domains")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Worker threads (defaults to the available cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Run a coupled ensemble and write trajectories and a summary.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Override the master seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        replicas: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build and verify the configured certificate.
    Certify {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-verify a certificate file.
    Verify {
        certificate: PathBuf,
        /// Grid spacing (half the stored spacing by default).
        #[arg(long)]
        spacing: Option<f64>,
    },
    /// Summarize a directory of trajectory CSVs.
    Stats {
        dir: PathBuf,
        /// Horizons for coupled fractions (repeatable).
        #[arg(long = "horizon")]
        horizons: Vec<f64>,
    },
}

fn load(path: &Path, overrides: Overrides) -> Result<ExperimentConfig, CliError> {
    let mut cfg = ExperimentConfig::load(path)?;
    cfg.apply(&overrides);
    Ok(cfg)
}

/// Print to stdout, ignoring a closed pipe.
fn emit(text: &str) {
    let _ = writeln!(std::io::stdout().lock(), "{text}");
}

fn print_report(r: &VerificationReport) {
    for e in &r.entries {
        emit(&format!(
            "  {:<10} resolution {:.3e}  samples {:>9}  worst margin {:+.3e}",
            e.name, e.resolution, e.samples, e.worst_margin
        ));
    }
    emit(&format!("  tolerance {:.1e}: {}", r.tolerance, if r.pass { "pass" } else { "FAIL" }));
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Simulate { config, seed, replicas, out } => {
            let cfg = load(&config, Overrides { seed, replicas, out })?;
            let o = cmd_simulate(&cfg)?;
            emit(&serde_json::to_string_pretty(&o.report).expect("summary serializes"));
            eprintln!(
                "wrote {} trajectories, {} and {}",
                o.trajectory_files.len(),
                o.summary_path.display(),
                o.checkpoint_path.display()
            );
        }
        Command::Certify { config, out } => {
            let cfg = load(&config, Overrides { out, ..Default::default() })?;
            let o = cmd_certify(&cfg)?;
            emit(&format!("certificate written to {}", o.path.display()));
            print_report(&o.report);
            if let Some(r) = &o.fine_report {
                print_report(r);
            }
        }
        Command::Verify { certificate, spacing } => {
            let (_, report) = cmd_verify(&certificate, spacing)?;
            print_report(&report);
        }
        Command::Stats { dir, horizons } => {
            let s = cmd_stats(&dir, &horizons)?;
            emit(&serde_json::to_string_pretty(&s).expect("stats serialize"));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot set thread count: {e}");
            return ExitCode::from(exit::CONFIG as u8);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::from(exit::OK as u8),
        Err(e) => {
            eprintln!("error: {e}");
            if let CliError::VerificationFailed { report: Some(r), .. } = &e {
                print_report(r);
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
