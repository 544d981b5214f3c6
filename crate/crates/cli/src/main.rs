use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dissflow_cli::check::{check, MonitorConfig};
use dissflow_cli::config::output_dir;
use dissflow_cli::figures::demo_figures;
use dissflow_cli::run::{sdot_sweep, simulate, CheckOutcome};
use dissflow_cli::sweep::sweep;
use dissflow_cli::{ExperimentConfig, Result};

#[derive(Parser)]
#[command(name = "dissflow", about = "Perturbed Wasserstein flows with dissipativity monitoring", disable_version_flag = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment.
    Simulate {
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a parameter sweep over the config's [sweep] axis.
    Sweep {
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Certify a logged trajectory against a monitor config.
    Check {
        trajectory: PathBuf,
        monitor: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the geometry demonstration tables.
    DemoFigures { outdir: PathBuf },
    /// Semi-discrete quantization sweep.
    Sdot {
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the version.
    Version,
}

fn report(checks: &[CheckOutcome]) -> bool {
    for c in checks {
        println!("{}", c.line);
    }
    checks.iter().all(|c| c.passed)
}

fn load(path: &Path) -> Result<ExperimentConfig> {
    ExperimentConfig::load(path)
}

fn run(cmd: Command) -> Result<bool> {
    match cmd {
        Command::Simulate { config, out } => {
            let cfg = load(&config)?;
            let dir = output_dir(&cfg, &config, out.as_deref());
            let s = simulate(&cfg, &dir)?;
            for w in &s.warnings {
                eprintln!("warning: {w}");
            }
            println!("output={}", dir.display());
            println!("finalW2={:.6e}", s.final_w2);
            if let Some(p) = &s.plateau {
                println!("plateau={:.6e} stationary={}", p.value, p.stationary);
            }
            Ok(report(&s.checks))
        }
        Command::Sweep { config, out, workers } => {
            let cfg = load(&config)?;
            let dir = output_dir(&cfg, &config, out.as_deref());
            let r = sweep(&cfg, &dir, workers)?;
            println!("output={}", dir.display());
            for row in &r.rows {
                println!("{}={} finalW2={:.6e}", r.axis.name(), row.value, row.mean_final_w2());
            }
            println!("spearman={:.6}", r.spearman);
            if let Some(e) = &r.envelope {
                println!("{}", e.verdict_line());
            }
            if let Some(e) = &r.envelope_error {
                println!("envelope not fitted: {e}");
            }
            Ok(report(&r.checks))
        }
        Command::Check { trajectory, monitor, out } => {
            let m = MonitorConfig::load(&monitor)?;
            let checks = check(&trajectory, &m, out.as_deref())?;
            Ok(report(&checks))
        }
        Command::DemoFigures { outdir } => {
            let s = demo_figures(&outdir)?;
            println!("output={}", outdir.display());
            Ok(report(&s.checks))
        }
        Command::Sdot { config, out } => {
            let cfg = load(&config)?;
            let dir = output_dir(&cfg, &config, out.as_deref());
            let (r, check) = sdot_sweep(&cfg, &dir)?;
            println!("output={}", dir.display());
            println!("slope={:.6} constant={:.6e}", r.slope, r.constant);
            Ok(report(&[check]))
        }
        Command::Version => {
            println!("dissflow {}", env!("CARGO_PKG_VERSION"));
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(3),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
