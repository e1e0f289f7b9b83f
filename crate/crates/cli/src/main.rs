//! `mildspde` — configuration-driven experiment runner for the spectral
//! engine. Parses and validates a TOML config, runs one named experiment,
//! and persists `report.txt`, `results.csv`, and `config.echo` under the
//! output directory.
//!
//! Exit codes: 0 all assertions passed; 1 an assertion failed or the engine
//! refused the run (the failing inequality is printed and recorded);
//! 2 configuration error (no artifacts are written').

mod config;
mod experiments;

use clap::{Parser, Subcommand};
use config::Config;
use experiments::{CsvRow, Outcome, EXPERIMENTS};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "mildspde", version, about = "Spectral mild-solution experiment runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment from a TOML configuration.
    Run {
        /// Path to the configuration file.
        #[arg(long)]
        config: PathBuf,
        /// Experiment name.
        #[arg(long)]
        experiment: String,
        /// Output directory; artifacts land in <out>/<experiment>/.
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Rayon thread-pool size (fallback: MILDSPDE_THREADS, then rayon's
        /// default).
        #[arg(long)]
        threads: Option<usize>,
        /// Override the seed recorded in the configuration.
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run {
            config,
            experiment,
            out,
            threads,
            seed,
        } => run(&config, &experiment, &out, threads, seed),
    }
}

fn configure_threads(flag: Option<usize>) -> Result<(), String> {
    let n = match flag {
        Some(n) => Some(n),
        None => match std::env::var("MILDSPDE_THREADS") {
            Ok(v) => Some(
                v.parse::<usize>()
                    .map_err(|_| format!("MILDSPDE_THREADS = '{v}' is not a thread count"))?,
            ),
            Err(_) => None,
        },
    };
    if let Some(n) = n {
        if n == 0 {
            return Err("thread count must be ≥ 1".into());
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| format!("cannot size the thread pool: {e}"))?;
    }
    Ok(())
}

fn run(
    config_path: &Path,
    experiment: &str,
    out_root: &Path,
    threads: Option<usize>,
    seed: Option<u64>,
) -> ExitCode {
    // Everything up to the experiment dispatch is configuration: fail with
    // exit 2 and write nothing.
    if let Err(msg) = configure_threads(threads) {
        eprintln!("config error: {msg}");
        return ExitCode::from(2);
    }
    if !EXPERIMENTS.contains(&experiment) {
        eprintln!(
            "config error: unknown experiment '{experiment}' (known: {})",
            EXPERIMENTS.join(", ")
        );
        return ExitCode::from(2);
    }
    let mut cfg = match Config::load(config_path) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("config error: {e:#}");
            return ExitCode::from(2);
        }
    };
    if let Some(s) = seed {
        cfg.run.seed = s;
    }
    cfg.experiment = Some(experiment.to_string());
    let built = match cfg.build() {
        Ok(b) => b,
        Err(e) => {
            eprintln!("config error: {e:#}");
            return ExitCode::from(2);
        }
    };

    // From here on the run happened: artifacts are written even on failure.
    let outcome = match experiments::run(experiment, &cfg, &built) {
        Ok(outcome) => outcome,
        Err(e) => {
            let mut failed = Outcome {
                lines: Vec::new(),
                rows: Vec::new(),
                failures: Vec::new(),
            };
            failed.lines.push(format!("FAILED: {e:#}"));
            failed.failures.push(format!("{e:#}"));
            failed
        }
    };

    let dir = out_root.join(experiment);
    if let Err(e) = write_artifacts(&dir, &cfg, &outcome) {
        eprintln!("cannot write artifacts under {}: {e:#}", dir.display());
        return ExitCode::from(1);
    }

    for failure in &outcome.failures {
        eprintln!("assertion failed: {failure}");
    }
    if outcome.failures.is_empty() {
        println!(
            "{experiment}: PASS ({} report lines, {} csv rows) -> {}",
            outcome.lines.len(),
            outcome.rows.len(),
            dir.display()
        );
        ExitCode::SUCCESS
    } else {
        println!(
            "{experiment}: FAIL ({} assertions) -> {}",
            outcome.failures.len(),
            dir.display()
        );
        ExitCode::from(1)
    }
}

fn write_artifacts(dir: &Path, cfg: &Config, outcome: &Outcome) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir)?;

    let mut report = String::new();
    for line in &outcome.lines {
        report.push_str(line);
        report.push('\n');
    }
    if outcome.failures.is_empty() {
        report.push_str("PASS\n");
    } else {
        let _ = writeln!(report, "FAIL ({} assertions)", outcome.failures.len());
        for failure in &outcome.failures {
            let _ = writeln!(report, "  {failure}");
        }
    }
    std::fs::write(dir.join("report.txt"), report)?;

    std::fs::write(dir.join("results.csv"), render_csv(&outcome.rows))?;

    let echo = toml::to_string_pretty(cfg)?;
    std::fs::write(dir.join("config.echo"), echo)?;
    Ok(())
}

/// Render rows deterministically: shortest round-trip float formatting,
/// `\n` newlines, fixed header. Byte-identical output for identical inputs
/// regardless of thread count.
fn render_csv(rows: &[CsvRow]) -> String {
    let mut text = String::with_capacity(32 * (rows.len() + 1));
    text.push_str("path,t,mode,re,im\n");
    for row in rows {
        let _ = writeln!(
            text,
            "{},{},{},{},{}",
            row.path, row.t, row.mode, row.re, row.im
        );
    }
    text
}
