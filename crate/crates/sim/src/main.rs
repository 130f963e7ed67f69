//! Scenario runner for the reminder engine.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use mama_core::sim::batch::{generate_many, verify, verify_many, verify_many_sequential, Verdict};
use mama_core::sim::gen::{generate, GenParams};
use mama_core::sim::{oracle_replay, run_scenario, Scenario, ScenarioError, SimError};

#[derive(Parser)]
#[command(version, about)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scenario through the engine and print its transcript.
    Run {
        scenario: PathBuf,
        /// Seed for the scenario's generated behaviour; overrides the file.
        #[arg(long)]
        seed: Option<u64>,
        /// Write the transcript here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the reference model's transcript for a scenario.
    Oracle {
        scenario: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check that engine and reference model agree on each scenario.
    Verify {
        #[arg(required = true)]
        scenarios: Vec<PathBuf>,
    },
    /// Print a random scenario.
    Gen {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 7)]
        days: u32,
        #[arg(long, default_value_t = 5)]
        meds: u32,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate and verify many scenarios from consecutive seeds.
    Batch {
        #[arg(long, default_value_t = 1000)]
        count: u64,
        #[arg(long, default_value_t = 0)]
        base: u64,
        #[arg(long, default_value_t = 7)]
        days: u32,
        #[arg(long, default_value_t = 5)]
        meds: u32,
        /// Verify one scenario after another instead of in parallel.
        #[arg(long)]
        sequential: bool,
    },
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Scenario { path: PathBuf, source: ScenarioError },
    #[error("{path}: {source}")]
    Sim { path: PathBuf, source: SimError },
    #[error("{0} of {1} scenarios disagree")]
    Disagree(usize, usize),
}

fn load(path: &Path) -> Result<Scenario, CliError> {
    let text = std::fs::read_to_string(path).map_err(|source| CliError::Io { path: path.into(), source })?;
    Scenario::from_toml(&text).map_err(|source| CliError::Scenario { path: path.into(), source })
}

fn emit(text: &str, out: Option<&Path>) -> Result<(), CliError> {
    match out {
        Some(path) => std::fs::write(path, text).map_err(|source| CliError::Io { path: path.into(), source }),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn describe(v: &Verdict) -> String {
    match v {
        Verdict::Match { lines } => format!("ok ({lines} lines)"),
        Verdict::Mismatch { index, engine, oracle } => format!(
            "MISMATCH at line {}\n  engine: {}\n  oracle: {}",
            index + 1,
            engine.as_deref().unwrap_or("<end>"),
            oracle.as_deref().unwrap_or("<end>")
        ),
        Verdict::Error(e) => format!("ERROR {e}"),
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Cmd::Run { scenario, seed, out } => {
            let mut s = load(&scenario)?;
            if let Some(seed) = seed {
                s.seed = seed;
            }
            let t = run_scenario(&s).map_err(|source| CliError::Sim { path: scenario.clone(), source })?;
            emit(&t.render(), out.as_deref())
        }
        Cmd::Oracle { scenario, out } => {
            let s = load(&scenario)?;
            let t = oracle_replay(&s).map_err(|source| CliError::Scenario { path: scenario.clone(), source })?;
            emit(&t.render(), out.as_deref())
        }
        Cmd::Verify { scenarios } => {
            let mut bad = 0;
            for path in &scenarios {
                let v = verify(&load(path)?);
                bad += usize::from(!v.is_match());
                println!("{}: {}", path.display(), describe(&v));
            }
            if bad > 0 {
                return Err(CliError::Disagree(bad, scenarios.len()));
            }
            Ok(())
        }
        Cmd::Gen { seed, days, meds, out } => {
            emit(&generate(seed, GenParams { max_days: days, max_meds: meds }).to_toml(), out.as_deref())
        }
        Cmd::Batch { count, base, days, meds, sequential } => {
            let scenarios = generate_many(base, count, GenParams { max_days: days, max_meds: meds });
            let t0 = Instant::now();
            let verdicts = if sequential { verify_many_sequential(&scenarios) } else { verify_many(&scenarios) };
            let elapsed = t0.elapsed();
            let mut bad = 0;
            for (s, v) in scenarios.iter().zip(&verdicts) {
                if !v.is_match() {
                    bad += 1;
                    println!("seed {}: {}", s.seed, describe(v));
                }
            }
            let lines: usize = verdicts.iter().map(|v| if let Verdict::Match { lines } = v { *lines } else { 0 }).sum();
            println!("{} scenarios, {} agree, {lines} transcript lines, {:.2?}", count, count as usize - bad, elapsed);
            if bad > 0 {
                return Err(CliError::Disagree(bad, scenarios.len()));
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
