//! `wgsc` — run identity-check suites for weighted Gaussian calculus from
//! JSON configs and write machine-readable ledgers.
//!
//! Exit codes: 0 every check passed, 1 at least one check failed,
//! 2 configuration problem (bad JSON, unknown check id, missing surface),
//! 3 infrastructure error (engine failure, i/o).

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use wgsc::checks::{find, registry, run_suite, SuiteResult};
use wgsc::config::RunConfig;
use wgsc::EngineError;

/// Write one line to stdout without panicking when the write fails.
///
/// A closed pipe (`wgsc list-checks | head`) means the reader has all the
/// output it wanted, so stop quietly; any other stdout failure is an
/// infrastructure error and uses that exit code.
fn out(line: std::fmt::Arguments<'_>) {
    let mut stdout = std::io::stdout().lock();
    let res = stdout.write_fmt(line).and_then(|()| stdout.write_all(b"\n"));
    if let Err(e) = res {
        if e.kind() == std::io::ErrorKind::BrokenPipe {
            std::process::exit(0);
        }
        eprintln!("error: cannot write to stdout: {e}");
        std::process::exit(3);
    }
}

macro_rules! outln {
    ($($arg:tt)*) => { out(format_args!($($arg)*)) };
}

#[derive(Parser)]
#[command(
    name = "wgsc",
    version,
    about = "Numerical checks for Sobolev calculus with weighted Gaussian measures",
    long_about = "Assembles a Gaussian model, a weight, a level-set surface, and test fields \
                  from a JSON config, runs named identity checks against them, and writes a \
                  CSV ledger plus JSON detail files. Every run with the same config and seed \
                  reproduces its ledger byte for byte."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured check suite (all registered checks when the
    /// config lists none).
    Run {
        /// JSON run config; omitted means the built-in default config.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override the config's random seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the config's Monte Carlo budget.
        #[arg(long)]
        budget: Option<u64>,
        /// Override the output directory for ledger.csv and detail files.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// List every registered check id with a one-line summary.
    ListChecks,
    /// Print what one check verifies: summary, formula, default tolerance.
    Describe {
        /// Check id (hyphens and underscores are interchangeable).
        id: String,
    },
    /// Run a single check against the config.
    Check {
        /// Check id (hyphens and underscores are interchangeable).
        id: String,
        /// JSON run config; omitted means the built-in default config.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override the config's random seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the config's Monte Carlo budget.
        #[arg(long)]
        budget: Option<u64>,
        /// Override the output directory for ledger.csv and detail files.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Run {
            config,
            seed,
            budget,
            out,
        } => execute(config, seed, budget, out, None),
        Command::ListChecks => {
            list_checks();
            0
        }
        Command::Describe { id } => describe(&id),
        Command::Check {
            id,
            config,
            seed,
            budget,
            out,
        } => execute(config, seed, budget, out, Some(id)),
    };
    ExitCode::from(code)
}

fn list_checks() {
    let width = registry().iter().map(|c| c.id.len()).max().unwrap_or(0);
    outln!("{:width$}  summary", "id");
    for def in registry() {
        outln!("{:width$}  {}", def.id, def.summary);
    }
}

fn describe(id: &str) -> u8 {
    match find(id) {
        Ok(def) => {
            outln!("id:       {}", def.id);
            outln!("summary:  {}", def.summary);
            outln!("formula:  {}", def.formula);
            if def.default_floor > 0.0 {
                outln!("floor:    {:.1e} (absolute tolerance floor)", def.default_floor);
            } else {
                outln!("floor:    none (structural pass criterion)");
            }
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn load_config(path: Option<PathBuf>) -> Result<RunConfig, EngineError> {
    match path {
        Some(p) => RunConfig::from_file(&p),
        None => Ok(RunConfig::default_config()),
    }
}

fn execute(
    config: Option<PathBuf>,
    seed: Option<u64>,
    budget: Option<u64>,
    out: Option<PathBuf>,
    single: Option<String>,
) -> u8 {
    let mut cfg = match load_config(config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return 2;
        }
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(b) = budget {
        cfg.budget = b;
    }
    if let Some(o) = out {
        cfg.out = Some(o);
    }
    if let Some(id) = single {
        cfg.suite = vec![id];
    }
    match run_suite(&cfg) {
        Ok(result) => {
            print_summary(&result);
            if result.all_pass {
                0
            } else {
                1
            }
        }
        Err(e) => {
            let code = exit_code_for(&e);
            eprintln!("error: {e}");
            code
        }
    }
}

fn exit_code_for(e: &EngineError) -> u8 {
    match e {
        EngineError::Config(_) | EngineError::UnknownCheck(_) | EngineError::Json(_) => 2,
        _ => 3,
    }
}

fn print_summary(result: &SuiteResult) {
    let width = result
        .outcomes
        .iter()
        .map(|o| o.id.len())
        .max()
        .unwrap_or(0)
        .max(5);
    outln!("{:width$}  rows  verdict", "check");
    let mut total_rows = 0usize;
    for outcome in &result.outcomes {
        total_rows += outcome.rows.len();
        outln!(
            "{:width$}  {:>4}  {}",
            outcome.id,
            outcome.rows.len(),
            if outcome.passed { "PASS" } else { "FAIL" }
        );
        if !outcome.passed {
            for row in outcome.rows.iter().filter(|r| !r.pass) {
                outln!(
                    "  !! {}: |delta| = {:.3e} > tol {:.3e}",
                    row.identity_id, row.delta, row.tol
                );
            }
        }
    }
    outln!(
        "suite: {} ({} checks, {} rows)",
        if result.all_pass { "PASS" } else { "FAIL" },
        result.outcomes.len(),
        total_rows
    );
    outln!("ledger: {}", result.ledger.display());
}
