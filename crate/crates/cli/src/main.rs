//! `craw`: run scenarios, compare run directories, validate scenario files.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use craw_core::report::{compare, write_bundle};
use craw_core::{run_all, Scenario, Scheme};

#[derive(Parser)]
#[command(name = "craw", about = "Scenario runner for secure multicast re-keying", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write its result bundle (metrics.csv, trace.log, report.txt, ...)
    Run {
        scenario: PathBuf,
        /// Output directory [default: runs/<scenario name>]
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Run only this scheme: ckc_craw, ckc_plain or lkh
        #[arg(long)]
        scheme: Option<Scheme>,
        /// Set a scenario field, e.g. delays.t_probe=0.02 (repeatable)
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Compare two or more run directories
    Compare {
        #[arg(required = true, num_args = 2..)]
        dirs: Vec<PathBuf>,
    },
    /// Check a scenario file without running it
    Validate { scenario: PathBuf },
}

fn load(path: &PathBuf, overrides: &[String]) -> Result<Scenario> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    Scenario::from_json_with_overrides(&text, overrides).with_context(|| format!("invalid scenario {}", path.display()))
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run {
            scenario,
            out,
            seed,
            scheme,
            mut overrides,
        } => {
            if let Some(seed) = seed {
                overrides.push(format!("seed={seed}"));
            }
            if let Some(scheme) = scheme {
                overrides.push(format!("schemes=[\"{scheme}\"]"));
            }
            let sc = load(&scenario, &overrides)?;
            let dir = out.unwrap_or_else(|| PathBuf::from("runs").join(&sc.name));
            let outputs = run_all(&sc)?;
            write_bundle(&dir, &sc, &outputs)?;
            println!("wrote {}", dir.display());
        }
        Command::Compare { dirs } => print!("{}", compare(&dirs)?),
        Command::Validate { scenario } => {
            let sc = load(&scenario, &[])?;
            println!("{}: ok ({} areas, {} members, {} events)", sc.name, sc.areas.len(), sc.members.len(), sc.events.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
