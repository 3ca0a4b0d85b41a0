// SPDX-License-Identifier: Apache-2.0
//! `sptm-sim run <scenario>` and `sptm-sim dump <table>`.
//!
//! Exit status: 0 when every step met its expectation, 1 on a step
//! mismatch, 2 when the scenario or its fixtures cannot be loaded.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sptm_model::system::Config;
use sptm_sim::{dump, load_scenario, run, Fixtures, EXIT_PARSE};

#[derive(Debug, Parser)]
#[command(name = "sptm-sim", version, about = "Deterministic SPTM/TXM/SK/Exclaves simulator")]
struct Cli {
    /// Directory whose rule tables and resources.tsv replace the bundled copies.
    #[arg(long, global = true)]
    fixtures: Option<PathBuf>,
    /// Named-buffer creation reports status 0x46, as shipped firmware does.
    #[arg(long, global = true)]
    strict_firmware: bool,
    /// SPRR mismatches while mapping are logged instead of refused.
    #[arg(long, global = true)]
    relax_sprr: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run a scenario script against a fresh world.
    Run {
        scenario: PathBuf,
        /// Write the trace here instead of standard output.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Print a loaded rule table.
    Dump {
        #[arg(value_name = "TABLE")]
        table: String,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let config = Config { strict_firmware: cli.strict_firmware, relax_sprr: cli.relax_sprr, ..Config::default() };
    match cli.command {
        Command::Run { scenario, trace } => {
            let (scenario, fixtures) = match load_scenario(&scenario, cli.fixtures.as_deref()) {
                Ok(v) => v,
                Err(e) => {
                    eprintln!("sptm-sim: {e}");
                    return ExitCode::from(EXIT_PARSE);
                }
            };
            let report = run(&scenario, &fixtures, config);
            let text = report.trace.render();
            match trace {
                Some(path) => {
                    if let Err(e) = fs::write(&path, text) {
                        eprintln!("sptm-sim: cannot write {}: {e}", path.display());
                        return ExitCode::from(EXIT_PARSE);
                    }
                }
                None => print!("{text}"),
            }
            for m in report.mismatches() {
                eprintln!("{}: {m}", scenario.name);
            }
            ExitCode::from(report.exit_code())
        }
        Command::Dump { table } => {
            let fixtures = match cli.fixtures.as_deref().map(Fixtures::load).transpose() {
                Ok(f) => f.unwrap_or_else(Fixtures::builtin),
                Err(e) => {
                    eprintln!("sptm-sim: {e}");
                    return ExitCode::from(EXIT_PARSE);
                }
            };
            match dump::dump(&fixtures.rules, &table) {
                Ok(text) => {
                    print!("{text}");
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("sptm-sim: {e}");
                    ExitCode::from(EXIT_PARSE)
                }
            }
        }
    }
}
