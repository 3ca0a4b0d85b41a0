// SPDX-License-Identifier: Apache-2.0
//! Scenario-driven front end for the `sptm-model` world: loads fixtures,
//! runs line-oriented scripts, writes deterministic traces and dumps the
//! loaded rule tables.

pub mod dump;
pub mod fixtures;
pub mod runner;
pub mod scenario;

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use sptm_model::system::Config;
use thiserror::Error;

pub use fixtures::{FixtureError, Fixtures};
pub use runner::{run, RunReport, EXIT_MISMATCH, EXIT_OK, EXIT_PARSE};
pub use scenario::{parse, ParseError, Scenario};

/// Anything that stops a scenario before its first step runs.
#[derive(Debug, Error)]
pub enum LoadError {
    #[error("cannot read {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{}: {source}", path.display())]
    Parse {
        path: PathBuf,
        #[source]
        source: ParseError,
    },
    #[error(transparent)]
    Fixture(#[from] FixtureError),
}

/// Reads and parses a script, then loads the fixtures it needs:
/// `fixtures_override`, else the script's own `fixtures` line, else the
/// bundled set.
pub fn load_scenario(path: &Path, fixtures_override: Option<&Path>) -> Result<(Scenario, Fixtures), LoadError> {
    let text = fs::read_to_string(path).map_err(|source| LoadError::Io { path: path.into(), source })?;
    let name = path.file_stem().map_or_else(|| "scenario".into(), |s| s.to_string_lossy().into_owned());
    let scenario = parse(&name, &text).map_err(|source| LoadError::Parse { path: path.into(), source })?;
    let dir = match (fixtures_override, &scenario.fixtures) {
        (Some(d), _) => Some(d.to_path_buf()),
        (None, Some(rel)) => Some(path.parent().unwrap_or(Path::new(".")).join(rel)),
        (None, None) => None,
    };
    let fixtures = match dir {
        Some(d) => Fixtures::load(&d)?,
        None => Fixtures::builtin(),
    };
    Ok((scenario, fixtures))
}

/// Convenience for callers that only need the trace text and exit code.
pub fn run_file(path: &Path, fixtures: Option<&Path>, config: Config) -> Result<RunReport, LoadError> {
    let (scenario, fixtures) = load_scenario(path, fixtures)?;
    Ok(run(&scenario, &fixtures, config))
}
