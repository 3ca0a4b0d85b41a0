// SPDX-License-Identifier: Apache-2.0
//! Rule tables and the secure world's resource list.
//!
//! A fixture directory may hold any subset of the rule files plus
//! `resources.tsv`; whatever is missing falls back to the bundled copy.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use sptm_model::exclave_resources::{ResourceInfo, ResourceKind};
use sptm_model::rules::{self, DataError, RuleSet, RuleSources, RULE_FILES};
use thiserror::Error;

pub const RESOURCES_FILE: &str = "resources.tsv";

const BUILTIN_RESOURCES: &str = include_str!("../fixtures/resources.tsv");

#[derive(Debug, Error)]
pub enum FixtureError {
    #[error("cannot read {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Debug, Clone)]
pub struct Fixtures {
    pub rules: RuleSet,
    pub resources: Vec<ResourceInfo>,
}

impl Fixtures {
    pub fn builtin() -> Self {
        Self {
            rules: RuleSet::builtin(),
            resources: parse_resources(BUILTIN_RESOURCES).expect("bundled resource list is valid"),
        }
    }

    /// Files present in `dir` replace their bundled counterparts.
    pub fn load(dir: &Path) -> Result<Self, FixtureError> {
        let mut texts = BTreeMap::new();
        for name in RULE_FILES.into_iter().chain([RESOURCES_FILE]) {
            let path = dir.join(name);
            match fs::read_to_string(&path) {
                Ok(text) => {
                    texts.insert(name, text);
                }
                Err(e) if e.kind() == io::ErrorKind::NotFound => {}
                Err(source) => return Err(FixtureError::Io { path, source }),
            }
        }
        let builtin = RuleSources::builtin();
        let sources = RuleSources::from_lookup(|name| match texts.get(name) {
            Some(t) => t.as_str(),
            None => builtin.get(name).unwrap_or_default(),
        });
        let rules = RuleSet::load(&sources)?;
        let resources = parse_resources(texts.get(RESOURCES_FILE).map_or(BUILTIN_RESOURCES, String::as_str))?;
        Ok(Self { rules, resources })
    }
}

/// `domain  name  type` rows; the type accepts the short or prefixed name.
pub fn parse_resources(text: &str) -> Result<Vec<ResourceInfo>, DataError> {
    rules::rows(RESOURCES_FILE, text)
        .map(|row| {
            let kind = row.cell(2)?;
            Ok(ResourceInfo {
                domain: row.cell(0)?.to_string(),
                name: row.cell(1)?.to_string(),
                kind: ResourceKind::parse(kind).ok_or_else(|| row.error(format!("unknown resource type {kind:?}")))?,
                id: None,
            })
        })
        .collect()
}
