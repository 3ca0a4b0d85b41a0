// SPDX-License-Identifier: Apache-2.0
//! Columnar rule-table format and the bundled rule set.
//!
//! Every table is plain UTF-8 text. One record per line, cells separated by
//! a single TAB. Lines starting with `#` are comments. A cell holding `-` is
//! empty. List cells are comma-separated without spaces. Integers are decimal
//! or `0x`-prefixed hex.

use alloc::string::{String, ToString};
use alloc::vec::Vec;
use thiserror::Error;

use crate::core_model::SprrTable;
use crate::dispatcher::{IommuRegistration, TransitionTable};
use crate::frame_table::FrameRules;
use crate::page_mapper::MappingRules;
use crate::secure_kernel::SkRetypeTable;
use crate::tightbeam::TransportTable;
use crate::txm::SelectorRegistry;

/// A malformed or inconsistent rule table.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{file}:{line}: {reason}")]
pub struct DataError {
    pub file: String,
    pub line: usize,
    pub reason: String,
}

impl DataError {
    pub fn new(file: &str, line: usize, reason: impl Into<String>) -> Self {
        Self { file: file.to_string(), line, reason: reason.into() }
    }
}

/// One non-comment record of a table.
#[derive(Debug, Clone)]
pub struct Row<'a> {
    pub file: &'a str,
    pub line: usize,
    cells: Vec<&'a str>,
}

impl<'a> Row<'a> {
    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn error(&self, reason: impl Into<String>) -> DataError {
        DataError::new(self.file, self.line, reason)
    }

    /// Raw cell text; a missing column is an error.
    pub fn cell(&self, col: usize) -> Result<&'a str, DataError> {
        self.cells.get(col).copied().ok_or_else(|| self.error(alloc::format!("missing column {col}")))
    }

    /// `None` for `-` or a missing trailing column.
    pub fn opt(&self, col: usize) -> Option<&'a str> {
        match self.cells.get(col).copied() {
            None | Some("-") | Some("") => None,
            Some(s) => Some(s),
        }
    }

    pub fn int(&self, col: usize) -> Result<u64, DataError> {
        let s = self.cell(col)?;
        parse_int(s).ok_or_else(|| self.error(alloc::format!("bad integer {s:?}")))
    }

    pub fn opt_int(&self, col: usize) -> Result<Option<u64>, DataError> {
        match self.opt(col) {
            None => Ok(None),
            Some(s) => parse_int(s).map(Some).ok_or_else(|| self.error(alloc::format!("bad integer {s:?}"))),
        }
    }

    /// Comma-separated list; `-` is the empty list.
    pub fn list(&self, col: usize) -> Vec<&'a str> {
        self.opt(col).map(|s| s.split(',').collect()).unwrap_or_default()
    }
}

/// Decimal or `0x`-prefixed hexadecimal.
pub fn parse_int(s: &str) -> Option<u64> {
    let s = s.trim();
    match s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
        Some(hex) => u64::from_str_radix(hex, 16).ok(),
        None => s.parse().ok(),
    }
}

/// Records of `text`, skipping blank and comment lines.
pub fn rows<'a>(file: &'a str, text: &'a str) -> impl Iterator<Item = Row<'a>> {
    text.lines().enumerate().filter_map(move |(i, raw)| {
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            return None;
        }
        Some(Row { file, line: i + 1, cells: line.split('\t').map(str::trim).collect() })
    })
}

/// Header metadata of the form `# key: value`.
pub fn header_value<'a>(text: &'a str, key: &str) -> Option<&'a str> {
    text.lines()
        .filter_map(|l| l.strip_prefix('#'))
        .filter_map(|l| l.trim().strip_prefix(key))
        .find_map(|rest| rest.strip_prefix(':'))
        .map(str::trim)
}

/// Table file names in load order.
pub const RULE_FILES: [&str; 13] = [
    "caller_domains.tsv",
    "retype_transitions.tsv",
    "type_hooks.tsv",
    "sprr_by_type.tsv",
    "sprr_permissions.tsv",
    "table_map_rules.tsv",
    "xnu_mappable.tsv",
    "state_transitions.tsv",
    "iommu_registrations.tsv",
    "txm_selectors.tsv",
    "transports.tsv",
    "sk_retype_calls.tsv",
    "frame_types.tsv",
];

/// Text of every rule table, borrowed from wherever it was read.
#[derive(Debug, Clone, Copy)]
pub struct RuleSources<'a> {
    pub caller_domains: &'a str,
    pub retype_transitions: &'a str,
    pub type_hooks: &'a str,
    pub sprr_by_type: &'a str,
    pub sprr_permissions: &'a str,
    pub table_map_rules: &'a str,
    pub xnu_mappable: &'a str,
    pub state_transitions: &'a str,
    pub iommu_registrations: &'a str,
    pub txm_selectors: &'a str,
    pub transports: &'a str,
    pub sk_retype_calls: &'a str,
    pub frame_types: &'a str,
}

impl RuleSources<'static> {
    /// Tables compiled into the crate.
    pub fn builtin() -> Self {
        Self {
            caller_domains: include_str!("../data/caller_domains.tsv"),
            retype_transitions: include_str!("../data/retype_transitions.tsv"),
            type_hooks: include_str!("../data/type_hooks.tsv"),
            sprr_by_type: include_str!("../data/sprr_by_type.tsv"),
            sprr_permissions: include_str!("../data/sprr_permissions.tsv"),
            table_map_rules: include_str!("../data/table_map_rules.tsv"),
            xnu_mappable: include_str!("../data/xnu_mappable.tsv"),
            state_transitions: include_str!("../data/state_transitions.tsv"),
            iommu_registrations: include_str!("../data/iommu_registrations.tsv"),
            txm_selectors: include_str!("../data/txm_selectors.tsv"),
            transports: include_str!("../data/transports.tsv"),
            sk_retype_calls: include_str!("../data/sk_retype_calls.tsv"),
            frame_types: include_str!("../data/frame_types.tsv"),
        }
    }
}

impl<'a> RuleSources<'a> {
    /// Builds sources from a lookup by file name (see [`RULE_FILES`]).
    pub fn from_lookup(mut get: impl FnMut(&str) -> &'a str) -> Self {
        Self {
            caller_domains: get("caller_domains.tsv"),
            retype_transitions: get("retype_transitions.tsv"),
            type_hooks: get("type_hooks.tsv"),
            sprr_by_type: get("sprr_by_type.tsv"),
            sprr_permissions: get("sprr_permissions.tsv"),
            table_map_rules: get("table_map_rules.tsv"),
            xnu_mappable: get("xnu_mappable.tsv"),
            state_transitions: get("state_transitions.tsv"),
            iommu_registrations: get("iommu_registrations.tsv"),
            txm_selectors: get("txm_selectors.tsv"),
            transports: get("transports.tsv"),
            sk_retype_calls: get("sk_retype_calls.tsv"),
            frame_types: get("frame_types.tsv"),
        }
    }

    /// Text of the table stored under `file`.
    pub fn get(&self, file: &str) -> Option<&'a str> {
        Some(match file {
            "caller_domains.tsv" => self.caller_domains,
            "retype_transitions.tsv" => self.retype_transitions,
            "type_hooks.tsv" => self.type_hooks,
            "sprr_by_type.tsv" => self.sprr_by_type,
            "sprr_permissions.tsv" => self.sprr_permissions,
            "table_map_rules.tsv" => self.table_map_rules,
            "xnu_mappable.tsv" => self.xnu_mappable,
            "state_transitions.tsv" => self.state_transitions,
            "iommu_registrations.tsv" => self.iommu_registrations,
            "txm_selectors.tsv" => self.txm_selectors,
            "transports.tsv" => self.transports,
            "sk_retype_calls.tsv" => self.sk_retype_calls,
            "frame_types.tsv" => self.frame_types,
            _ => return None,
        })
    }
}

/// Every parsed and cross-validated rule table.
#[derive(Debug, Clone)]
pub struct RuleSet {
    pub frames: FrameRules,
    pub mapping: MappingRules,
    pub sprr: SprrTable,
    pub transitions: TransitionTable,
    pub iommus: Vec<IommuRegistration>,
    pub txm_selectors: SelectorRegistry,
    pub transports: TransportTable,
    pub sk_retypes: SkRetypeTable,
}

impl RuleSet {
    pub fn load(src: &RuleSources<'_>) -> Result<Self, DataError> {
        crate::frame_table::check_type_names(src.frame_types)?;
        Ok(Self {
            frames: FrameRules::parse(src.caller_domains, src.retype_transitions, src.type_hooks, src.sprr_by_type)?,
            mapping: MappingRules::parse(src.table_map_rules, src.xnu_mappable)?,
            sprr: SprrTable::parse(src.sprr_permissions)?,
            transitions: TransitionTable::parse(src.state_transitions)?,
            iommus: IommuRegistration::parse_all(src.iommu_registrations)?,
            txm_selectors: SelectorRegistry::parse(src.txm_selectors)?,
            transports: TransportTable::parse(src.transports)?,
            sk_retypes: SkRetypeTable::parse(src.sk_retype_calls)?,
        })
    }

    /// The bundled tables; they are validated by the test suite.
    pub fn builtin() -> Self {
        Self::load(&RuleSources::builtin()).expect("bundled rule tables are valid")
    }
}
