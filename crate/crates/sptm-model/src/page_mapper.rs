// SPDX-License-Identifier: Apache-2.0
//! Page-mapping policy: which frame types may be mapped, into which tables.

use alloc::vec::Vec;

use thiserror::Error;

use crate::core_model::{DomainCode, PteBits, Status};
use crate::frame_table::{FrameTable, FrameType, FrameTypeSet};
use crate::rules::{self, DataError};

/// A type is XNU-mappable iff its bit is clear.
pub const XNU_MAPPABLE_MASK: u64 = 0x4fff_ffd1_c0fe_177e;

/// Types XNU may target from a page table entry.
pub const fn xnu_mappable_set() -> FrameTypeSet {
    FrameTypeSet::from_bits(!XNU_MAPPABLE_MASK)
}

/// How a table row's numeric mask relates to its named types.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskStatus {
    /// Mask bits equal the named set.
    Exact,
    /// Mask disagrees with the named set; the names are authoritative.
    Drift,
    /// Row admits every code.
    Wildcard,
}

impl MaskStatus {
    pub const fn name(self) -> &'static str {
        match self {
            Self::Exact => "ok",
            Self::Drift => "drift",
            Self::Wildcard => "wildcard",
        }
    }
}

/// Frame types that may be mapped into a table of `table_type`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TableMapRule {
    pub table_type: FrameType,
    pub mask: u64,
    pub allowed_frame_types: FrameTypeSet,
    pub status: MaskStatus,
}

/// Per-table rules plus the XNU mappable set, cross-checked at load.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MappingRules {
    tables: Vec<TableMapRule>,
}

impl MappingRules {
    /// Rejects any row whose mask and names disagree in the wrong direction.
    pub fn parse(table_map_rules: &str, xnu_mappable: &str) -> Result<Self, DataError> {
        let mut tables: Vec<TableMapRule> = Vec::new();
        for row in rules::rows("table_map_rules.tsv", table_map_rules) {
            let code = row.int(0)?;
            let table_type = u8::try_from(code)
                .ok()
                .and_then(FrameType::new)
                .filter(|t| t.is_assignable() && t.name() == row.cell(1).unwrap_or(""))
                .ok_or_else(|| row.error("table type code and name disagree"))?;
            let mask = row.int(2)?;
            let status = match row.cell(4)? {
                "ok" => MaskStatus::Exact,
                "drift" => MaskStatus::Drift,
                "wildcard" => MaskStatus::Wildcard,
                s => return Err(row.error(alloc::format!("unknown status {s:?}"))),
            };
            let allowed = match row.opt(3) {
                Some("*") => FrameTypeSet::ALL_CODES,
                _ => row
                    .list(3)
                    .iter()
                    .map(|s| FrameType::parse(s).ok_or_else(|| row.error(alloc::format!("unknown type {s:?}"))))
                    .collect::<Result<_, _>>()?,
            };
            let consistent = match status {
                MaskStatus::Exact => allowed.bits() == mask,
                MaskStatus::Drift => allowed.bits() != mask,
                MaskStatus::Wildcard => allowed == FrameTypeSet::ALL_CODES,
            };
            if !consistent {
                return Err(row.error(alloc::format!(
                    "mask {mask:#x} does not fit status {} for {}",
                    status.name(),
                    table_type
                )));
            }
            if tables.iter().any(|r| r.table_type == table_type) {
                return Err(row.error("duplicate table type"));
            }
            tables.push(TableMapRule { table_type, mask, allowed_frame_types: allowed, status });
        }

        let mut listed = FrameTypeSet::EMPTY;
        for row in rules::rows("xnu_mappable.tsv", xnu_mappable) {
            let t = u8::try_from(row.int(0)?)
                .ok()
                .and_then(FrameType::new)
                .filter(|t| t.name() == row.cell(1).unwrap_or(""))
                .ok_or_else(|| row.error("type code and name disagree"))?;
            listed.insert(t);
        }
        if listed != xnu_mappable_set() {
            return Err(DataError::new(
                "xnu_mappable.tsv",
                0,
                alloc::format!("listed types differ from the mask decode: {}", xnu_mappable_set()),
            ));
        }
        Ok(Self { tables })
    }

    pub fn rules(&self) -> &[TableMapRule] {
        &self.tables
    }

    /// Types that may back a translation table.
    pub fn valid_table_types(&self) -> FrameTypeSet {
        self.tables.iter().map(|r| r.table_type).collect()
    }

    pub fn table_map_set(&self, table_type: FrameType) -> Result<FrameTypeSet, MapError> {
        self.tables
            .iter()
            .find(|r| r.table_type == table_type)
            .map(|r| r.allowed_frame_types)
            .ok_or(MapError::InvalidTableType(table_type))
    }

    pub fn drift_rows(&self) -> impl Iterator<Item = &TableMapRule> {
        self.tables.iter().filter(|r| r.status == MaskStatus::Drift)
    }
}

/// Mapping failure; the frame table is never changed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum MapError {
    #[error("frame {0} is not managed")]
    UnmanagedFrame(usize),
    #[error("frame {0} is in use")]
    FrameBusy(usize),
    #[error("{0} frames may not be mapped by XNU")]
    FrameTypeNotMappable(FrameType),
    #[error("{0} is not a translation table type")]
    InvalidTableType(FrameType),
    #[error("{target} may not be mapped into a {table} table")]
    TableMapDenied { table: FrameType, target: FrameType },
    #[error("entry selects SPRR index {got:#x}; {target} requires {expected:#x}")]
    SprrIndexDenied { target: FrameType, expected: u8, got: u8 },
}

impl Status for MapError {
    fn status_name(&self) -> &'static str {
        match self {
            Self::UnmanagedFrame(_) => "UnmanagedFrame",
            Self::FrameBusy(_) => "FrameBusy",
            Self::FrameTypeNotMappable(_) => "FrameTypeNotMappable",
            Self::InvalidTableType(_) => "InvalidTableType",
            Self::TableMapDenied { .. } => "TableMapDenied",
            Self::SprrIndexDenied { .. } => "SprrIndexDenied",
        }
    }
}

/// A recorded leaf mapping.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Mapping {
    pub table_frame: usize,
    pub va: u64,
    pub target_frame: usize,
    pub pte: PteBits,
}

/// One address space; every table frame has a valid table type when added.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PageTableModel {
    pub root_frame: usize,
    pub table_frames: Vec<usize>,
    pub mappings: Vec<Mapping>,
}

impl PageTableModel {
    pub fn new(root_frame: usize) -> Self {
        Self { root_frame, table_frames: alloc::vec![root_frame], mappings: Vec::new() }
    }
}

/// Result of a mapping; a warning is present only with relaxed SPRR checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MapOutcome {
    pub mapping: Mapping,
    pub sprr_warning: Option<MapError>,
}

/// Mapping policy over a rule set.
#[derive(Debug, Clone)]
pub struct PageMapper {
    rules: MappingRules,
    /// Downgrades the SPRR index check to a warning.
    pub relax_sprr: bool,
}

impl PageMapper {
    pub fn new(rules: MappingRules) -> Self {
        Self { rules, relax_sprr: false }
    }

    pub fn rules(&self) -> &MappingRules {
        &self.rules
    }

    /// Checks in order: XNU mappability (XNU callers only), table type,
    /// per-table set, SPRR index. Frame types are never modified.
    #[allow(clippy::too_many_arguments)]
    pub fn map_page(
        &self,
        space: &mut PageTableModel,
        frames: &mut FrameTable,
        caller: DomainCode,
        ttep: usize,
        va: u64,
        target_frame: usize,
        pte: PteBits,
    ) -> Result<MapOutcome, MapError> {
        let table_type = frames.frame_type_of(ttep).map_err(|_| MapError::UnmanagedFrame(ttep))?;
        let target_type = frames.frame_type_of(target_frame).map_err(|_| MapError::UnmanagedFrame(target_frame))?;
        frames.acquire(target_frame).map_err(|_| MapError::FrameBusy(target_frame))?;
        let checked = self.check(frames, caller, table_type, target_type, pte);
        frames.release(target_frame);
        let sprr_warning = checked?;
        let mapping = Mapping { table_frame: ttep, va, target_frame, pte };
        if !space.table_frames.contains(&ttep) {
            space.table_frames.push(ttep);
        }
        space.mappings.push(mapping);
        Ok(MapOutcome { mapping, sprr_warning })
    }

    fn check(
        &self,
        frames: &FrameTable,
        caller: DomainCode,
        table_type: FrameType,
        target_type: FrameType,
        pte: PteBits,
    ) -> Result<Option<MapError>, MapError> {
        if caller == DomainCode::Xnu && !xnu_mappable_set().contains(target_type) {
            return Err(MapError::FrameTypeNotMappable(target_type));
        }
        let allowed = self.rules.table_map_set(table_type)?;
        if !allowed.contains(target_type) {
            return Err(MapError::TableMapDenied { table: table_type, target: target_type });
        }
        // Types without an index carry no constraint.
        let Some(expected) = frames.rules().sprr_index_for_type(target_type) else {
            return Ok(None);
        };
        let got = pte.sprr_index();
        if got == expected {
            return Ok(None);
        }
        let err = MapError::SprrIndexDenied { target: target_type, expected, got };
        if self.relax_sprr {
            Ok(Some(err))
        } else {
            Err(err)
        }
    }
}
