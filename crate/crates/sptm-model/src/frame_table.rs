// SPDX-License-Identifier: Apache-2.0
//! Physical frame types, ownership rules and the retype pipeline.

use alloc::vec::Vec;
use core::fmt;
use core::num::NonZeroUsize;

use thiserror::Error;

use crate::core_model::{DomainCode, Status};
use crate::rules::{self, DataError};

/// Frame type code. 0..=62 are assignable; 63 is the mask-only sentinel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct FrameType(u8);

macro_rules! frame_types {
    ($($code:literal $name:ident),+ $(,)?) => {
        impl FrameType {
            $(pub const $name: FrameType = FrameType($code);)+
        }
        const NAMES: [&str; 64] = [$(stringify!($name)),+];
    };
}

frame_types! {
    0 SPTM_UNTYPED, 1 SPTM_UNUSED, 2 SPTM_DEFAULT, 3 SPTM_RO,
    4 SPTM_CODE, 5 SPTM_TXM_CODE, 6 SPTM_XNU_CODE, 7 SPTM_XNU_CODE_DBG_RW,
    8 SPTM_KERNEL_ROOT_TABLE, 9 SPTM_PAGE_TABLE, 10 SPTM_IOMMU_BOOTSTRAP, 11 XNU_DEFAULT,
    12 XNU_RO, 13 XNU_RO_DBG_RW, 14 XNU_USER_EXEC, 15 XNU_USER_DEBUG,
    16 XNU_USER_JIT, 17 XNU_USER_ROOT_TABLE, 18 XNU_SHARED_ROOT_TABLE, 19 XNU_PAGE_TABLE,
    20 XNU_PAGE_TABLE_SHARED, 21 XNU_PAGE_TABLE_ROZONE, 22 XNU_PAGE_TABLE_COMMPAGE, 23 XNU_IOMMU,
    24 XNU_ROZONE, 25 XNU_IO, 26 XNU_PROTECTED_IO, 27 XNU_COMMPAGE_RW,
    28 XNU_COMMPAGE_RO, 29 XNU_COMMPAGE_RX, 30 XNU_TAG_STORAGE, 31 XNU_STAGE2_ROOT_TABLE,
    32 XNU_STAGE2_PAGE_TABLE, 33 XNU_KERNEL_RESTRICTED, 34 XNU_RESERVED_1, 35 XNU_RESERVED_2,
    36 XNU_RESTRICTED_IO, 37 XNU_RESTRICTED_IO_TELEMETRY, 38 TXM_DEFAULT, 39 TXM_RO,
    40 TXM_RW, 41 TXM_CPU_STACK, 42 TXM_THREAD_STACK, 43 TXM_ADDRESS_SPACE_TABLE,
    44 TXM_MALLOC_PAGE, 45 TXM_FREE_LIST, 46 TXM_SLAB_TRUST_CACHE, 47 TXM_SLAB_PROFILE,
    48 TXM_SLAB_CODE_SIGNATURE, 49 TXM_SLAB_CODE_REGION, 50 TXM_SLAB_ADDRESS_SPACE, 51 TXM_BUCKET_1024,
    52 TXM_BUCKET_2048, 53 TXM_BUCKET_4096, 54 TXM_BUCKET_8192, 55 TXM_BULK_DATA,
    56 TXM_BULK_DATA_READ_ONLY, 57 TXM_LOG, 58 TXM_SEP_SECURE_CHANNEL, 59 SK_DEFAULT,
    60 SK_SHARED_RO, 61 SK_SHARED_RW, 62 SK_IO, 63 UNKNOWN_TYPE,
}

impl FrameType {
    /// Number of assignable types.
    pub const COUNT: usize = 63;
    /// Highest assignable code.
    pub const MAX_ASSIGNABLE: u8 = 62;

    /// Any code 0..=63.
    pub const fn new(code: u8) -> Option<Self> {
        if code <= 63 {
            Some(Self(code))
        } else {
            None
        }
    }

    pub const fn code(self) -> u8 {
        self.0
    }

    pub const fn is_assignable(self) -> bool {
        self.0 <= Self::MAX_ASSIGNABLE
    }

    pub fn name(self) -> &'static str {
        NAMES[self.0 as usize]
    }

    /// Accepts a name or a numeric code.
    pub fn parse(s: &str) -> Option<Self> {
        match NAMES.iter().position(|n| *n == s) {
            Some(i) => Some(Self(i as u8)),
            None => rules::parse_int(s).and_then(|v| u8::try_from(v).ok()).and_then(Self::new),
        }
    }

    /// The 63 assignable types in code order.
    pub fn all() -> impl Iterator<Item = FrameType> + Clone {
        (0..=Self::MAX_ASSIGNABLE).map(FrameType)
    }
}

impl fmt::Display for FrameType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Set over all 64 type codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct FrameTypeSet(u64);

impl FrameTypeSet {
    pub const EMPTY: Self = Self(0);
    /// Every assignable type.
    pub const ASSIGNABLE: Self = Self((1 << 63) - 1);
    /// Every code including the sentinel.
    pub const ALL_CODES: Self = Self(u64::MAX);

    pub const fn from_bits(bits: u64) -> Self {
        Self(bits)
    }

    pub const fn bits(self) -> u64 {
        self.0
    }

    pub const fn contains(self, t: FrameType) -> bool {
        self.0 >> t.0 & 1 == 1
    }

    pub fn insert(&mut self, t: FrameType) {
        self.0 |= 1 << t.0;
    }

    pub const fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub const fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn iter(self) -> impl Iterator<Item = FrameType> {
        (0..64u8).filter(move |i| self.0 >> i & 1 == 1).map(FrameType)
    }
}

impl FromIterator<FrameType> for FrameTypeSet {
    fn from_iter<I: IntoIterator<Item = FrameType>>(iter: I) -> Self {
        let mut s = Self::EMPTY;
        iter.into_iter().for_each(|t| s.insert(t));
        s
    }
}

impl fmt::Display for FrameTypeSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, t) in self.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            f.write_str(t.name())?;
        }
        Ok(())
    }
}

/// Which retype hooks a type carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TypeHooks {
    pub type_out: bool,
    pub type_in: bool,
}

/// Which domain may retype frames of a type away, plus its opaque flag.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CallerDomainRule {
    pub frame_type: FrameType,
    pub allowed_domain: DomainCode,
    /// Observed values 0, 48, 255 and 3840; recorded only.
    pub retype_flag: u16,
}

/// Per-type rule tables consulted by the retype pipeline.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameRules {
    callers: [CallerDomainRule; FrameType::COUNT],
    transitions: [FrameTypeSet; FrameType::COUNT],
    hooks: [TypeHooks; FrameType::COUNT],
    sprr: [Option<u8>; FrameType::COUNT],
}

/// Checks a code/name listing against the compiled-in names.
pub fn check_type_names(text: &str) -> Result<(), DataError> {
    let mut seen = FrameTypeSet::EMPTY;
    for row in rules::rows("frame_types.tsv", text) {
        let code = row.int(0)?;
        let t = FrameType::new(code as u8)
            .filter(|t| t.is_assignable() && code <= 62)
            .ok_or_else(|| row.error("code out of range"))?;
        if row.cell(1)? != t.name() {
            return Err(row.error(alloc::format!("expected {} for code {code}", t.name())));
        }
        seen.insert(t);
    }
    if seen != FrameTypeSet::ASSIGNABLE {
        return Err(DataError::new("frame_types.tsv", 0, "not every type is listed"));
    }
    Ok(())
}

fn typed<'a>(row: &rules::Row<'a>, code_col: usize, name_col: usize) -> Result<FrameType, DataError> {
    let code = row.int(code_col)?;
    let t = u8::try_from(code)
        .ok()
        .and_then(FrameType::new)
        .filter(|t| t.is_assignable())
        .ok_or_else(|| row.error("type code out of range"))?;
    if row.cell(name_col)? != t.name() {
        return Err(row.error(alloc::format!("name does not match code {code}")));
    }
    Ok(t)
}

fn named(row: &rules::Row<'_>, s: &str) -> Result<FrameType, DataError> {
    FrameType::parse(s)
        .filter(|t| t.is_assignable())
        .ok_or_else(|| row.error(alloc::format!("unknown frame type {s:?}")))
}

impl FrameRules {
    pub fn parse(caller_domains: &str, transitions: &str, hooks: &str, sprr_by_type: &str) -> Result<Self, DataError> {
        let mut callers = [None; FrameType::COUNT];
        for row in rules::rows("caller_domains.tsv", caller_domains) {
            let t = typed(&row, 0, 1)?;
            let domain = DomainCode::from_name(row.cell(2)?).ok_or_else(|| row.error("unknown domain"))?;
            let flag = u16::try_from(row.int(3)?).map_err(|_| row.error("flag exceeds 16 bits"))?;
            if callers[t.0 as usize]
                .replace(CallerDomainRule { frame_type: t, allowed_domain: domain, retype_flag: flag })
                .is_some()
            {
                return Err(row.error("duplicate type"));
            }
        }

        let mut trans = [None; FrameType::COUNT];
        for row in rules::rows("retype_transitions.tsv", transitions) {
            let from = named(&row, row.cell(0)?)?;
            let set = match row.opt(1) {
                Some("*") => FrameTypeSet::ASSIGNABLE,
                _ => row.list(1).iter().map(|s| named(&row, s)).collect::<Result<_, _>>()?,
            };
            if trans[from.0 as usize].replace(set).is_some() {
                return Err(row.error("duplicate type"));
            }
        }

        let mut hook_table = [TypeHooks::default(); FrameType::COUNT];
        for row in rules::rows("type_hooks.tsv", hooks) {
            let t = typed(&row, 0, 1)?;
            let yes = |col| match row.cell(col)? {
                "yes" => Ok(true),
                "no" => Ok(false),
                other => Err(row.error(alloc::format!("expected yes or no, got {other:?}"))),
            };
            hook_table[t.0 as usize] = TypeHooks { type_out: yes(2)?, type_in: yes(3)? };
        }

        let mut sprr = [None; FrameType::COUNT];
        let mut sprr_seen = FrameTypeSet::EMPTY;
        for row in rules::rows("sprr_by_type.tsv", sprr_by_type) {
            let t = typed(&row, 0, 1)?;
            if sprr_seen.contains(t) {
                return Err(row.error("duplicate type"));
            }
            sprr_seen.insert(t);
            sprr[t.0 as usize] = match row.cell(2)? {
                "none" => None,
                _ => match row.int(2)? {
                    v @ 0..=15 => Some(v as u8),
                    _ => return Err(row.error("index exceeds 4 bits")),
                },
            };
        }

        let complete = |file: &str, ok: bool| {
            if ok {
                Ok(())
            } else {
                Err(DataError::new(file, 0, "not every frame type has a row"))
            }
        };
        complete("caller_domains.tsv", callers.iter().all(Option::is_some))?;
        complete("retype_transitions.tsv", trans.iter().all(Option::is_some))?;
        complete("sprr_by_type.tsv", sprr_seen == FrameTypeSet::ASSIGNABLE)?;

        Ok(Self {
            callers: callers.map(Option::unwrap),
            transitions: trans.map(Option::unwrap),
            hooks: hook_table,
            sprr,
        })
    }

    pub fn caller_rule(&self, t: FrameType) -> Option<&CallerDomainRule> {
        self.callers.get(t.0 as usize)
    }

    /// Empty for the sentinel.
    pub fn allowed_retypes(&self, from: FrameType) -> FrameTypeSet {
        self.transitions.get(from.0 as usize).copied().unwrap_or_default()
    }

    pub fn hooks(&self, t: FrameType) -> TypeHooks {
        self.hooks.get(t.0 as usize).copied().unwrap_or_default()
    }

    /// `None` models the 0xff "no index" value.
    pub fn sprr_index_for_type(&self, t: FrameType) -> Option<u8> {
        self.sprr.get(t.0 as usize).copied().flatten()
    }
}

/// One physical frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameTableEntry {
    pub frame_index: usize,
    pub frame_type: FrameType,
    pub in_use: bool,
    pub sprr_index: Option<u8>,
}

/// Frame table failure; every variant leaves the entry unchanged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum FrameError {
    #[error("frame {0} is not managed")]
    UnmanagedFrame(usize),
    #[error("{0} is not an assignable frame type")]
    InvalidNewType(FrameType),
    #[error("frame {0} is already in use")]
    FrameBusy(usize),
    #[error("{caller} may not retype {current} frames (owner {owner})")]
    CallerDomainDenied { caller: DomainCode, current: FrameType, owner: DomainCode },
    #[error("caller expected {expected} but the frame is {actual}")]
    PreviousTypeMismatch { expected: FrameType, actual: FrameType },
    #[error("{from} may not become {to}")]
    TransitionDenied { from: FrameType, to: FrameType },
}

impl Status for FrameError {
    fn status_name(&self) -> &'static str {
        match self {
            Self::UnmanagedFrame(_) => "UnmanagedFrame",
            Self::InvalidNewType(_) => "InvalidNewType",
            Self::FrameBusy(_) => "FrameBusy",
            Self::CallerDomainDenied { .. } => "CallerDomainDenied",
            Self::PreviousTypeMismatch { .. } => "PreviousTypeMismatch",
            Self::TransitionDenied { .. } => "TransitionDenied",
        }
    }
}

/// Audit record of a successful retype.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetypeReport {
    pub frame: usize,
    pub caller: DomainCode,
    pub from: FrameType,
    pub to: FrameType,
    /// The outgoing type's hook ran.
    pub type_out_hook: bool,
    /// The incoming type's hook ran.
    pub type_in_hook: bool,
    /// Flag of the rule consulted for the outgoing type.
    pub retype_flag: u16,
    pub sprr_index: Option<u8>,
}

/// Frame table; `sprr_index` always tracks `frame_type`.
#[derive(Debug, Clone)]
pub struct FrameTable {
    rules: FrameRules,
    entries: Vec<FrameTableEntry>,
}

impl FrameTable {
    /// Every frame starts SPTM_UNTYPED.
    pub fn new(frame_count: NonZeroUsize, rules: FrameRules) -> Self {
        let sprr_index = rules.sprr_index_for_type(FrameType::SPTM_UNTYPED);
        let entries = (0..frame_count.get())
            .map(|frame_index| FrameTableEntry {
                frame_index,
                frame_type: FrameType::SPTM_UNTYPED,
                in_use: false,
                sprr_index,
            })
            .collect();
        Self { rules, entries }
    }

    pub fn rules(&self) -> &FrameRules {
        &self.rules
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[FrameTableEntry] {
        &self.entries
    }

    pub fn entry(&self, frame: usize) -> Result<&FrameTableEntry, FrameError> {
        self.entries.get(frame).ok_or(FrameError::UnmanagedFrame(frame))
    }

    pub fn frame_type_of(&self, frame: usize) -> Result<FrameType, FrameError> {
        self.entry(frame).map(|e| e.frame_type)
    }

    /// Takes the busy flag for an operation on another path.
    pub fn acquire(&mut self, frame: usize) -> Result<(), FrameError> {
        let e = self.entries.get_mut(frame).ok_or(FrameError::UnmanagedFrame(frame))?;
        if e.in_use {
            return Err(FrameError::FrameBusy(frame));
        }
        e.in_use = true;
        Ok(())
    }

    pub fn release(&mut self, frame: usize) {
        if let Some(e) = self.entries.get_mut(frame) {
            e.in_use = false;
        }
    }

    /// The full pipeline; see [`FrameError`] for the check order.
    pub fn retype(
        &mut self,
        caller: DomainCode,
        frame: usize,
        previous_type: FrameType,
        new_type: FrameType,
    ) -> Result<RetypeReport, FrameError> {
        if frame >= self.entries.len() {
            return Err(FrameError::UnmanagedFrame(frame));
        }
        if !new_type.is_assignable() {
            return Err(FrameError::InvalidNewType(new_type));
        }
        self.acquire(frame)?;
        let result = self.retype_held(caller, frame, previous_type, new_type);
        self.release(frame);
        result
    }

    fn retype_held(
        &mut self,
        caller: DomainCode,
        frame: usize,
        previous_type: FrameType,
        new_type: FrameType,
    ) -> Result<RetypeReport, FrameError> {
        let current = self.entries[frame].frame_type;
        let rule = *self.rules.caller_rule(current).expect("assignable types have rules");
        if current != FrameType::SPTM_UNTYPED && caller != rule.allowed_domain {
            return Err(FrameError::CallerDomainDenied { caller, current, owner: rule.allowed_domain });
        }
        if previous_type != current {
            return Err(FrameError::PreviousTypeMismatch { expected: previous_type, actual: current });
        }
        if !self.rules.allowed_retypes(current).contains(new_type) {
            return Err(FrameError::TransitionDenied { from: current, to: new_type });
        }
        let sprr_index = self.rules.sprr_index_for_type(new_type);
        let e = &mut self.entries[frame];
        e.frame_type = new_type;
        e.sprr_index = sprr_index;
        Ok(RetypeReport {
            frame,
            caller,
            from: current,
            to: new_type,
            type_out_hook: self.rules.hooks(current).type_out,
            type_in_hook: self.rules.hooks(new_type).type_in,
            retype_flag: rule.retype_flag,
            sprr_index,
        })
    }

    /// Entry invariants: index tracks type and no frame is held.
    pub fn is_consistent(&self) -> bool {
        self.entries.iter().all(|e| !e.in_use && e.sprr_index == self.rules.sprr_index_for_type(e.frame_type))
    }
}
