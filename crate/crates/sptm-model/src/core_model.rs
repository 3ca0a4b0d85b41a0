// SPDX-License-Identifier: Apache-2.0
//! Domain codes, dispatch-table ids, the gate-call target word and the SPRR
//! permission model.

use core::fmt;

use thiserror::Error;

use crate::rules::{self, DataError};

/// Status label used in traces and scenario expectations.
pub trait Status {
    fn status_name(&self) -> &'static str;
}

/// Execution domain known to the monitor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[repr(u8)]
pub enum DomainCode {
    Sptm = 0,
    Xnu = 1,
    Txm = 2,
    Sk = 3,
    XnuHib = 4,
}

impl DomainCode {
    /// Upper bound on domain codes; not itself a domain.
    pub const MAX_DOMAINS: u8 = 5;
    pub const ALL: [DomainCode; 5] =
        [DomainCode::Sptm, DomainCode::Xnu, DomainCode::Txm, DomainCode::Sk, DomainCode::XnuHib];

    pub const fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Self::Sptm),
            1 => Some(Self::Xnu),
            2 => Some(Self::Txm),
            3 => Some(Self::Sk),
            4 => Some(Self::XnuHib),
            _ => None,
        }
    }

    pub const fn code(self) -> u8 {
        self as u8
    }

    pub const fn name(self) -> &'static str {
        match self {
            Self::Sptm => "SPTM",
            Self::Xnu => "XNU",
            Self::Txm => "TXM",
            Self::Sk => "SK",
            Self::XnuHib => "XNU_HIB",
        }
    }

    /// Accepts `XNU` and `XNU_DOMAIN` spellings.
    pub fn from_name(name: &str) -> Option<Self> {
        let name = name.strip_suffix("_DOMAIN").unwrap_or(name);
        Self::ALL.into_iter().find(|d| d.name() == name)
    }

    /// Permission bit for this domain.
    pub const fn bit(self) -> u8 {
        1 << self as u8
    }
}

impl fmt::Display for DomainCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Set of domains; bit `d` set means domain `d` is a member.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct DomainSet(u8);

impl DomainSet {
    pub const EMPTY: DomainSet = DomainSet(0);

    pub const fn from_bits(bits: u8) -> Self {
        Self(bits)
    }

    pub const fn bits(self) -> u8 {
        self.0
    }

    pub const fn of(domain: DomainCode) -> Self {
        Self(domain.bit())
    }

    pub const fn contains(self, domain: DomainCode) -> bool {
        self.0 & domain.bit() != 0
    }

    pub fn members(self) -> impl Iterator<Item = DomainCode> {
        DomainCode::ALL.into_iter().filter(move |d| self.contains(*d))
    }
}

impl FromIterator<DomainCode> for DomainSet {
    fn from_iter<I: IntoIterator<Item = DomainCode>>(iter: I) -> Self {
        Self(iter.into_iter().fold(0, |acc, d| acc | d.bit()))
    }
}

impl fmt::Display for DomainSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#x}", self.0)
    }
}

/// Gate control function selected by a reserved table code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ControlCode {
    /// 0xFD; anchored by the recovered handler label.
    ReturnToCaller,
    /// 0xFE; restores a saved context. Pairing with PANIC is assumed.
    Panic,
    /// 0xFF; saves exception state. Pairing is assumed.
    ExceptionStateSaved,
}

impl ControlCode {
    pub const fn code(self) -> u8 {
        match self {
            Self::ReturnToCaller => 0xfd,
            Self::Panic => 0xfe,
            Self::ExceptionStateSaved => 0xff,
        }
    }

    pub const fn name(self) -> &'static str {
        match self {
            Self::ReturnToCaller => "RETURN_TO_CALLER",
            Self::Panic => "PANIC",
            Self::ExceptionStateSaved => "EXCEPTION_STATE_SAVED",
        }
    }

    /// True when the code-to-meaning pairing is an assumption.
    pub const fn assumed(self) -> bool {
        !matches!(self, Self::ReturnToCaller)
    }
}

/// Dispatch table id; 0..=11 are tables, 0xFD..=0xFF are control codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct DispatchTableId(pub u8);

impl DispatchTableId {
    pub const XNU_BOOTSTRAP: Self = Self(0);
    pub const TXM_BOOTSTRAP: Self = Self(1);
    pub const SK_BOOTSTRAP: Self = Self(2);
    pub const T8110_DART_XNU: Self = Self(3);
    pub const T8110_DART_SK: Self = Self(4);
    pub const SART: Self = Self(5);
    pub const NVME: Self = Self(6);
    pub const UAT: Self = Self(7);
    pub const SHART: Self = Self(8);
    /// Headers call this id reserved; XNU uses it for CPU tracing.
    pub const RESERVED: Self = Self(9);
    pub const HIB: Self = Self(10);
    pub const INVALID: Self = Self(11);

    const NAMES: [&'static str; 12] = [
        "XNU_BOOTSTRAP",
        "TXM_BOOTSTRAP",
        "SK_BOOTSTRAP",
        "T8110_DART_XNU",
        "T8110_DART_SK",
        "SART",
        "NVME",
        "UAT",
        "SHART",
        "RESERVED",
        "HIB",
        "INVALID",
    ];

    pub fn name(self) -> Option<&'static str> {
        match self.control() {
            Some(c) => Some(c.name()),
            None => Self::NAMES.get(self.0 as usize).copied(),
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        let name = name.strip_prefix("SPTM_DISPATCH_TABLE_").unwrap_or(name);
        Self::NAMES.iter().position(|n| *n == name).map(|i| Self(i as u8))
    }

    pub const fn control(self) -> Option<ControlCode> {
        match self.0 {
            0xfd => Some(ControlCode::ReturnToCaller),
            0xfe => Some(ControlCode::Panic),
            0xff => Some(ControlCode::ExceptionStateSaved),
            _ => None,
        }
    }
}

impl fmt::Display for DispatchTableId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#x}", self.0)
    }
}

/// 32-bit endpoint selector within a dispatch table.
pub type EndpointId = u32;

/// Endpoints of the XNU bootstrap table.
pub mod xnu_endpoint {
    use super::EndpointId;

    pub const LOCKDOWN: EndpointId = 0;
    pub const RETYPE: EndpointId = 1;
    pub const MAP_PAGE: EndpointId = 2;
    pub const GUEST_DISPATCH: EndpointId = 27;
    pub const GUEST_EXIT: EndpointId = 28;
    pub const HIB_BEGIN: EndpointId = 30;

    pub const NAMES: [&str; 34] = [
        "LOCKDOWN",
        "RETYPE",
        "MAP_PAGE",
        "MAP_TABLE",
        "UNMAP_TABLE",
        "UPDATE_REGION",
        "UPDATE_DISJOINT",
        "UNMAP_REGION",
        "UNMAP_DISJOINT",
        "CONFIGURE_SHAREDREGION",
        "NEST_REGION",
        "UNNEST_REGION",
        "CONFIGURE_ROOT",
        "SWITCH_ROOT",
        "REGISTER_CPU",
        "FIXUPS_COMPLETE",
        "SIGN_USER_POINTER",
        "AUTH_USER_POINTER",
        "REGISTER_EXC_RETURN",
        "CPU_ID",
        "SLIDE_REGION",
        "UPDATE_DISJOINT_MULTIPAGE",
        "REG_READ",
        "REG_WRITE",
        "GUEST_VA_TO_IPA",
        "GUEST_STAGE1_TLBOP",
        "GUEST_STAGE2_TLBOP",
        "GUEST_DISPATCH",
        "GUEST_EXIT",
        "MAP_SK_DOMAIN",
        "HIB_BEGIN",
        "HIB_VERIFY_HASH_NON_WIRED",
        "HIB_FINALIZE_NON_WIRED",
        "IOFILTER_PROTECTED_WRITE",
    ];

    pub fn name(ep: EndpointId) -> Option<&'static str> {
        NAMES.get(ep as usize).copied()
    }

    pub fn from_name(name: &str) -> Option<EndpointId> {
        let name = name.strip_prefix("SPTM_FUNCTIONID_").unwrap_or(name);
        NAMES.iter().position(|n| *n == name).map(|i| i as EndpointId)
    }
}

/// IOMMU ids known from the headers. Id 7 is registered but unnamed.
pub mod iommu {
    pub const SHART: u8 = 0;
    pub const SART: u8 = 1;
    pub const NVME: u8 = 2;
    pub const UAT: u8 = 3;
    pub const DART_T8020: u8 = 4;
    pub const DART_T8110: u8 = 5;
    pub const DART_T6000: u8 = 6;
    /// Highest id the bootstrap code registers.
    pub const MAX_ID: u8 = 7;

    pub const NAMES: [&str; 7] = ["SHART", "SART", "NVME", "UAT", "DART_T8020", "DART_T8110", "DART_T6000"];

    pub fn name(id: u8) -> Option<&'static str> {
        NAMES.get(id as usize).copied()
    }
}

/// A field did not fit its bit range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("{field} value {value:#x} exceeds {bits} bits")]
pub struct FieldOverflow {
    pub field: &'static str,
    pub value: u64,
    pub bits: u32,
}

impl Status for FieldOverflow {
    fn status_name(&self) -> &'static str {
        "FieldOverflow"
    }
}

/// 64-bit gate-call word: endpoint in bits 0..32, table in 32..40,
/// domain in 48..56. Bits 40..48 and 56..64 are reserved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct DispatchTarget(u64);

impl DispatchTarget {
    const RESERVED_MASK: u64 = 0xff00_ff00_0000_0000;

    pub const fn new(domain: DomainCode, table: DispatchTableId, endpoint: EndpointId) -> Self {
        Self(endpoint as u64 | (table.0 as u64) << 32 | (domain as u64) << 48)
    }

    /// Encodes untyped fields, rejecting any that overflow their width.
    pub fn encode(domain: u64, table: u64, endpoint: u64) -> Result<Self, FieldOverflow> {
        let check = |field, value: u64, bits: u32| {
            if value >> bits == 0 {
                Ok(value)
            } else {
                Err(FieldOverflow { field, value, bits })
            }
        };
        let endpoint = check("endpoint", endpoint, 32)?;
        let table = check("table", table, 8)?;
        let domain = check("domain", domain, 8)?;
        Ok(Self(endpoint | table << 32 | domain << 48))
    }

    /// Total; reserved bits are kept and reported by [`Self::reserved_bits`].
    pub const fn decode(raw: u64) -> Self {
        Self(raw)
    }

    pub const fn raw(self) -> u64 {
        self.0
    }

    pub const fn endpoint(self) -> EndpointId {
        self.0 as u32
    }

    pub const fn table(self) -> DispatchTableId {
        DispatchTableId((self.0 >> 32) as u8)
    }

    pub const fn domain_byte(self) -> u8 {
        (self.0 >> 48) as u8
    }

    pub const fn domain(self) -> Option<DomainCode> {
        DomainCode::from_code(self.domain_byte())
    }

    /// Nonzero reserved bits, in place.
    pub const fn reserved_bits(self) -> u64 {
        self.0 & Self::RESERVED_MASK
    }
}

impl fmt::Display for DispatchTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#018x}", self.0)
    }
}

/// Permission-relevant bits of a translation table entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct PteBits {
    ap: u8,
    pub uxn: bool,
    pub pxn: bool,
}

impl PteBits {
    pub fn new(ap: u8, uxn: bool, pxn: bool) -> Result<Self, FieldOverflow> {
        if ap > 3 {
            return Err(FieldOverflow { field: "ap", value: ap as u64, bits: 2 });
        }
        Ok(Self { ap, uxn, pxn })
    }

    /// The unique bit pattern that selects `index`.
    pub const fn for_index(index: u8) -> Self {
        Self { ap: index & 3, uxn: index & 4 != 0, pxn: index & 8 != 0 }
    }

    pub const fn ap(self) -> u8 {
        self.ap
    }

    /// Index composition: PXN, UXN, AP[1], AP[0] from high to low bit.
    pub const fn sprr_index(self) -> u8 {
        (self.pxn as u8) << 3 | (self.uxn as u8) << 2 | self.ap
    }
}

/// Exception level whose SPRR view is resolved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Level {
    El0,
    El2,
    Gl2,
}

impl Level {
    pub const ALL: [Level; 3] = [Level::El0, Level::El2, Level::Gl2];
}

/// Read, write and execute permission triple.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Perm {
    pub read: bool,
    pub write: bool,
    pub exec: bool,
}

impl Perm {
    pub const NONE: Perm = Perm { read: false, write: false, exec: false };

    /// Parses the `rwx` / `---` notation.
    pub fn parse(s: &str) -> Option<Self> {
        let b = s.as_bytes();
        if b.len() != 3 {
            return None;
        }
        let flag = |c: u8, on: u8| match c {
            b'-' => Some(false),
            c if c == on => Some(true),
            _ => None,
        };
        Some(Perm { read: flag(b[0], b'r')?, write: flag(b[1], b'w')?, exec: flag(b[2], b'x')? })
    }
}

impl fmt::Display for Perm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let c = |on: bool, ch: char| if on { ch } else { '-' };
        write!(f, "{}{}{}", c(self.read, 'r'), c(self.write, 'w'), c(self.exec, 'x'))
    }
}

/// One populated SPRR index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SprrPermissionRow {
    pub index: u8,
    pub el0: Perm,
    pub el2: Perm,
    pub gl2: Perm,
    pub usage: alloc::string::String,
}

/// SPRR index to permission mapping; unlisted indexes grant nothing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SprrTable {
    pub version: alloc::string::String,
    rows: [Option<SprrPermissionRow>; 16],
}

impl SprrTable {
    pub fn parse(text: &str) -> Result<Self, DataError> {
        const FILE: &str = "sprr_permissions.tsv";
        let mut rows: [Option<SprrPermissionRow>; 16] = Default::default();
        for row in rules::rows(FILE, text) {
            let index = row.int(0)?;
            if index > 15 {
                return Err(row.error("index exceeds 4 bits"));
            }
            let perm = |col| {
                let s = row.cell(col)?;
                Perm::parse(s).ok_or_else(|| row.error(alloc::format!("bad permission {s:?}")))
            };
            let slot = &mut rows[index as usize];
            if slot.is_some() {
                return Err(row.error("duplicate index"));
            }
            *slot = Some(SprrPermissionRow {
                index: index as u8,
                el0: perm(1)?,
                el2: perm(2)?,
                gl2: perm(3)?,
                usage: row.cell(4)?.into(),
            });
        }
        let version = rules::header_value(text, "version").unwrap_or("unversioned").into();
        Ok(Self { version, rows })
    }

    pub fn row(&self, index: u8) -> Option<&SprrPermissionRow> {
        self.rows.get(index as usize).and_then(Option::as_ref)
    }

    pub fn populated(&self) -> impl Iterator<Item = &SprrPermissionRow> {
        self.rows.iter().flatten()
    }

    /// Total over every index and level.
    pub fn resolve(&self, index: u8, level: Level) -> Perm {
        match self.row(index) {
            None => Perm::NONE,
            Some(r) => match level {
                Level::El0 => r.el0,
                Level::El2 => r.el2,
                Level::Gl2 => r.gl2,
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sprr() -> SprrTable {
        SprrTable::parse(include_str!("../data/sprr_permissions.tsv")).unwrap()
    }

    #[test]
    fn known_targets_encode() {
        let sk = DispatchTarget::new(DomainCode::Sk, DispatchTableId::XNU_BOOTSTRAP, 0);
        assert_eq!(sk.raw(), 0x0003_0000_0000_0000);
        let zero = DispatchTarget::new(DomainCode::Sptm, DispatchTableId(0), 0);
        assert_eq!(zero.raw(), 0);
        let txm = DispatchTarget::new(DomainCode::Txm, DispatchTableId(0), 5);
        assert_eq!(txm.raw(), 0x0002_0000_0000_0005);
    }

    #[test]
    fn known_words_decode() {
        let t = DispatchTarget::decode(0x05_0000_0002);
        assert_eq!((t.domain(), t.table(), t.endpoint()), (Some(DomainCode::Sptm), DispatchTableId::SART, 2));
        let c = DispatchTarget::decode(0xff_0000_0000);
        assert_eq!(c.table().control(), Some(ControlCode::ExceptionStateSaved));
        assert_eq!(c.reserved_bits(), 0);
    }

    #[test]
    fn reserved_bits_are_flagged_not_rejected() {
        let t = DispatchTarget::decode(0x0100_0100_0000_0000 | 7);
        assert_eq!(t.reserved_bits(), 0x0100_0100_0000_0000);
        assert_eq!(t.endpoint(), 7);
    }

    #[test]
    fn overflowing_fields_are_rejected() {
        assert_eq!(DispatchTarget::encode(0, 0x100, 0).unwrap_err().field, "table");
        assert_eq!(DispatchTarget::encode(0x100, 0, 0).unwrap_err().field, "domain");
        assert_eq!(DispatchTarget::encode(0, 0, 1 << 32).unwrap_err().field, "endpoint");
        assert!(PteBits::new(4, false, false).is_err());
    }

    #[test]
    fn sprr_index_truth_table_matches_arithmetic_oracle() {
        for ap in 0..4u8 {
            for uxn in [false, true] {
                for pxn in [false, true] {
                    let bits = PteBits::new(ap, uxn, pxn).unwrap();
                    let oracle = ap + 4 * uxn as u8 + 8 * pxn as u8;
                    assert_eq!(bits.sprr_index(), oracle);
                    assert_eq!(PteBits::for_index(oracle), bits);
                }
            }
        }
        assert_eq!(PteBits::new(0, false, false).unwrap().sprr_index(), 0);
        assert_eq!(PteBits::new(3, true, true).unwrap().sprr_index(), 15);
    }

    #[test]
    fn page_table_index_is_writable_only_at_gl2() {
        let t = sprr();
        assert_eq!(t.resolve(1, Level::Gl2).to_string(), "rw-");
        assert_eq!(t.resolve(1, Level::El2).to_string(), "r--");
        assert!(!t.resolve(1, Level::El0).write);
        assert_eq!(t.resolve(2, Level::El0), Perm::NONE);
        assert_eq!(t.populated().count(), 9);
        assert_eq!(t.version, "m1-2021");
    }

    #[test]
    fn domain_bits_and_names() {
        for d in DomainCode::ALL {
            assert_eq!(DomainCode::from_code(d.code()), Some(d));
            assert_eq!(DomainCode::from_name(d.name()), Some(d));
            assert_eq!(d.bit(), 1 << d.code());
        }
        assert_eq!(DomainCode::from_code(DomainCode::MAX_DOMAINS), None);
        assert_eq!(DomainCode::from_name("XNU_HIB_DOMAIN"), Some(DomainCode::XnuHib));
        let s: DomainSet = [DomainCode::Txm, DomainCode::Sk].into_iter().collect();
        assert_eq!(s.bits(), 0xc);
    }

    proptest! {
        #[test]
        fn target_round_trips(domain in 0u64..5, table in 0u64..=0xff, endpoint in any::<u32>()) {
            let t = DispatchTarget::encode(domain, table, endpoint as u64).unwrap();
            prop_assert_eq!(t.domain_byte() as u64, domain);
            prop_assert_eq!(t.table().0 as u64, table);
            prop_assert_eq!(t.endpoint(), endpoint);
            prop_assert_eq!(t.reserved_bits(), 0);
            let typed = DispatchTarget::new(t.domain().unwrap(), t.table(), t.endpoint());
            prop_assert_eq!(typed, t);
        }

        #[test]
        fn decode_preserves_every_bit(raw in any::<u64>()) {
            let t = DispatchTarget::decode(raw);
            let rebuilt = t.endpoint() as u64
                | (t.table().0 as u64) << 32
                | (t.domain_byte() as u64) << 48
                | t.reserved_bits();
            prop_assert_eq!(rebuilt, raw);
        }

        #[test]
        fn resolve_is_total(index in 0u8..=255, level in 0usize..3) {
            let _ = sprr().resolve(index, Level::ALL[level]);
        }
    }
}
