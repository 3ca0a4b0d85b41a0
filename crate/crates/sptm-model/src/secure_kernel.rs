// SPDX-License-Identifier: Apache-2.0
//! Secure kernel: monitor-facing entry functions, the GL0 service table
//! and the shared-memory retype services.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use thiserror::Error;

use crate::core_model::{DispatchTableId, DomainCode, DomainSet, Status};
use crate::dispatcher::{DispatchError, DispatchRegistration, Monitor};
use crate::frame_table::{FrameError, FrameTable, FrameType, RetypeReport};
use crate::rules::{self, DataError};

/// GL0 service slots; the selector is six bits wide.
pub const SERVICE_SLOTS: usize = 64;
/// Clears the low six and high 32 bits of a GL0 request pointer.
pub const REQUEST_POINTER_MASK: u64 = 0x0000_0000_ffff_ffc0;
const SELECTOR_SHIFT: u32 = 58;

/// Entry endpoints of the SK dispatch functions.
pub mod endpoint {
    pub const ENTER: u32 = 0;
    pub const BOOTINFO: u32 = 1;
}

/// SK bootstrap table endpoints in the monitor.
pub mod bootstrap_endpoint {
    pub const REGISTER: u32 = 0;
    pub const RETYPE: u32 = 1;
    pub const GET_FRAME_TYPE: u32 = 2;
    /// Set dynamically or lost to decompilation.
    pub const UNRESOLVED: u32 = 3;
}

/// DART table endpoints reachable from SK; both are logging stubs.
pub mod dart_endpoint {
    pub const MAP_TABLE: u32 = 0;
    pub const UNMAP_TABLE: u32 = 1;
}

/// Dispatch functions SK registers: function 0 for XNU, function 1 for SPTM.
pub const BOOT_REGISTRATIONS: [(DispatchTableId, DomainSet); 2] =
    [(DispatchTableId(0), DomainSet::of(DomainCode::Xnu)), (DispatchTableId(1), DomainSet::of(DomainCode::Sptm))];

/// One retype invocation the secure kernel makes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkRetypeCall {
    pub slot: u8,
    pub function: String,
    /// `None` reads the current type from the frame table.
    pub current: Option<FrameType>,
    pub new_type: FrameType,
}

/// GL0 service table; only the retype family is populated.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkRetypeTable {
    slots: BTreeMap<u8, SkRetypeCall>,
}

impl SkRetypeTable {
    pub fn parse(text: &str) -> Result<Self, DataError> {
        let mut slots = BTreeMap::new();
        for row in rules::rows("sk_retype_calls.tsv", text) {
            let slot = row.int(0)?;
            let slot = u8::try_from(slot)
                .ok()
                .filter(|s| usize::from(*s) < SERVICE_SLOTS)
                .ok_or_else(|| row.error("slot outside the service table"))?;
            let ty = |s: &str| FrameType::parse(s).ok_or_else(|| row.error(alloc::format!("unknown type {s}")));
            let call = SkRetypeCall {
                slot,
                function: row.cell(1)?.into(),
                current: row.opt(2).map(ty).transpose()?,
                new_type: ty(row.cell(3)?)?,
            };
            if slots.insert(slot, call).is_some() {
                return Err(row.error("duplicate slot"));
            }
        }
        Ok(Self { slots })
    }

    pub fn get(&self, slot: u8) -> Option<&SkRetypeCall> {
        self.slots.get(&slot)
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &SkRetypeCall> {
        self.slots.values()
    }

    pub fn by_function(&self, name: &str) -> impl Iterator<Item = &SkRetypeCall> + '_ {
        let name = String::from(name);
        self.slots.values().filter(move |c| c.function == name)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SkError {
    #[error("endpoint {0} is neither enter nor bootinfo")]
    InvalidEndpoint(u32),
    #[error("SK bootstrap endpoint {0} has no recovered behaviour")]
    NotRecovered(u32),
    #[error(transparent)]
    Dispatch(#[from] DispatchError),
    #[error(transparent)]
    Frame(#[from] FrameError),
}

impl Status for SkError {
    fn status_name(&self) -> &'static str {
        match self {
            Self::InvalidEndpoint(_) => "InvalidEndpoint",
            Self::NotRecovered(_) => "NotRecovered",
            Self::Dispatch(e) => e.status_name(),
            Self::Frame(e) => e.status_name(),
        }
    }
}

/// Boot information handed back on the bootinfo endpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BootInfo {
    pub service_slots: usize,
    pub populated_services: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SkEntry {
    /// ERET into the GL0 broker.
    EnterGl0,
    ReturnToCaller(BootInfo),
}

impl SkEntry {
    pub const fn name(&self) -> &'static str {
        match self {
            Self::EnterGl0 => "EnterGl0",
            Self::ReturnToCaller(_) => "ReturnToCaller",
        }
    }
}

/// Registers both dispatch functions with the monitor.
pub fn sk_boot(monitor: &mut Monitor) -> Result<Vec<DispatchRegistration>, SkError> {
    BOOT_REGISTRATIONS
        .iter()
        .map(|(table, perms)| monitor.register_dispatch_table(*table, *perms, DomainCode::Sk))
        .collect::<Result<Vec<_>, _>>()
        .map_err(SkError::from)
}

/// Entry through a dispatch function; the caller was checked by the monitor.
pub fn sk_dispatch(services: &SkRetypeTable, endpoint: u32) -> Result<SkEntry, SkError> {
    match endpoint {
        endpoint::ENTER => Ok(SkEntry::EnterGl0),
        endpoint::BOOTINFO => {
            Ok(SkEntry::ReturnToCaller(BootInfo { service_slots: SERVICE_SLOTS, populated_services: services.len() }))
        }
        ep => Err(SkError::InvalidEndpoint(ep)),
    }
}

/// A GL0 SVC #0 request.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Gl0ServiceRequest {
    pub raw_pointer: u64,
    pub args: [u64; 2],
}

impl Gl0ServiceRequest {
    pub const fn aligned_pointer(&self) -> u64 {
        self.raw_pointer & REQUEST_POINTER_MASK
    }
}

/// Words of GL0 memory the secure kernel can read, keyed by address.
pub type Gl0Memory = BTreeMap<u64, u64>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ServiceOutcome {
    ContextRestore,
    Retyped(RetypeReport),
    UnknownService(u8),
}

impl ServiceOutcome {
    pub const fn name(&self) -> &'static str {
        match self {
            Self::ContextRestore => "ContextRestore",
            Self::Retyped(_) => "ok",
            Self::UnknownService(_) => "UnknownService",
        }
    }
}

/// Top six bits of the word at `addr`; unmapped memory reads zero.
pub fn request_selector(memory: &Gl0Memory, addr: u64) -> u8 {
    (memory.get(&addr).copied().unwrap_or(0) >> SELECTOR_SHIFT) as u8
}

/// Dispatches a GL0 service request; `args[0]` names the frame.
pub fn sk_svc0(
    services: &SkRetypeTable,
    memory: &Gl0Memory,
    frames: &mut FrameTable,
    request: Gl0ServiceRequest,
) -> Result<ServiceOutcome, SkError> {
    let ptr = request.aligned_pointer();
    if ptr == 0 {
        return Ok(ServiceOutcome::ContextRestore);
    }
    let selector = request_selector(memory, ptr);
    match services.get(selector) {
        None => Ok(ServiceOutcome::UnknownService(selector)),
        Some(call) => {
            let frame = usize::try_from(request.args[0]).map_err(|_| FrameError::UnmanagedFrame(usize::MAX))?;
            sk_retype_service(call, frames, frame).map(ServiceOutcome::Retyped)
        }
    }
}

/// Shares an SK_DEFAULT frame; any other type is left alone.
pub fn sk_retype_to_shared(frames: &mut FrameTable, frame: usize, writable: bool) -> bool {
    if frames.frame_type_of(frame) != Ok(FrameType::SK_DEFAULT) {
        return false;
    }
    let new_type = if writable { FrameType::SK_SHARED_RW } else { FrameType::SK_SHARED_RO };
    frames.retype(DomainCode::Sk, frame, FrameType::SK_DEFAULT, new_type).is_ok()
}

/// Applies one retype invocation on behalf of SK.
pub fn sk_retype_service(call: &SkRetypeCall, frames: &mut FrameTable, frame: usize) -> Result<RetypeReport, SkError> {
    let current = match call.current {
        Some(t) => t,
        None => frames.frame_type_of(frame)?,
    };
    Ok(frames.retype(DomainCode::Sk, frame, current, call.new_type)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rules::RuleSet;
    use core::num::NonZeroUsize;
    use proptest::prelude::*;

    fn world() -> (FrameTable, SkRetypeTable) {
        let r = RuleSet::builtin();
        (FrameTable::new(NonZeroUsize::new(8).unwrap(), r.frames), r.sk_retypes)
    }

    fn set(frames: &mut FrameTable, f: usize, t: FrameType) {
        frames.retype(DomainCode::Sptm, f, FrameType::SPTM_UNTYPED, t).unwrap();
    }

    #[test]
    fn service_table_rows() {
        let (_, svc) = world();
        assert_eq!(svc.len(), 8);
        assert_eq!(svc.by_function("retype_to_shared1").count(), 2);
        assert_eq!(svc.get(0).unwrap().current, Some(FrameType::SK_DEFAULT));
        assert_eq!(svc.get(6).unwrap().new_type, FrameType::XNU_DEFAULT);
    }

    #[test]
    fn boot_registers_two_functions() {
        let mut m = Monitor::new(RuleSet::builtin().transitions);
        let regs = sk_boot(&mut m).unwrap();
        let perms: Vec<_> = regs.iter().map(|r| r.permissions.bits()).collect();
        assert_eq!(perms, [0x2, 0x1]);
        assert!(sk_boot(&mut m).is_err());
    }

    #[test]
    fn dispatch_endpoints() {
        let (_, svc) = world();
        assert_eq!(sk_dispatch(&svc, 0), Ok(SkEntry::EnterGl0));
        assert!(matches!(sk_dispatch(&svc, 1), Ok(SkEntry::ReturnToCaller(_))));
        assert_eq!(sk_dispatch(&svc, 2), Err(SkError::InvalidEndpoint(2)));
    }

    #[test]
    fn svc0_requests() {
        let (mut frames, svc) = world();
        let mut mem = Gl0Memory::new();
        let null = Gl0ServiceRequest { raw_pointer: 0x3f, args: [0; 2] };
        assert_eq!(sk_svc0(&svc, &mem, &mut frames, null), Ok(ServiceOutcome::ContextRestore));
        let req = Gl0ServiceRequest { raw_pointer: 0xdead_0000_1000_003f, args: [1, 0] };
        assert_eq!(req.aligned_pointer(), 0x1000_0000);
        mem.insert(0x1000_0000, 7 << 58);
        set(&mut frames, 1, FrameType::XNU_DEFAULT);
        let err = sk_svc0(&svc, &mem, &mut frames, req).unwrap_err();
        assert_eq!(err.status_name(), "CallerDomainDenied");
        mem.insert(0x1000_0000, 7 << 58);
        let req = Gl0ServiceRequest { args: [2, 0], ..req };
        let ServiceOutcome::Retyped(r) = sk_svc0(&svc, &mem, &mut frames, req).unwrap() else { panic!() };
        assert_eq!(r.to, FrameType::SK_DEFAULT);
        mem.insert(0x1000_0000, 9 << 58);
        assert_eq!(sk_svc0(&svc, &mem, &mut frames, req), Ok(ServiceOutcome::UnknownService(9)));
    }

    #[test]
    fn share_only_sk_default() {
        let (mut frames, _) = world();
        set(&mut frames, 0, FrameType::SK_DEFAULT);
        set(&mut frames, 1, FrameType::SK_DEFAULT);
        set(&mut frames, 2, FrameType::XNU_DEFAULT);
        assert!(sk_retype_to_shared(&mut frames, 0, true));
        assert_eq!(frames.frame_type_of(0), Ok(FrameType::SK_SHARED_RW));
        assert!(sk_retype_to_shared(&mut frames, 1, false));
        assert_eq!(frames.frame_type_of(1), Ok(FrameType::SK_SHARED_RO));
        assert!(!sk_retype_to_shared(&mut frames, 2, true));
        assert_eq!(frames.frame_type_of(2), Ok(FrameType::XNU_DEFAULT));
    }

    #[test]
    fn retype_service_rows() {
        let (mut frames, svc) = world();
        set(&mut frames, 0, FrameType::SK_DEFAULT);
        sk_retype_service(svc.get(6).unwrap(), &mut frames, 0).unwrap();
        assert_eq!(frames.frame_type_of(0), Ok(FrameType::XNU_DEFAULT));
        sk_retype_service(svc.get(7).unwrap(), &mut frames, 1).unwrap();
        assert_eq!(frames.frame_type_of(1), Ok(FrameType::SK_DEFAULT));
        // The owner check runs before the transition check.
        set(&mut frames, 2, FrameType::TXM_DEFAULT);
        let err = sk_retype_service(svc.get(1).unwrap(), &mut frames, 2).unwrap_err();
        assert_eq!(err.status_name(), "CallerDomainDenied");
        assert_eq!(frames.frame_type_of(2), Ok(FrameType::TXM_DEFAULT));
    }

    proptest! {
        #[test]
        fn sk_retypes_only_owned_or_untyped(from in 0u8..=62, slot in 0u8..8) {
            let (mut frames, svc) = world();
            let from = FrameType::new(from).unwrap();
            if from != FrameType::SPTM_UNTYPED {
                set(&mut frames, 0, from);
            }
            let owner = frames.rules().caller_rule(from).map(|r| r.allowed_domain);
            if sk_retype_service(svc.get(slot).unwrap(), &mut frames, 0).is_ok() {
                prop_assert!(from == FrameType::SPTM_UNTYPED || owner == Some(DomainCode::Sk));
            }
        }
    }
}
