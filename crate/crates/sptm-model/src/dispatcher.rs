// SPDX-License-Identifier: Apache-2.0
//! Monitor call surface: dispatch registrations, gate entry and the
//! internal state machine.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use thiserror::Error;

use crate::core_model::{iommu, ControlCode, DispatchTableId, DispatchTarget, DomainCode, DomainSet, Status};
use crate::rules::{self, DataError};

/// Highest valid state.
pub const MAX_STATE: u8 = 0x16;
/// Highest valid event.
pub const MAX_EVENT: u8 = 0xe;

/// Internal event ids with a known role.
pub mod event {
    pub const BOOT_TXM: u8 = 0x0;
    pub const BOOT_SK: u8 = 0x1;
    /// Default handling event for SPTM-domain calls.
    pub const CALL: u8 = 0x2;
    pub const ENTER_TXM: u8 = 0x3;
    pub const ENTER_SK: u8 = 0x4;
    /// Return from a handler.
    pub const RETURN: u8 = 0x5;
    pub const PANIC: u8 = 0x9;
    pub const GUEST_DISPATCH: u8 = 0xc;
    pub const GUEST_EXIT: u8 = 0xd;
    pub const HIB_BEGIN: u8 = 0xe;
}

/// State a booted monitor idles in between calls.
pub const RUNTIME_STATE: u8 = 0x5;

/// One populated cell of the transition table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransitionEntry {
    pub state: u8,
    pub event: u8,
    /// Opaque action label.
    pub action: String,
    pub next_state: u8,
    pub domain: Option<DomainCode>,
    pub flag: u8,
    /// Panic string logged on exit-path rows.
    pub panic_note: Option<String>,
}

impl TransitionEntry {
    /// Low flag bit requests a handler lookup.
    pub const fn resolves_handler(&self) -> bool {
        self.flag & 1 == 1
    }
}

/// Sparse `(state, event)` table; absent cells are forbidden.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransitionTable {
    cells: BTreeMap<(u8, u8), TransitionEntry>,
}

impl TransitionTable {
    pub fn parse(text: &str) -> Result<Self, DataError> {
        let mut cells = BTreeMap::new();
        let mut actions: BTreeMap<String, u64> = BTreeMap::new();
        for row in rules::rows("state_transitions.tsv", text) {
            let small = |col, max: u8, what: &str| {
                let v = row.int(col)?;
                u8::try_from(v)
                    .ok()
                    .filter(|v| *v <= max)
                    .ok_or_else(|| row.error(alloc::format!("{what} {v:#x} out of range")))
            };
            let state = small(0, MAX_STATE, "state")?;
            let event = small(1, MAX_EVENT, "event")?;
            let action = row.cell(2)?;
            let next_state = small(3, MAX_STATE, "next state")?;
            let domain = match row.opt(4) {
                None => None,
                Some(d) => Some(DomainCode::from_name(d).ok_or_else(|| row.error("unknown domain"))?),
            };
            let flag = row.opt_int(5)?.unwrap_or(0);
            let flag = u8::try_from(flag).map_err(|_| row.error("flag out of range"))?;
            // One label names one action address.
            let addr = action
                .strip_prefix("act_")
                .and_then(|h| u64::from_str_radix(h, 16).ok())
                .ok_or_else(|| row.error("action label must be act_<hex>"))?;
            if actions.insert(action.into(), addr).is_some_and(|a| a != addr) {
                return Err(row.error("inconsistent action label"));
            }
            let entry = TransitionEntry {
                state,
                event,
                action: action.into(),
                next_state,
                domain,
                flag,
                panic_note: row.opt(6).map(Into::into),
            };
            if cells.insert((state, event), entry).is_some() {
                return Err(row.error("duplicate cell"));
            }
        }
        Ok(Self { cells })
    }

    pub fn get(&self, state: u8, event: u8) -> Option<&TransitionEntry> {
        self.cells.get(&(state, event))
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = &TransitionEntry> {
        self.cells.values()
    }

    pub fn out_degree(&self, state: u8) -> usize {
        self.entries().filter(|e| e.state == state).count()
    }

    pub fn in_degree(&self, state: u8) -> usize {
        self.entries().filter(|e| e.next_state == state).count()
    }
}

/// Who handles calls to a registered table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Handler {
    /// Domain that registered the table.
    pub owner: DomainCode,
    pub table: DispatchTableId,
    /// Set for IOMMU-backed tables.
    pub iommu: Option<u8>,
}

impl fmt::Display for Handler {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.owner, self.table.0)?;
        if let Some(id) = self.iommu {
            write!(f, ":iommu{id}")?;
        }
        Ok(())
    }
}

/// A dispatch table registration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DispatchRegistration {
    pub handler: Handler,
    /// Bit `d` set means domain `d` may call.
    pub permissions: DomainSet,
}

/// An IOMMU registration row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IommuRegistration {
    pub iommu_id: u8,
    pub table: DispatchTableId,
    pub permissions: DomainSet,
    /// Permissions of the companion table at `table + 1`.
    pub secondary: Option<DomainSet>,
    /// Id is called at boot but has no name in the headers.
    pub unlisted: bool,
}

impl IommuRegistration {
    pub fn parse_all(text: &str) -> Result<Vec<Self>, DataError> {
        rules::rows("iommu_registrations.tsv", text)
            .map(|row| {
                let byte =
                    |col| row.int(col).and_then(|v| u8::try_from(v).map_err(|_| row.error("value exceeds 8 bits")));
                let secondary = match row.opt_int(3)? {
                    None => None,
                    Some(v) => {
                        Some(DomainSet::from_bits(u8::try_from(v).map_err(|_| row.error("value exceeds 8 bits"))?))
                    }
                };
                Ok(Self {
                    iommu_id: byte(0)?,
                    table: DispatchTableId(byte(1)?),
                    permissions: DomainSet::from_bits(byte(2)?),
                    secondary,
                    unlisted: row.opt(4) == Some("unlisted"),
                })
            })
            .collect()
    }
}

/// Dispatch failure. The monitor is unchanged whenever one is returned.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum DispatchError {
    #[error("event {0:#x} exceeds the event bound")]
    InvalidEvent(u8),
    #[error("state {0:#x} exceeds the state bound")]
    InvalidState(u8),
    #[error("no transition from state {state:#x} on event {event:#x}")]
    ForbiddenTransition { state: u8, event: u8 },
    #[error("{caller:?} may not call {handler}")]
    PermissionDenied { caller: Option<DomainCode>, handler: Handler },
    #[error("no handler registered for domain byte {domain:#x} table {table}")]
    NoHandlerRegistered { domain: u8, table: DispatchTableId },
    #[error("table {0} is already registered")]
    DuplicateRegistration(Handler),
    #[error("table code {0} is a gate control code")]
    ControlCodeReserved(DispatchTableId),
    #[error("IOMMU id {0} is unknown")]
    UnknownIommu(u8),
    #[error("domain byte {0:#x} cannot be entered through GENTER")]
    UnroutableDomain(u8),
    #[error("{0} may not use this gate")]
    WrongGate(DomainCode),
}

impl Status for DispatchError {
    fn status_name(&self) -> &'static str {
        match self {
            Self::InvalidEvent(_) => "InvalidEvent",
            Self::InvalidState(_) => "InvalidState",
            Self::ForbiddenTransition { .. } => "ForbiddenTransition",
            Self::PermissionDenied { .. } => "PermissionDenied",
            Self::NoHandlerRegistered { .. } => "NoHandlerRegistered",
            Self::DuplicateRegistration(_) => "DuplicateRegistration",
            Self::ControlCodeReserved(_) => "ControlCodeReserved",
            Self::UnknownIommu(_) => "UnknownIommu",
            Self::UnroutableDomain(_) => "UnroutableDomain",
            Self::WrongGate(_) => "WrongGate",
        }
    }
}

/// Mutable monitor state; `current_state` changes only through stepping.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MonitorState {
    current_state: u8,
    pub caller_domain: Option<DomainCode>,
    pub interrupts_masked: bool,
}

impl MonitorState {
    pub const fn new(current_state: u8) -> Self {
        Self { current_state, caller_domain: None, interrupts_masked: true }
    }

    pub const fn current_state(&self) -> u8 {
        self.current_state
    }
}

/// A successful state step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Step {
    pub event: u8,
    pub from: u8,
    pub to: u8,
    pub action: String,
    pub caller_domain: Option<DomainCode>,
    pub handler: Option<Handler>,
    pub panic_note: Option<String>,
}

/// Terminal result of a gate call.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GateOutcome {
    Dispatched(Step),
    Control(ControlCode),
    InterruptsEnabled,
    InterruptsMasked,
    /// The handler's wait-for-event loop; never returns.
    Hang,
    /// GL0 SVC delivered to the secure kernel instead.
    RoutedToSecureKernel,
}

impl GateOutcome {
    pub fn status_name(&self) -> &'static str {
        match self {
            Self::Dispatched(_) | Self::InterruptsEnabled | Self::InterruptsMasked => "ok",
            Self::Control(c) => c.name(),
            Self::Hang => "Hang",
            Self::RoutedToSecureKernel => "RoutedToSecureKernel",
        }
    }
}

/// Which GL0 component issued an SVC.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SvcOrigin {
    /// TXM SVCs reach the monitor.
    Txm,
    /// Other GL0 SVCs are taken by the secure kernel.
    Exclave,
}

/// SVC immediate that unmasks interrupts.
pub const SVC_ENABLE_INTERRUPTS: u16 = 37;
/// SVC immediate that masks interrupts.
pub const SVC_MASK_INTERRUPTS: u16 = 38;

/// Default event for a GENTER target.
pub fn event_for_genter(target: DispatchTarget) -> Result<u8, DispatchError> {
    match target.domain_byte() {
        0 if target.table().0 == 0 => Ok(match target.endpoint() & 0xff {
            0x1b => event::GUEST_DISPATCH,
            0x1c => event::GUEST_EXIT,
            0x1e => event::HIB_BEGIN,
            _ => event::CALL,
        }),
        0 => Ok(event::CALL),
        2 => Ok(event::ENTER_TXM),
        3 => Ok(event::ENTER_SK),
        d => Err(DispatchError::UnroutableDomain(d)),
    }
}

/// The monitor: state, transition table and dispatch structures.
#[derive(Debug, Clone)]
pub struct Monitor {
    state: MonitorState,
    table: TransitionTable,
    /// Tables registered by SPTM or XNU, keyed by (owner, table).
    core: BTreeMap<(DomainCode, u8), DispatchRegistration>,
    /// Functions registered by TXM or SK, keyed by (owner, function).
    special: BTreeMap<(DomainCode, u8), DispatchRegistration>,
}

impl Monitor {
    /// A monitor at state 0 with nothing registered.
    pub fn new(table: TransitionTable) -> Self {
        Self { state: MonitorState::new(0), table, core: BTreeMap::new(), special: BTreeMap::new() }
    }

    pub fn state(&self) -> &MonitorState {
        &self.state
    }

    pub fn transitions(&self) -> &TransitionTable {
        &self.table
    }

    /// Places the monitor in an arbitrary state; for runtime entry and tests.
    pub fn reset_state(&mut self, state: u8) {
        self.state.current_state = state;
    }

    fn is_core(owner: DomainCode) -> bool {
        matches!(owner, DomainCode::Sptm | DomainCode::Xnu)
    }

    pub fn registrations(&self) -> impl Iterator<Item = &DispatchRegistration> {
        self.core.values().chain(self.special.values())
    }

    pub fn register_dispatch_table(
        &mut self,
        table: DispatchTableId,
        permissions: DomainSet,
        caller: DomainCode,
    ) -> Result<DispatchRegistration, DispatchError> {
        self.insert(Handler { owner: caller, table, iommu: None }, permissions)
    }

    /// Registers the table and, when present, its companion at `table + 1`.
    pub fn register_iommu(&mut self, reg: &IommuRegistration) -> Result<Vec<DispatchRegistration>, DispatchError> {
        if reg.iommu_id > iommu::MAX_ID {
            return Err(DispatchError::UnknownIommu(reg.iommu_id));
        }
        let handler = Handler { owner: DomainCode::Sptm, table: reg.table, iommu: Some(reg.iommu_id) };
        let mut out = Vec::new();
        if let Some(perms) = reg.secondary {
            let second = Handler { table: DispatchTableId(reg.table.0.wrapping_add(1)), ..handler };
            if second.table.control().is_some() {
                return Err(DispatchError::ControlCodeReserved(second.table));
            }
            if self.core.contains_key(&(DomainCode::Sptm, second.table.0)) {
                return Err(DispatchError::DuplicateRegistration(second));
            }
            out.push(self.insert(handler, reg.permissions)?);
            out.push(self.insert(second, perms)?);
        } else {
            out.push(self.insert(handler, reg.permissions)?);
        }
        Ok(out)
    }

    fn insert(&mut self, handler: Handler, permissions: DomainSet) -> Result<DispatchRegistration, DispatchError> {
        if handler.table.control().is_some() {
            return Err(DispatchError::ControlCodeReserved(handler.table));
        }
        let map = if Self::is_core(handler.owner) { &mut self.core } else { &mut self.special };
        let key = (handler.owner, handler.table.0);
        if map.contains_key(&key) {
            return Err(DispatchError::DuplicateRegistration(handler));
        }
        let reg = DispatchRegistration { handler, permissions };
        map.insert(key, reg);
        Ok(reg)
    }

    /// Registration reached by a target, by its domain byte and table.
    pub fn lookup(&self, target: DispatchTarget) -> Option<&DispatchRegistration> {
        let domain = target.domain()?;
        let map = if Self::is_core(domain) { &self.core } else { &self.special };
        map.get(&(domain, target.table().0))
    }

    /// The registration `target` reaches, if `caller` holds its permission bit.
    pub fn authorize(
        &self,
        caller: Option<DomainCode>,
        target: DispatchTarget,
    ) -> Result<&DispatchRegistration, DispatchError> {
        let reg = self
            .lookup(target)
            .ok_or(DispatchError::NoHandlerRegistered { domain: target.domain_byte(), table: target.table() })?;
        if caller.is_some_and(|c| reg.permissions.contains(c)) {
            Ok(reg)
        } else {
            Err(DispatchError::PermissionDenied { caller, handler: reg.handler })
        }
    }

    /// Pure transition computation; the caller commits the result.
    pub fn plan(&self, event: u8, target: DispatchTarget) -> Result<Step, DispatchError> {
        if event > MAX_EVENT {
            return Err(DispatchError::InvalidEvent(event));
        }
        let state = self.state.current_state;
        if state > MAX_STATE {
            return Err(DispatchError::InvalidState(state));
        }
        let entry = self.table.get(state, event).ok_or(DispatchError::ForbiddenTransition { state, event })?;
        // Empty domain cells keep the previous caller.
        let caller_domain = entry.domain.or(self.state.caller_domain);
        let handler =
            if entry.resolves_handler() { Some(self.authorize(caller_domain, target)?.handler) } else { None };
        Ok(Step {
            event,
            from: state,
            to: entry.next_state,
            action: entry.action.clone(),
            caller_domain,
            handler,
            panic_note: entry.panic_note.clone(),
        })
    }

    pub fn step_state(&mut self, event: u8, target: DispatchTarget) -> Result<Step, DispatchError> {
        let step = self.plan(event, target)?;
        self.state.caller_domain = step.caller_domain;
        self.state.current_state = step.to;
        Ok(step)
    }

    /// Entry from a normal-world caller.
    pub fn genter(&mut self, caller: DomainCode, target: DispatchTarget) -> Result<GateOutcome, DispatchError> {
        if !matches!(caller, DomainCode::Xnu | DomainCode::XnuHib) {
            return Err(DispatchError::WrongGate(caller));
        }
        let event = event_for_genter(target)?;
        self.step_state(event, target).map(GateOutcome::Dispatched)
    }

    /// SVC from a GL0 component.
    pub fn svc_call(
        &mut self,
        origin: SvcOrigin,
        imm: u16,
        target: DispatchTarget,
    ) -> Result<GateOutcome, DispatchError> {
        if origin == SvcOrigin::Exclave {
            return Ok(GateOutcome::RoutedToSecureKernel);
        }
        match imm {
            0 => self.table_call(target),
            SVC_ENABLE_INTERRUPTS => {
                self.state.interrupts_masked = false;
                Ok(GateOutcome::InterruptsEnabled)
            }
            SVC_MASK_INTERRUPTS => {
                self.state.interrupts_masked = true;
                Ok(GateOutcome::InterruptsMasked)
            }
            _ => Ok(GateOutcome::Hang),
        }
    }

    /// HVC #0 from the secure kernel; no interrupt toggles on this path.
    pub fn hvc_call(&mut self, target: DispatchTarget) -> Result<GateOutcome, DispatchError> {
        self.table_call(target)
    }

    fn table_call(&mut self, target: DispatchTarget) -> Result<GateOutcome, DispatchError> {
        match target.table().control() {
            Some(code) => Ok(GateOutcome::Control(code)),
            None => self.step_state(event::CALL, target).map(GateOutcome::Dispatched),
        }
    }

    /// Handler return path.
    pub fn complete(&mut self, target: DispatchTarget) -> Result<Step, DispatchError> {
        self.step_state(event::RETURN, target)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rules::RuleSet;
    use proptest::prelude::*;

    const XNU: DomainSet = DomainSet::of(DomainCode::Xnu);

    fn monitor() -> Monitor {
        Monitor::new(RuleSet::builtin().transitions)
    }

    fn target(d: DomainCode, table: u8, ep: u32) -> DispatchTarget {
        DispatchTarget::new(d, DispatchTableId(table), ep)
    }

    fn booted() -> Monitor {
        let mut m = monitor();
        m.register_dispatch_table(DispatchTableId(0), XNU, DomainCode::Sptm).unwrap();
        m.register_dispatch_table(DispatchTableId(1), DomainSet::of(DomainCode::Txm), DomainCode::Sptm).unwrap();
        m.register_dispatch_table(DispatchTableId(0), XNU, DomainCode::Txm).unwrap();
        m.register_dispatch_table(DispatchTableId(0), XNU, DomainCode::Sk).unwrap();
        m.reset_state(RUNTIME_STATE);
        m
    }

    #[test]
    fn table_cells_match_known_rows() {
        let t = RuleSet::builtin().transitions;
        assert_eq!(t.len(), 63);
        let e = t.get(0x5, 0x3).unwrap();
        assert_eq!((e.next_state, e.domain, e.flag), (0x8, Some(DomainCode::Xnu), 0x3));
        let p = t.get(0x0, 0x9).unwrap();
        assert_eq!(p.next_state, 0x13);
        assert_eq!(p.panic_note.as_deref(), Some("[PANIC DURING BOOTSTRAP]"));
        assert_eq!(t.get(0x1, 0x9).unwrap().panic_note.as_deref(), Some("[SK BOOTSTRAP PANIC]"));
        for sink in [0x13, 0x15] {
            assert_eq!(t.out_degree(sink), 0);
            assert!(t.in_degree(sink) > 0);
        }
    }

    #[test]
    fn sinks_forbid_every_event() {
        let mut m = monitor();
        for ev in 0..=MAX_EVENT {
            m.reset_state(0x13);
            assert_eq!(
                m.step_state(ev, target(DomainCode::Sptm, 0, 0)),
                Err(DispatchError::ForbiddenTransition { state: 0x13, event: ev })
            );
        }
    }

    #[test]
    fn bounds_are_checked_before_lookup() {
        let mut m = monitor();
        assert_eq!(m.step_state(15, target(DomainCode::Sptm, 0, 0)), Err(DispatchError::InvalidEvent(15)));
        m.reset_state(23);
        assert_eq!(m.step_state(0, target(DomainCode::Sptm, 0, 0)), Err(DispatchError::InvalidState(23)));
    }

    #[test]
    fn genter_events() {
        let ev = |d, t, e| event_for_genter(target(d, t, e));
        assert_eq!(ev(DomainCode::Sptm, 0, 0x1b), Ok(0xc));
        assert_eq!(ev(DomainCode::Sptm, 0, 0x1c), Ok(0xd));
        assert_eq!(ev(DomainCode::Sptm, 0, 0x1e), Ok(0xe));
        assert_eq!(ev(DomainCode::Sptm, 3, 5), Ok(2));
        assert_eq!(ev(DomainCode::Txm, 0, 77), Ok(3));
        assert_eq!(ev(DomainCode::Sk, 9, 0), Ok(4));
        assert_eq!(ev(DomainCode::Xnu, 0, 0), Err(DispatchError::UnroutableDomain(1)));
        assert_eq!(ev(DomainCode::XnuHib, 0, 0), Err(DispatchError::UnroutableDomain(4)));
    }

    #[test]
    fn registration_rules() {
        let mut m = monitor();
        m.register_dispatch_table(DispatchTableId(0), XNU, DomainCode::Sptm).unwrap();
        assert!(matches!(
            m.register_dispatch_table(DispatchTableId(0), XNU, DomainCode::Sptm),
            Err(DispatchError::DuplicateRegistration(_))
        ));
        assert_eq!(
            m.register_dispatch_table(DispatchTableId(0xfd), XNU, DomainCode::Sptm),
            Err(DispatchError::ControlCodeReserved(DispatchTableId(0xfd)))
        );
        let bad = IommuRegistration {
            iommu_id: 8,
            table: DispatchTableId(5),
            permissions: XNU,
            secondary: None,
            unlisted: false,
        };
        assert_eq!(m.register_iommu(&bad), Err(DispatchError::UnknownIommu(8)));
        let regs = RuleSet::builtin().iommus;
        let dart = regs.iter().find(|r| r.iommu_id == iommu::DART_T8110).unwrap();
        let out = m.register_iommu(dart).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out[1].handler.table, DispatchTableId::T8110_DART_SK);
        assert!(regs.iter().any(|r| r.iommu_id == 7 && r.unlisted));
    }

    #[test]
    fn xnu_call_round_trip() {
        let mut m = booted();
        let t = target(DomainCode::Sptm, 0, 1);
        let GateOutcome::Dispatched(step) = m.genter(DomainCode::Xnu, t).unwrap() else { panic!() };
        assert_eq!((step.from, step.to, step.event), (0x5, 0xb, 0x2));
        assert_eq!(step.handler.unwrap().owner, DomainCode::Sptm);
        m.complete(t).unwrap();
        assert_eq!(m.state().current_state(), RUNTIME_STATE);
    }

    #[test]
    fn txm_and_sk_entries_resolve_special_handlers() {
        let mut m = booted();
        let t = target(DomainCode::Txm, 0, 5);
        let GateOutcome::Dispatched(step) = m.genter(DomainCode::Xnu, t).unwrap() else { panic!() };
        assert_eq!(step.to, 0x8);
        assert_eq!(step.handler.unwrap().owner, DomainCode::Txm);
        m.complete(t).unwrap();
        let t = target(DomainCode::Sk, 0, 0);
        let GateOutcome::Dispatched(step) = m.genter(DomainCode::Xnu, t).unwrap() else { panic!() };
        assert_eq!((step.to, step.handler.unwrap().owner), (0x10, DomainCode::Sk));
    }

    #[test]
    fn errors_leave_monitor_unchanged() {
        let mut m = booted();
        let before = *m.state();
        assert!(matches!(
            m.genter(DomainCode::Xnu, target(DomainCode::Sptm, 1, 0)),
            Err(DispatchError::PermissionDenied { .. })
        ));
        assert!(matches!(
            m.genter(DomainCode::Xnu, target(DomainCode::Sptm, 6, 0)),
            Err(DispatchError::NoHandlerRegistered { .. })
        ));
        assert_eq!(*m.state(), before);
        assert_eq!(
            m.genter(DomainCode::Txm, target(DomainCode::Sptm, 0, 0)),
            Err(DispatchError::WrongGate(DomainCode::Txm))
        );
    }

    #[test]
    fn svc_immediates() {
        let mut m = booted();
        let t = target(DomainCode::Sptm, 1, 0);
        assert_eq!(m.svc_call(SvcOrigin::Txm, 37, t), Ok(GateOutcome::InterruptsEnabled));
        assert!(!m.state().interrupts_masked);
        assert_eq!(m.svc_call(SvcOrigin::Txm, 38, t), Ok(GateOutcome::InterruptsMasked));
        assert!(m.state().interrupts_masked);
        assert_eq!(m.svc_call(SvcOrigin::Txm, 5, t), Ok(GateOutcome::Hang));
        assert_eq!(m.svc_call(SvcOrigin::Exclave, 0, t), Ok(GateOutcome::RoutedToSecureKernel));
        let fd = DispatchTarget::decode(0xfd_0000_0000);
        assert_eq!(m.svc_call(SvcOrigin::Txm, 0, fd), Ok(GateOutcome::Control(ControlCode::ReturnToCaller)));
        assert_eq!(m.hvc_call(fd), Ok(GateOutcome::Control(ControlCode::ReturnToCaller)));
        assert_eq!(m.state().current_state(), RUNTIME_STATE);
    }

    proptest! {
        #[test]
        fn out_of_range_inputs_are_always_rejected(state in 0u8..=255, ev in 0u8..=255) {
            let mut m = booted();
            m.reset_state(state);
            let r = m.step_state(ev, target(DomainCode::Sptm, 0, 0));
            if ev > MAX_EVENT {
                prop_assert_eq!(r, Err(DispatchError::InvalidEvent(ev)));
            } else if state > MAX_STATE {
                prop_assert_eq!(r, Err(DispatchError::InvalidState(state)));
            }
        }

        #[test]
        fn stepping_is_deterministic(events in proptest::collection::vec(0u8..=MAX_EVENT, 0..40)) {
            let run = || {
                let mut m = booted();
                events
                    .iter()
                    .map(|e| m.step_state(*e, target(DomainCode::Sptm, 0, 0)).map(|s| s.to))
                    .collect::<Vec<_>>()
            };
            prop_assert_eq!(run(), run());
        }

        #[test]
        fn interrupt_mask_changes_only_through_svc(ev in 0u8..=MAX_EVENT, state in 0u8..=MAX_STATE) {
            let mut m = booted();
            m.reset_state(state);
            let before = m.state().interrupts_masked;
            let _ = m.step_state(ev, target(DomainCode::Sptm, 0, 0));
            let _ = m.hvc_call(target(DomainCode::Sptm, 2, 0));
            prop_assert_eq!(m.state().interrupts_masked, before);
        }
    }
}
