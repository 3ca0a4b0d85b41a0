// SPDX-License-Identifier: Apache-2.0
//! Trusted execution monitor: boot registration, the kernel-call
//! convention and the selector registry.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::{Range, RangeInclusive};

use thiserror::Error;

use crate::core_model::{DispatchTableId, DomainCode, DomainSet, Status};
use crate::dispatcher::{DispatchError, DispatchRegistration, Monitor};
use crate::frame_table::{FrameError, FrameTable, FrameType, RetypeReport};
use crate::rules::{self, DataError};

/// Input words a selector may declare; slot 0 of the block holds the stack.
pub const MAX_INPUTS: u8 = 7;
pub const MAX_OUTPUTS: u8 = 6;
/// Size of the argument block handed to the monitor.
pub const ARG_SLOTS: usize = 8;
/// Selectors the dispatcher answers with [`UNSUPPORTED_STATUS`].
pub const UNSUPPORTED_BAND: RangeInclusive<u32> = 0x2e..=0x33;
pub const UNSUPPORTED_STATUS: u32 = 0x26;

/// TXM bootstrap table endpoints.
pub mod bootstrap_endpoint {
    pub const RX_SWEEP: u32 = 1;
    pub const REGISTER: u32 = 2;
    pub const RETYPE: u32 = 3;
    /// Recovered only as reading thread identification.
    pub const THREAD_INFO: u32 = 4;
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TxmSelector {
    pub selector: u32,
    pub name: String,
    pub num_input_args: u8,
    pub num_output_args: u8,
}

/// Immutable selector table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SelectorRegistry {
    by_id: BTreeMap<u32, TxmSelector>,
}

impl SelectorRegistry {
    pub fn parse(text: &str) -> Result<Self, DataError> {
        let mut by_id = BTreeMap::new();
        for row in rules::rows("txm_selectors.tsv", text) {
            let selector = u32::try_from(row.int(0)?).map_err(|_| row.error("selector too wide"))?;
            let count = |col, max: u8| {
                let v = row.int(col)?;
                u8::try_from(v)
                    .ok()
                    .filter(|v| *v <= max)
                    .ok_or_else(|| row.error(alloc::format!("argument count {v} exceeds {max}")))
            };
            let sel = TxmSelector {
                selector,
                name: row.cell(1)?.into(),
                num_input_args: count(2, MAX_INPUTS)?,
                num_output_args: count(3, MAX_OUTPUTS)?,
            };
            if UNSUPPORTED_BAND.contains(&selector) {
                return Err(row.error("selector inside the unsupported band"));
            }
            if by_id.values().any(|s: &TxmSelector| s.name == sel.name) {
                return Err(row.error("duplicate selector name"));
            }
            if by_id.insert(selector, sel).is_some() {
                return Err(row.error("duplicate selector id"));
            }
        }
        Ok(Self { by_id })
    }

    pub fn len(&self) -> usize {
        self.by_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_id.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &TxmSelector> {
        self.by_id.values()
    }

    pub fn lookup(&self, selector: u32) -> Result<&TxmSelector, TxmError> {
        if UNSUPPORTED_BAND.contains(&selector) {
            return Err(TxmError::Unsupported(selector));
        }
        self.by_id.get(&selector).ok_or(TxmError::SelectorUnknown(selector))
    }

    pub fn by_name(&self, name: &str) -> Option<&TxmSelector> {
        self.by_id.values().find(|s| s.name == name)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TxmError {
    #[error("selector {0:#x} is unknown")]
    SelectorUnknown(u32),
    #[error("selector {0:#x} is unsupported (status {UNSUPPORTED_STATUS:#x})")]
    Unsupported(u32),
    #[error("{name} takes {expected} inputs, got {got}")]
    ArgCountMismatch { name: String, expected: u8, got: usize },
    #[error("frame {frame} is not a TXM thread stack")]
    StackInvalid { frame: usize },
    #[error("TXM bootstrap endpoint {0} has no recovered behaviour")]
    NotRecovered(u32),
    #[error(transparent)]
    Dispatch(#[from] DispatchError),
    #[error(transparent)]
    Frame(#[from] FrameError),
}

impl TxmError {
    /// Status word written back to the caller.
    pub const fn return_code(&self) -> Option<u32> {
        match self {
            Self::Unsupported(_) => Some(UNSUPPORTED_STATUS),
            _ => None,
        }
    }
}

impl Status for TxmError {
    fn status_name(&self) -> &'static str {
        match self {
            Self::SelectorUnknown(_) | Self::Unsupported(_) => "SelectorUnknown",
            Self::ArgCountMismatch { .. } => "ArgCountMismatch",
            Self::StackInvalid { .. } => "StackInvalid",
            Self::NotRecovered(_) => "NotRecovered",
            Self::Dispatch(e) => e.status_name(),
            Self::Frame(e) => e.status_name(),
        }
    }
}

/// Per-call options; they affect only trace verbosity.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CallFlags {
    pub failure_fatal: bool,
    pub failure_silent: bool,
    pub skip_logs: bool,
}

/// A kernel call; `outputs` has the declared length after success.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TxmCall {
    pub selector: u32,
    pub flags: CallFlags,
    pub inputs: Vec<u64>,
    pub outputs: Vec<u64>,
    pub return_code: u32,
}

impl TxmCall {
    pub fn new(selector: u32, inputs: Vec<u64>) -> Self {
        Self { selector, flags: CallFlags::default(), inputs, outputs: Vec::new(), return_code: 0 }
    }
}

/// Thread stack backing a call; the frame must be typed TXM_THREAD_STACK.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TxmThreadStack {
    pub stack_id: u32,
    pub backing_frame: usize,
}

/// Argument block passed through the gate.
pub fn build_arg_block(call: &TxmCall, stack: &TxmThreadStack) -> [u64; ARG_SLOTS] {
    let mut block = [0; ARG_SLOTS];
    block[0] = stack.backing_frame as u64;
    for (slot, word) in block[1..].iter_mut().zip(&call.inputs) {
        *slot = *word;
    }
    block
}

/// Pre-gate validation on the kernel side.
pub fn check_call<'r>(
    registry: &'r SelectorRegistry,
    frames: &FrameTable,
    call: &TxmCall,
    stack: &TxmThreadStack,
) -> Result<&'r TxmSelector, TxmError> {
    let typed = frames.frame_type_of(stack.backing_frame).ok();
    if typed != Some(FrameType::TXM_THREAD_STACK) {
        return Err(TxmError::StackInvalid { frame: stack.backing_frame });
    }
    let sel = registry.lookup(call.selector)?;
    if call.inputs.len() != usize::from(sel.num_input_args) {
        return Err(TxmError::ArgCountMismatch {
            name: sel.name.clone(),
            expected: sel.num_input_args,
            got: call.inputs.len(),
        });
    }
    Ok(sel)
}

/// Audit stub run inside TXM: returns zeroed outputs of the declared length.
pub fn handle_call(registry: &SelectorRegistry, mut call: TxmCall) -> Result<TxmCall, TxmError> {
    let sel = registry.lookup(call.selector)?;
    call.outputs = vec![0; usize::from(sel.num_output_args)];
    call.return_code = 0;
    Ok(call)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TxmBootReport {
    pub registrations: Vec<DispatchRegistration>,
    pub swept: Vec<RetypeReport>,
}

/// Dispatch functions TXM registers: function 0 for XNU, function 1 for SPTM.
pub const BOOT_REGISTRATIONS: [(DispatchTableId, DomainSet); 2] =
    [(DispatchTableId(0), DomainSet::of(DomainCode::Xnu)), (DispatchTableId(1), DomainSet::of(DomainCode::Sptm))];

/// Retypes each frame of the rx region to TXM_RW on behalf of TXM.
pub fn rx_sweep(frames: &mut FrameTable, region: Range<usize>) -> Result<Vec<RetypeReport>, FrameError> {
    region
        .map(|f| {
            let current = frames.frame_type_of(f)?;
            frames.retype(DomainCode::Txm, f, current, FrameType::TXM_RW)
        })
        .collect()
}

/// Registration plus sweep, without gate traffic.
pub fn txm_boot(
    monitor: &mut Monitor,
    frames: &mut FrameTable,
    rx_region: Range<usize>,
) -> Result<TxmBootReport, TxmError> {
    let registrations = BOOT_REGISTRATIONS
        .iter()
        .map(|(table, perms)| monitor.register_dispatch_table(*table, *perms, DomainCode::Txm))
        .collect::<Result<Vec<_>, _>>()?;
    let swept = rx_sweep(frames, rx_region)?;
    Ok(TxmBootReport { registrations, swept })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rules::RuleSet;
    use core::num::NonZeroUsize;
    use proptest::prelude::*;

    fn world() -> (Monitor, FrameTable, SelectorRegistry) {
        let r = RuleSet::builtin();
        (Monitor::new(r.transitions), FrameTable::new(NonZeroUsize::new(16).unwrap(), r.frames), r.txm_selectors)
    }

    fn stack(frames: &mut FrameTable, f: usize) -> TxmThreadStack {
        frames.retype(DomainCode::Txm, f, FrameType::SPTM_UNTYPED, FrameType::TXM_THREAD_STACK).unwrap();
        TxmThreadStack { stack_id: 0, backing_frame: f }
    }

    #[test]
    fn registry_matches_table() {
        let (_, _, reg) = world();
        assert_eq!(reg.len(), 40);
        let get = |n| reg.by_name(n).map(|s| (s.num_input_args, s.num_output_args));
        assert_eq!(get("GetTrustCacheInfo"), Some((0, 4)));
        assert_eq!(get("LoadTrustCache"), Some((7, 0)));
        assert_eq!(get("Image4GetNonce"), Some((1, 1)));
        assert_eq!(get("Image4Dispatch"), Some((5, 0)));
        assert_eq!(reg.lookup(41), Err(TxmError::SelectorUnknown(41)));
        assert_eq!(reg.lookup(0x30).unwrap_err().return_code(), Some(0x26));
    }

    #[test]
    fn boot_registers_and_sweeps() {
        let (mut m, mut frames, _) = world();
        let report = txm_boot(&mut m, &mut frames, 4..8).unwrap();
        let perms: Vec<_> = report.registrations.iter().map(|r| r.permissions.bits()).collect();
        assert_eq!(perms, [0x2, 0x1]);
        assert!((4..8).all(|f| frames.frame_type_of(f) == Ok(FrameType::TXM_RW)));
        assert!(matches!(
            txm_boot(&mut m, &mut frames, 0..0),
            Err(TxmError::Dispatch(DispatchError::DuplicateRegistration(_)))
        ));
    }

    #[test]
    fn calls_are_validated() {
        let (_, mut frames, reg) = world();
        let s = stack(&mut frames, 2);
        let info = TxmCall::new(1, vec![]);
        check_call(&reg, &frames, &info, &s).unwrap();
        assert_eq!(handle_call(&reg, info.clone()).unwrap().outputs, [0; 4]);
        let assoc = TxmCall::new(reg.by_name("AssociateCodeSignature").unwrap().selector, vec![1; 4]);
        assert!(matches!(
            check_call(&reg, &frames, &assoc, &s),
            Err(TxmError::ArgCountMismatch { expected: 5, got: 4, .. })
        ));
        let bad = TxmThreadStack { stack_id: 1, backing_frame: 3 };
        assert_eq!(check_call(&reg, &frames, &info, &bad), Err(TxmError::StackInvalid { frame: 3 }));
    }

    #[test]
    fn arg_block_puts_stack_first() {
        let call = TxmCall::new(2, vec![10, 11, 12, 13, 14, 15, 16]);
        let block = build_arg_block(&call, &TxmThreadStack { stack_id: 0, backing_frame: 9 });
        assert_eq!(block, [9, 10, 11, 12, 13, 14, 15, 16]);
    }

    proptest! {
        #[test]
        fn txm_retypes_only_owned_or_untyped(from in 0u8..=62, to in 0u8..=62) {
            let (_, mut frames, _) = world();
            let from = FrameType::new(from).unwrap();
            let to = FrameType::new(to).unwrap();
            if from != FrameType::SPTM_UNTYPED {
                frames.retype(DomainCode::Sptm, 0, FrameType::SPTM_UNTYPED, from).unwrap();
            }
            let ok = frames.retype(DomainCode::Txm, 0, from, to).is_ok();
            let owner = frames.rules().caller_rule(from).map(|r| r.allowed_domain);
            if ok {
                prop_assert!(from == FrameType::SPTM_UNTYPED || owner == Some(DomainCode::Txm));
            }
        }
    }
}
