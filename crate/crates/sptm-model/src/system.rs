// SPDX-License-Identifier: Apache-2.0
//! The assembled world. Every cross-component call goes through the
//! monitor's gates and leaves exactly one trace record.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;
use core::num::NonZeroUsize;
use core::ops::Range;

use thiserror::Error;

use crate::core_model::{
    xnu_endpoint, DispatchTableId, DispatchTarget, DomainCode, DomainSet, EndpointId, PteBits, Status,
};
use crate::dispatcher::{
    event, DispatchError, DispatchRegistration, GateOutcome, Monitor, Step, SvcOrigin, RUNTIME_STATE,
};
use crate::exclave_resources::{
    ConclaveRequest, ConclaveState, ConclaveTransition, ResourceError, ResourceId, ResourceInfo, ResourceKind,
    ResourceRegistry, TaskId, TaskRecord, ThreadId, CONCLAVE_SERVICE_MAX, KERNEL_DOMAIN,
};
use crate::frame_table::{FrameError, FrameTable, FrameType};
use crate::page_mapper::{MapError, PageMapper, PageTableModel};
use crate::rules::RuleSet;
use crate::secure_kernel::{self as sk, Gl0Memory, Gl0ServiceRequest, SkEntry, SkError};
use crate::tightbeam::{EndpointHandle, MessageHandle, Mode, TbBuffer, TbError, Tightbeam, EP_TYPE_XNU};
use crate::trace::{Actor, Detail, Trace};
use crate::txm::{self, TxmCall, TxmError, TxmThreadStack};
use crate::xnuproxy::{EndpointReply, MessageTag, ProxyError, XnuProxy, IPC_BUFFER_SIZE};

/// Thread the kernel uses for exclave bring-up.
pub const KERNEL_THREAD: ThreadId = 0;
/// Status the firmware returns for its unimplemented named-buffer wrappers.
pub const SERVICE_NOT_SUPPORTED: u32 = 0x46;
/// GL0 address the service-request word is staged at.
const GL0_REQUEST_SLOT: u64 = 0x1000;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Config {
    pub frame_count: NonZeroUsize,
    pub hibernation: bool,
    /// Named-buffer creation reports [`SERVICE_NOT_SUPPORTED`].
    pub strict_firmware: bool,
    pub relax_sprr: bool,
    pub tightbeam_mode: Mode,
    /// Frames TXM sweeps to TXM_RW during boot.
    pub txm_rx_frames: Range<usize>,
    pub txm_stack_frame: usize,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            frame_count: NonZeroUsize::new(64).expect("nonzero"),
            hibernation: false,
            strict_firmware: false,
            relax_sprr: false,
            tightbeam_mode: Mode::Kernel,
            txm_rx_frames: 1..3,
            txm_stack_frame: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SimError {
    #[error("the monitor has not booted")]
    NotBooted,
    #[error("already booted")]
    AlreadyBooted,
    #[error("exclaves have not booted")]
    ExclavesNotBooted,
    #[error("task {0} may not use exclaves")]
    NotEntitled(TaskId),
    #[error("invalid argument: {0}")]
    InvalidArgument(&'static str),
    #[error("service not supported (status {SERVICE_NOT_SUPPORTED:#x})")]
    ServiceNotSupported,
    #[error("gate ended in {0}")]
    UnexpectedOutcome(&'static str),
    #[error("{0} has no gate for this call")]
    NoRoute(DomainCode),
    #[error("conclave {0} is suspended")]
    ConclaveSuspended(ResourceId),
    #[error(transparent)]
    Dispatch(#[from] DispatchError),
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error(transparent)]
    Map(#[from] MapError),
    #[error(transparent)]
    Txm(#[from] TxmError),
    #[error(transparent)]
    Sk(#[from] SkError),
    #[error(transparent)]
    Resource(#[from] ResourceError),
    #[error(transparent)]
    Proxy(#[from] ProxyError),
    #[error(transparent)]
    Tightbeam(#[from] TbError),
}

impl Status for SimError {
    fn status_name(&self) -> &'static str {
        match self {
            Self::NotBooted | Self::ExclavesNotBooted => "NotBooted",
            Self::AlreadyBooted => "AlreadyBooted",
            Self::NotEntitled(_) => "NotEntitled",
            Self::InvalidArgument(_) => "InvalidArgument",
            Self::ServiceNotSupported => "ServiceNotSupported",
            Self::UnexpectedOutcome(_) => "UnexpectedOutcome",
            Self::NoRoute(_) => "NoRoute",
            Self::ConclaveSuspended(_) => "ConclaveSuspended",
            Self::Dispatch(e) => e.status_name(),
            Self::Frame(e) => e.status_name(),
            Self::Map(e) => e.status_name(),
            Self::Txm(e) => e.status_name(),
            Self::Sk(e) => e.status_name(),
            Self::Resource(e) => e.status_name(),
            Self::Proxy(e) => e.status_name(),
            Self::Tightbeam(e) => e.status_name(),
        }
    }
}

fn outcome_of<T>(r: &Result<T, SimError>) -> &'static str {
    match r {
        Ok(_) => "ok",
        Err(e) => e.status_name(),
    }
}

/// Resource-creating control-trap operations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CreateOp {
    SensorCreate,
    AudioBufferCreate,
    NamedBufferCreate,
    NotificationResourceLookup,
}

impl CreateOp {
    pub const ALL: [CreateOp; 4] =
        [Self::SensorCreate, Self::AudioBufferCreate, Self::NamedBufferCreate, Self::NotificationResourceLookup];

    pub const fn name(self) -> &'static str {
        match self {
            Self::SensorCreate => "SENSOR_CREATE",
            Self::AudioBufferCreate => "AUDIO_BUFFER_CREATE",
            Self::NamedBufferCreate => "NAMED_BUFFER_CREATE",
            Self::NotificationResourceLookup => "NOTIFICATION_RESOURCE_LOOKUP",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|o| o.name() == s)
    }

    pub const fn kind(self) -> ResourceKind {
        match self {
            Self::SensorCreate => ResourceKind::Sensor,
            Self::AudioBufferCreate => ResourceKind::ArbitratedAudioBuffer,
            Self::NamedBufferCreate => ResourceKind::NamedBuffer,
            Self::NotificationResourceLookup => ResourceKind::Notification,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TrapRequest {
    Boot,
    Create { op: CreateOp, name: String },
    EndpointCall { identifier: u64, buffer: Vec<u8> },
}

impl TrapRequest {
    pub const fn name(&self) -> &'static str {
        match self {
            Self::Boot => "BOOT",
            Self::Create { op, .. } => op.name(),
            Self::EndpointCall { .. } => "ENDPOINT_CALL",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TrapResult {
    Booted,
    PortName(u32),
    /// The reply and the copied-out buffer image.
    Reply {
        reply: EndpointReply,
        buffer: Vec<u8>,
    },
}

/// Outcome of a routed call: the state path and the action's result.
struct Routed<R> {
    path: Vec<u8>,
    result: Result<R, SimError>,
}

fn path_string(path: &[u8]) -> String {
    use core::fmt::Write;
    let mut s = String::new();
    for (i, st) in path.iter().enumerate() {
        let _ = write!(s, "{}{st:#x}", if i == 0 { "" } else { ">" });
    }
    s
}

/// TXM and SK key their registrations by function number, not table name.
fn target_detail(d: Detail, t: DispatchTarget) -> Detail {
    let (domain, ep) = (t.domain(), t.endpoint());
    let name = domain.map_or("?", DomainCode::name);
    match domain {
        Some(DomainCode::Txm | DomainCode::Sk) => d.kv("target", format_args!("{name}/fn{}/{ep}", t.table().0)),
        _ => d.kv("target", format_args!("{name}/{}/{ep}", t.table().name().unwrap_or("?"))),
    }
}

fn step_detail(d: Detail, s: &Step) -> Detail {
    let d = d.hex("ev", u64::from(s.event)).hex("from", u64::from(s.from)).hex("to", u64::from(s.to));
    let d = d.kv("action", &s.action);
    match &s.handler {
        Some(h) => d.kv("handler", h),
        None => d,
    }
}

/// Monitor, guests and exclaves in one deterministic world.
#[derive(Debug, Clone)]
pub struct System {
    config: Config,
    rules: RuleSet,
    monitor: Monitor,
    frames: FrameTable,
    mapper: PageMapper,
    spaces: BTreeMap<usize, PageTableModel>,
    gl0_memory: Gl0Memory,
    registry: ResourceRegistry,
    proxy: XnuProxy,
    tightbeam: Tightbeam,
    trace: Trace,
    booted: bool,
}

impl System {
    /// A powered-on, unbooted world; `fixture` is the secure world's resource list.
    pub fn new(config: Config, rules: RuleSet, fixture: Vec<ResourceInfo>) -> Self {
        let mut mapper = PageMapper::new(rules.mapping.clone());
        mapper.relax_sprr = config.relax_sprr;
        Self {
            monitor: Monitor::new(rules.transitions.clone()),
            frames: FrameTable::new(config.frame_count, rules.frames.clone()),
            mapper,
            spaces: BTreeMap::new(),
            gl0_memory: Gl0Memory::new(),
            registry: ResourceRegistry::new(),
            proxy: XnuProxy::new(fixture),
            tightbeam: Tightbeam::new(config.tightbeam_mode, rules.transports.clone()),
            trace: Trace::new(),
            booted: false,
            config,
            rules,
        }
    }

    pub fn config(&self) -> &Config {
        &self.config
    }

    pub fn rules(&self) -> &RuleSet {
        &self.rules
    }

    pub fn monitor(&self) -> &Monitor {
        &self.monitor
    }

    pub fn frames(&self) -> &FrameTable {
        &self.frames
    }

    pub fn space(&self, root: usize) -> Option<&PageTableModel> {
        self.spaces.get(&root)
    }

    pub fn registry(&self) -> &ResourceRegistry {
        &self.registry
    }

    pub fn proxy(&self) -> &XnuProxy {
        &self.proxy
    }

    pub fn tightbeam(&self) -> &Tightbeam {
        &self.tightbeam
    }

    pub fn trace(&self) -> &Trace {
        &self.trace
    }

    pub fn is_booted(&self) -> bool {
        self.booted
    }

    fn record<T>(&mut self, actor: Actor, op: &str, detail: Detail, r: &Result<T, SimError>) {
        self.trace.push(actor, op, detail, outcome_of(r));
    }

    fn require_booted(&self) -> Result<(), SimError> {
        if self.booted {
            Ok(())
        } else {
            Err(SimError::NotBooted)
        }
    }

    // ---- gates ----

    /// Enters through the caller's gate, runs `action`, then returns.
    /// The return step runs even when the action fails.
    fn route<R>(
        &mut self,
        caller: DomainCode,
        target: DispatchTarget,
        action: impl FnOnce(&mut Self) -> Result<R, SimError>,
    ) -> Routed<R> {
        let mut path = alloc::vec![self.monitor.state().current_state()];
        let entered = match caller {
            DomainCode::Xnu | DomainCode::XnuHib => self.monitor.genter(caller, target),
            DomainCode::Txm => self.monitor.svc_call(SvcOrigin::Txm, 0, target),
            DomainCode::Sk => self.monitor.hvc_call(target),
            DomainCode::Sptm => return Routed { path, result: Err(SimError::NoRoute(caller)) },
        };
        match entered {
            Ok(GateOutcome::Dispatched(step)) => path.push(step.to),
            Ok(other) => return Routed { path, result: Err(SimError::UnexpectedOutcome(other.status_name())) },
            Err(e) => return Routed { path, result: Err(e.into()) },
        }
        let result = action(self);
        match self.monitor.complete(target) {
            Ok(step) => path.push(step.to),
            Err(e) => return Routed { path, result: result.and(Err(e.into())) },
        }
        Routed { path, result }
    }

    fn sptm_target(table: DispatchTableId, endpoint: EndpointId) -> DispatchTarget {
        DispatchTarget::new(DomainCode::Sptm, table, endpoint)
    }

    /// Raw GENTER from a normal-world domain; the monitor stays where it lands.
    pub fn genter(&mut self, caller: DomainCode, target: DispatchTarget) -> Result<GateOutcome, SimError> {
        let r = self.monitor.genter(caller, target).map_err(SimError::from);
        let mut d = target_detail(Detail::new(), target);
        if let Ok(GateOutcome::Dispatched(s)) = &r {
            d = step_detail(d, s);
        }
        self.record(Actor::Domain(caller), "genter", d, &r);
        r
    }

    pub fn svc(&mut self, origin: SvcOrigin, imm: u16, target: DispatchTarget) -> Result<GateOutcome, SimError> {
        let actor = match origin {
            SvcOrigin::Txm => DomainCode::Txm,
            SvcOrigin::Exclave => DomainCode::Sk,
        };
        let r = self.monitor.svc_call(origin, imm, target).map_err(SimError::from);
        let mut d = target_detail(Detail::new().kv("imm", imm), target);
        if let Ok(GateOutcome::Dispatched(s)) = &r {
            d = step_detail(d, s);
        }
        let outcome = match &r {
            Ok(o) => o.status_name(),
            Err(e) => e.status_name(),
        };
        self.trace.push(Actor::Domain(actor), "svc", d, outcome);
        r
    }

    pub fn hvc(&mut self, target: DispatchTarget) -> Result<GateOutcome, SimError> {
        let r = self.monitor.hvc_call(target).map_err(SimError::from);
        let mut d = target_detail(Detail::new(), target);
        if let Ok(GateOutcome::Dispatched(s)) = &r {
            d = step_detail(d, s);
        }
        let outcome = match &r {
            Ok(o) => o.status_name(),
            Err(e) => e.status_name(),
        };
        self.trace.push(Actor::Domain(DomainCode::Sk), "hvc", d, outcome);
        r
    }

    /// Return event back towards the caller.
    pub fn complete(&mut self, target: DispatchTarget) -> Result<Step, SimError> {
        let r = self.monitor.complete(target).map_err(SimError::from);
        let d = match &r {
            Ok(s) => step_detail(Detail::new(), s),
            Err(_) => Detail::new().hex("state", u64::from(self.monitor.state().current_state())),
        };
        let actor = self.monitor.state().caller_domain.unwrap_or(DomainCode::Sptm);
        self.record(Actor::Domain(actor), "complete", d, &r);
        r
    }

    // ---- boot ----

    /// Monitor bootstrap: dispatch tables, IOMMUs, TXM then SK bring-up,
    /// then the runtime state.
    pub fn boot(&mut self) -> Result<(), SimError> {
        if self.booted {
            let r = Err(SimError::AlreadyBooted);
            self.record(Actor::Domain(DomainCode::Sptm), "boot", Detail::new(), &r);
            return r;
        }
        let mut tables = alloc::vec![
            (DispatchTableId::XNU_BOOTSTRAP, DomainSet::of(DomainCode::Xnu)),
            (DispatchTableId::TXM_BOOTSTRAP, DomainSet::of(DomainCode::Txm)),
            (DispatchTableId::SK_BOOTSTRAP, DomainSet::of(DomainCode::Sk)),
        ];
        if self.config.hibernation {
            tables.push((DispatchTableId::HIB, DomainSet::of(DomainCode::XnuHib)));
        }
        for (table, perms) in tables {
            let r = self.monitor.register_dispatch_table(table, perms, DomainCode::Sptm).map_err(SimError::from);
            let d = Detail::new().kv("table", table.name().unwrap_or("?")).kv("perms", perms);
            self.record(Actor::Domain(DomainCode::Sptm), "register_dispatch_table", d, &r);
            r?;
        }
        for reg in self.rules.iommus.clone() {
            let r = self.monitor.register_iommu(&reg).map_err(SimError::from);
            let mut d = Detail::new().kv("iommu", reg.iommu_id).kv("table", reg.table.name().unwrap_or("?"));
            d = d.kv("perms", reg.permissions);
            if let Some(p) = reg.secondary {
                d = d.kv("secondary_perms", p);
            }
            if reg.unlisted {
                d = d.kv("flag", "unlisted");
            }
            self.record(Actor::Domain(DomainCode::Sptm), "register_iommu", d, &r);
            r?;
        }
        self.boot_txm()?;
        self.boot_sk()?;
        self.monitor.reset_state(RUNTIME_STATE);
        let r: Result<(), SimError> = Ok(());
        self.record(Actor::Domain(DomainCode::Sptm), "enter_runtime", Detail::new().hex("state", 5), &r);
        self.booted = true;
        Ok(())
    }

    /// Direct registration by `owner`, outside the bootstrap sequence.
    pub fn register_dispatch_table(
        &mut self,
        owner: DomainCode,
        table: DispatchTableId,
        perms: DomainSet,
    ) -> Result<DispatchRegistration, SimError> {
        let r = self.monitor.register_dispatch_table(table, perms, owner).map_err(SimError::from);
        let d = Detail::new().kv("table", table.name().unwrap_or("?")).kv("perms", perms);
        self.record(Actor::Domain(owner), "register_dispatch_table", d, &r);
        r
    }

    fn boot_step(&mut self, ev: u8, guest: DomainCode) -> Result<(), SimError> {
        let target = DispatchTarget::new(guest, DispatchTableId(0), 0);
        let r = self.monitor.step_state(ev, target).map_err(SimError::from);
        let d = match &r {
            Ok(s) => step_detail(Detail::new(), s),
            Err(_) => Detail::new().hex("ev", u64::from(ev)),
        };
        self.record(Actor::Domain(DomainCode::Sptm), "boot_guest", d.kv("guest", guest.name()), &r);
        r.map(drop)
    }

    fn boot_return(&mut self, guest: DomainCode) -> Result<(), SimError> {
        let target = DispatchTarget::new(guest, DispatchTableId(0), 0);
        self.complete(target).map(drop)
    }

    /// One bootstrap-table call issued by a guest, traced as one record.
    fn guest_call<R>(
        &mut self,
        guest: DomainCode,
        table: DispatchTableId,
        endpoint: EndpointId,
        op: &str,
        detail: Detail,
        action: impl FnOnce(&mut Self) -> Result<R, SimError>,
    ) -> Result<R, SimError> {
        let target = Self::sptm_target(table, endpoint);
        let routed = self.route(guest, target, action);
        let d = target_detail(detail, target).kv("path", path_string(&routed.path));
        self.record(Actor::Domain(guest), op, d, &routed.result);
        routed.result
    }

    fn boot_txm(&mut self) -> Result<(), SimError> {
        self.boot_step(event::BOOT_TXM, DomainCode::Txm)?;
        let table = DispatchTableId::TXM_BOOTSTRAP;
        let rx = self.config.txm_rx_frames.clone();
        let d = Detail::new().kv("frames", format_args!("{}..{}", rx.start, rx.end));
        self.guest_call(DomainCode::Txm, table, txm::bootstrap_endpoint::RX_SWEEP, "txm_rx_sweep", d, |s| {
            Ok(txm::rx_sweep(&mut s.frames, rx)?)
        })?;
        let stack = self.config.txm_stack_frame;
        let d = Detail::new().kv("frame", stack).kv("to", FrameType::TXM_THREAD_STACK);
        self.guest_call(DomainCode::Txm, table, txm::bootstrap_endpoint::RETYPE, "retype", d, |s| {
            let current = s.frames.frame_type_of(stack)?;
            Ok(s.frames.retype(DomainCode::Txm, stack, current, FrameType::TXM_THREAD_STACK)?)
        })?;
        for (function, perms) in txm::BOOT_REGISTRATIONS {
            let d = Detail::new().kv("function", function.0).kv("perms", perms);
            self.guest_call(
                DomainCode::Txm,
                table,
                txm::bootstrap_endpoint::REGISTER,
                "register_dispatch_table",
                d,
                |s| Ok(s.monitor.register_dispatch_table(function, perms, DomainCode::Txm)?),
            )?;
        }
        self.boot_return(DomainCode::Txm)
    }

    fn boot_sk(&mut self) -> Result<(), SimError> {
        self.boot_step(event::BOOT_SK, DomainCode::Sk)?;
        for (function, perms) in sk::BOOT_REGISTRATIONS {
            let d = Detail::new().kv("function", function.0).kv("perms", perms);
            let table = DispatchTableId::SK_BOOTSTRAP;
            self.guest_call(
                DomainCode::Sk,
                table,
                sk::bootstrap_endpoint::REGISTER,
                "register_dispatch_table",
                d,
                |s| Ok(s.monitor.register_dispatch_table(function, perms, DomainCode::Sk)?),
            )?;
        }
        self.boot_return(DomainCode::Sk)
    }

    // ---- memory ----

    /// Retype through the caller's own route: XNU via GENTER, TXM via
    /// SVC and SK via HVC into its bootstrap table. SPTM retypes in place.
    pub fn retype(
        &mut self,
        caller: DomainCode,
        frame: usize,
        previous: FrameType,
        new_type: FrameType,
    ) -> Result<(), SimError> {
        let d = Detail::new().kv("frame", frame).kv("from", previous).kv("to", new_type);
        let action = move |s: &mut Self| -> Result<(), SimError> {
            s.frames.retype(caller, frame, previous, new_type)?;
            Ok(())
        };
        match caller {
            DomainCode::Sptm => {
                let r = action(self);
                self.record(Actor::Domain(caller), "retype", d, &r);
                r
            }
            DomainCode::Xnu => {
                let target = Self::sptm_target(DispatchTableId::XNU_BOOTSTRAP, xnu_endpoint::RETYPE);
                self.routed_record(caller, "retype", target, d, action)
            }
            DomainCode::Txm => {
                let table = DispatchTableId::TXM_BOOTSTRAP;
                self.guest_call(caller, table, txm::bootstrap_endpoint::RETYPE, "retype", d, action)
            }
            DomainCode::Sk => {
                let table = DispatchTableId::SK_BOOTSTRAP;
                self.guest_call(caller, table, sk::bootstrap_endpoint::RETYPE, "retype", d, action)
            }
            DomainCode::XnuHib => {
                let r = Err(SimError::NoRoute(caller));
                self.record(Actor::Domain(caller), "retype", d, &r);
                r
            }
        }
    }

    fn routed_record<R>(
        &mut self,
        caller: DomainCode,
        op: &str,
        target: DispatchTarget,
        detail: Detail,
        action: impl FnOnce(&mut Self) -> Result<R, SimError>,
    ) -> Result<R, SimError> {
        let routed = if self.booted {
            self.route(caller, target, action)
        } else {
            Routed { path: Vec::new(), result: Err(SimError::NotBooted) }
        };
        let d = target_detail(detail, target).kv("path", path_string(&routed.path));
        self.record(Actor::Domain(caller), op, d, &routed.result);
        routed.result
    }

    /// XNU maps `frame` at `va` through table frame `ttep` of the space rooted at `root`.
    pub fn map_page(&mut self, root: usize, ttep: usize, va: u64, frame: usize, pte: PteBits) -> Result<(), SimError> {
        let d = Detail::new().kv("root", root).kv("ttep", ttep).hex("va", va).kv("frame", frame);
        let d = d.hex("sprr_index", u64::from(pte.sprr_index()));
        let target = Self::sptm_target(DispatchTableId::XNU_BOOTSTRAP, xnu_endpoint::MAP_PAGE);
        let mut warning = None;
        let r = self.routed_record(DomainCode::Xnu, "map_page", target, d, |s| {
            let space = s.spaces.entry(root).or_insert_with(|| PageTableModel::new(root));
            let out = s.mapper.map_page(space, &mut s.frames, DomainCode::Xnu, ttep, va, frame, pte)?;
            warning = out.sprr_warning;
            Ok(())
        });
        if let Some(w) = warning {
            let ok: Result<(), SimError> = Ok(());
            let d = Detail::new().kv("frame", frame).kv("warning", w.status_name());
            self.record(Actor::Domain(DomainCode::Sptm), "sprr_warning", d, &ok);
        }
        r
    }

    // ---- guests ----

    /// Kernel call into TXM: validated on the kernel side, then entered.
    pub fn txm_call(&mut self, selector: u32, inputs: Vec<u64>) -> Result<TxmCall, SimError> {
        let call = TxmCall::new(selector, inputs);
        let stack = TxmThreadStack { stack_id: 0, backing_frame: self.config.txm_stack_frame };
        let target = DispatchTarget::new(DomainCode::Txm, DispatchTableId(0), selector);
        let mut d = Detail::new().hex("selector", u64::from(selector));
        if let Ok(sel) = self.rules.txm_selectors.lookup(selector) {
            d = d.kv("name", &sel.name);
        }
        if let Err(e) = txm::check_call(&self.rules.txm_selectors, &self.frames, &call, &stack) {
            if let Some(code) = e.return_code() {
                d = d.hex("return_code", u64::from(code));
            }
            let r = Err(SimError::from(e));
            self.record(Actor::Domain(DomainCode::Xnu), "txm_kernel_call", target_detail(d, target), &r);
            return r;
        }
        self.routed_record(DomainCode::Xnu, "txm_kernel_call", target, d, |s| {
            Ok(txm::handle_call(&s.rules.txm_selectors, call)?)
        })
    }

    /// XNU enters SK through dispatch function 0.
    pub fn sk_enter(&mut self, endpoint: EndpointId) -> Result<SkEntry, SimError> {
        let target = DispatchTarget::new(DomainCode::Sk, DispatchTableId(0), endpoint);
        self.routed_record(DomainCode::Xnu, "sk_enter", target, Detail::new(), |s| {
            Ok(sk::sk_dispatch(&s.rules.sk_retypes, endpoint)?)
        })
    }

    /// A GL0 SVC #0 service request for `selector` on `frame`.
    pub fn gl0_service(
        &mut self,
        selector: u8,
        frame: usize,
        pointer_low_bits: u64,
    ) -> Result<sk::ServiceOutcome, SimError> {
        let target = DispatchTarget::new(DomainCode::Sk, DispatchTableId(0), 0);
        let d = Detail::new().kv("selector", selector).kv("frame", frame);
        let gate = self.monitor.svc_call(SvcOrigin::Exclave, 0, target).map_err(SimError::from);
        let r = gate.and_then(|o| match o {
            GateOutcome::RoutedToSecureKernel => {
                self.gl0_memory.insert(GL0_REQUEST_SLOT, u64::from(selector) << 58);
                let request = Gl0ServiceRequest {
                    raw_pointer: GL0_REQUEST_SLOT | (pointer_low_bits & 0x3f),
                    args: [frame as u64, 0],
                };
                Ok(sk::sk_svc0(&self.rules.sk_retypes, &self.gl0_memory, &mut self.frames, request)?)
            }
            other => Err(SimError::UnexpectedOutcome(other.status_name())),
        });
        let outcome = match &r {
            Ok(o) => o.name(),
            Err(e) => e.status_name(),
        };
        self.trace.push(Actor::Domain(DomainCode::Sk), "gl0_svc", d, outcome);
        r
    }

    // ---- exclaves ----

    /// Proxy setup, resource enumeration, conclave control connections and ports.
    pub fn exclaves_boot(&mut self) -> Result<(), SimError> {
        let r = self.exclaves_boot_inner();
        let d = Detail::new().kv("resources", self.registry.resources().count());
        self.record(Actor::Domain(DomainCode::Xnu), "exclaves_boot", d, &r);
        r
    }

    fn exclaves_boot_inner(&mut self) -> Result<(), SimError> {
        self.require_booted()?;
        if self.proxy.is_booted() {
            return Err(SimError::AlreadyBooted);
        }
        let scid = self.proxy.setup()?;
        let ok: Result<(), SimError> = Ok(());
        self.record(Actor::Domain(DomainCode::Xnu), "xnuproxy_setup", Detail::new().kv("scid", scid), &ok);
        let infos = self.proxy.enumerate_resources(KERNEL_THREAD)?;
        for info in infos {
            let d = Detail::new().kv("domain", &info.domain).kv("name", &info.name).kv("kind", info.kind);
            let r = self.registry.insert(info).map_err(SimError::from);
            let d = match &r {
                Ok(id) => d.kv("id", id),
                Err(_) => d,
            };
            self.record(Actor::Domain(DomainCode::Xnu), "resource_init", d, &r);
            r?;
        }
        let managers: Vec<ResourceId> =
            self.registry.resources().filter(|r| r.kind == ResourceKind::ConclaveManager).map(|r| r.id).collect();
        for m in managers {
            let r = self.control_connection(m);
            let d = Detail::new().kv("manager", m);
            let d = match &r {
                Ok(c) => d.kv("conn", c),
                Err(_) => d,
            };
            self.record(Actor::Domain(DomainCode::Xnu), "conclave_control_connect", d, &r);
            r?;
        }
        self.registry.populate_conclave_services()?;
        self.registry.allocate_ports();
        Ok(())
    }

    fn control_connection(&mut self, manager: ResourceId) -> Result<u32, SimError> {
        let ep = self.tightbeam.endpoint_create(EP_TYPE_XNU, manager, 0)?;
        let conn = self.tightbeam.connection_create_with_endpoint(ep)?;
        self.registry.set_control_connection(manager, conn)?;
        Ok(conn)
    }

    pub fn add_task(&mut self, task: TaskRecord) {
        let d = Detail::new().kv("name", &task.name).kv("thread", task.thread).kv("launchd", task.is_launchd);
        let d = task.entitlements.iter().fold(d, |d, e| d.kv("ent", e));
        let actor = Actor::Task(task.task_id);
        self.registry.add_task(task);
        self.trace.push(actor, "task_create", d, "ok");
    }

    /// `caller` attaches `task` to the conclave managed by `manager_name`.
    pub fn conclave_attach(
        &mut self,
        caller: TaskId,
        task: TaskId,
        manager_name: &str,
    ) -> Result<ResourceId, SimError> {
        let r = self
            .registry
            .lookup(KERNEL_DOMAIN, manager_name, Some(ResourceKind::ConclaveManager))
            .and_then(|m| self.registry.conclave_attach(task, caller, m).map(|()| m))
            .map_err(SimError::from);
        let d = Detail::new().kv("task", task).kv("conclave", manager_name);
        self.record(Actor::Task(caller), "conclave_attach", d, &r);
        r
    }

    /// Lifecycle request on the task's own conclave.
    pub fn conclave_request(&mut self, task: TaskId, request: ConclaveRequest) -> Result<ConclaveTransition, SimError> {
        let r = self.conclave_request_inner(task, request);
        let mut d = Detail::new().kv("request", request.name());
        if let Ok(t) = &r {
            d = d.kv("from", t.from.name()).kv("to", t.to.name());
            if let Some(c) = t.closed_connection {
                d = d.kv("closed_conn", c);
            }
        }
        self.record(Actor::Task(task), "conclave_transition", d, &r);
        r
    }

    fn conclave_request_inner(
        &mut self,
        task: TaskId,
        request: ConclaveRequest,
    ) -> Result<ConclaveTransition, SimError> {
        let manager = self.registry.task(task)?.conclave.ok_or(SimError::NotEntitled(task))?;
        let t = self.registry.conclave_transition(manager, request)?;
        if let Some(conn) = t.closed_connection {
            self.tightbeam.connection_close(conn)?;
        }
        Ok(t)
    }

    /// The user-facing control trap.
    pub fn ctl_trap(&mut self, task: TaskId, request: TrapRequest) -> Result<TrapResult, SimError> {
        let mut d = Detail::new().kv("op", request.name());
        match &request {
            TrapRequest::Create { name, .. } => d = d.kv("name", name),
            TrapRequest::EndpointCall { identifier, buffer } => d = d.kv("id", identifier).kv("len", buffer.len()),
            TrapRequest::Boot => {}
        }
        let r = self.ctl_trap_inner(task, request);
        if let Ok(TrapResult::PortName(n)) = &r {
            d = d.hex("port", u64::from(*n));
        }
        self.record(Actor::Task(task), "exclaves_ctl_trap", d, &r);
        r
    }

    fn ctl_trap_inner(&mut self, task: TaskId, request: TrapRequest) -> Result<TrapResult, SimError> {
        let rec = self.registry.task(task).map_err(|_| SimError::NotEntitled(task))?;
        if !rec.may_use_exclaves() {
            return Err(SimError::NotEntitled(task));
        }
        let thread = rec.thread;
        let conclave = rec.conclave;
        if request == TrapRequest::Boot {
            return self.exclaves_boot_inner().map(|()| TrapResult::Booted);
        }
        if !self.proxy.is_booted() {
            return Err(SimError::ExclavesNotBooted);
        }
        match request {
            TrapRequest::Boot => unreachable!("handled above"),
            TrapRequest::Create { op, name } => {
                if op == CreateOp::NamedBufferCreate && self.config.strict_firmware {
                    return Err(SimError::ServiceNotSupported);
                }
                let domain = self.registry.task_domain(task)?.ok_or(SimError::NotEntitled(task))?;
                let id = self.registry.lookup(&domain, &name, Some(op.kind()))?;
                self.registry.retain(id)?;
                match self.registry.create_port_name(id, task) {
                    Ok(n) => Ok(TrapResult::PortName(n)),
                    Err(e) => {
                        self.registry.release(id)?;
                        Err(e.into())
                    }
                }
            }
            TrapRequest::EndpointCall { identifier, buffer } => {
                if buffer.len() != IPC_BUFFER_SIZE {
                    return Err(SimError::InvalidArgument("buffer size"));
                }
                self.proxy.ensure_ipc_buffer(thread)?;
                self.proxy.ipc_buffer_mut(thread)?.copy_in(&buffer)?;
                if identifier >= CONCLAVE_SERVICE_MAX as u64 {
                    return Err(SimError::InvalidArgument("identifier"));
                }
                let member = match conclave {
                    Some(_) => self.registry.conclave_has_service(conclave, identifier),
                    None => self
                        .registry
                        .resource(identifier)
                        .is_ok_and(|r| r.kind == ResourceKind::Service && r.domain == KERNEL_DOMAIN),
                };
                if !member {
                    return Err(SimError::InvalidArgument("service not in conclave"));
                }
                let tag = self.proxy.ipc_buffer_mut(thread)?.tag();
                let reply = self.endpoint_call(Actor::Task(task), thread, identifier, tag)?;
                let buffer = self.proxy.ipc_buffer_mut(thread)?.to_bytes();
                Ok(TrapResult::Reply { reply, buffer })
            }
        }
    }

    /// The single kernel entry into the secure world for RPC.
    fn endpoint_call(
        &mut self,
        actor: Actor,
        thread: ThreadId,
        endpoint: ResourceId,
        tag: MessageTag,
    ) -> Result<EndpointReply, SimError> {
        let mut path = Vec::new();
        let r = self.endpoint_call_inner(thread, endpoint, tag, &mut path);
        let scid = self.proxy.thread(thread).scid.map_or(-1, |s| s as i64);
        let d = Detail::new().kv("endpoint", endpoint).hex("tag", tag.pack()).kv("scid", scid);
        self.record(actor, "exclaves_endpoint_call", d.kv("path", path_string(&path)), &r);
        r
    }

    fn endpoint_call_inner(
        &mut self,
        thread: ThreadId,
        endpoint: ResourceId,
        tag: MessageTag,
        path: &mut Vec<u8>,
    ) -> Result<EndpointReply, SimError> {
        self.proxy.begin_endpoint_call(thread, &self.registry, endpoint, tag)?;
        let target = DispatchTarget::new(DomainCode::Sk, DispatchTableId(0), sk::endpoint::ENTER);
        let routed =
            self.route(DomainCode::Xnu, target, |s| match sk::sk_dispatch(&s.rules.sk_retypes, sk::endpoint::ENTER)? {
                SkEntry::EnterGl0 => Ok(s.proxy.deliver(thread)?),
                other => Err(SimError::UnexpectedOutcome(other.name())),
            });
        *path = routed.path;
        match routed.result {
            Ok(()) => Ok(self.proxy.end_endpoint_call(thread)?),
            Err(e) => {
                self.proxy.abort_endpoint_call(thread);
                Err(e)
            }
        }
    }

    // ---- tightbeam ----

    pub fn tb_endpoint_create(
        &mut self,
        task: TaskId,
        ep_type: u32,
        id: u64,
        options: u64,
    ) -> Result<EndpointHandle, SimError> {
        let r = self.tightbeam.endpoint_create(ep_type, id, options).map_err(SimError::from);
        let d = Detail::new().kv("type", ep_type).kv("data", id).hex("options", options);
        let d = match &r {
            Ok(h) => d.kv("ep", h),
            Err(_) => d,
        };
        self.record(Actor::Task(task), "tb_endpoint_create", d, &r);
        r
    }

    pub fn tb_connection_create(&mut self, task: TaskId, ep: EndpointHandle) -> Result<u32, SimError> {
        let r = self.tightbeam.connection_create_with_endpoint(ep).map_err(SimError::from);
        let mut d = Detail::new().kv("ep", ep);
        if let Ok(c) = &r {
            let kind = self.tightbeam.connection(*c).map(|c| c.transport().kind.name()).unwrap_or("?");
            d = d.kv("conn", c).kv("transport", kind);
        }
        self.record(Actor::Task(task), "tb_connection_create_with_endpoint", d, &r);
        r
    }

    pub fn tb_activate(&mut self, task: TaskId, conn: u32) -> Result<usize, SimError> {
        let r = self.tightbeam.connection_activate(conn).map_err(SimError::from);
        let mut d = Detail::new().kv("conn", conn);
        if let Ok(n) = &r {
            d = d.kv("notified", n);
        }
        self.record(Actor::Task(task), "tb_connection_activate", d, &r);
        r
    }

    pub fn tb_message_construct(
        &mut self,
        task: TaskId,
        conn: u32,
        size: u64,
        option: u32,
        wrapping: u64,
    ) -> Result<MessageHandle, SimError> {
        let mut buffer = TbBuffer::new(size);
        buffer.wrapping = wrapping;
        let r = self.tightbeam.message_construct(conn, size, option, Some(buffer)).map_err(SimError::from);
        let mut d = Detail::new().kv("conn", conn).kv("size", size).kv("option", option);
        if let Ok(m) = &r {
            let disp = self.tightbeam.message(*m).map(|m| m.disposition.name()).unwrap_or("?");
            d = d.kv("msg", m).kv("disposition", disp);
        }
        self.record(Actor::Task(task), "tb_message_construct", d, &r);
        r
    }

    pub fn tb_message_encode(&mut self, task: TaskId, msg: MessageHandle, bytes: &[u8]) -> Result<u64, SimError> {
        let r = self.tightbeam.message_encode(msg, bytes).map_err(SimError::from);
        let mut d = Detail::new().kv("msg", msg).kv("len", bytes.len());
        if let Ok(off) = &r {
            d = d.kv("offset", off);
        }
        self.record(Actor::Task(task), "tb_message_encode", d, &r);
        r
    }

    pub fn tb_message_complete(&mut self, task: TaskId, msg: MessageHandle) -> Result<(), SimError> {
        let r = self.tightbeam.message_complete(msg).map_err(SimError::from);
        self.record(Actor::Task(task), "tb_message_complete", Detail::new().kv("msg", msg), &r);
        r
    }

    /// Sends a ready query; the reply, when wanted, comes back RECEIVED.
    pub fn tb_send_query(
        &mut self,
        task: TaskId,
        conn: u32,
        msg: MessageHandle,
        want_reply: bool,
    ) -> Result<Option<MessageHandle>, SimError> {
        let mut d = Detail::new().kv("conn", conn).kv("msg", msg);
        let r = self.tb_send_query_inner(task, conn, msg, want_reply, &mut d);
        if let Ok(Some(reply)) = &r {
            d = d.kv("reply", reply);
        }
        self.record(Actor::Task(task), "tb_connection_send_query", d, &r);
        r
    }

    fn tb_send_query_inner(
        &mut self,
        task: TaskId,
        conn: u32,
        msg: MessageHandle,
        want_reply: bool,
        d: &mut Detail,
    ) -> Result<Option<MessageHandle>, SimError> {
        let thread = self.registry.task(task)?.thread;
        let endpoint = self.tightbeam.connection(conn)?.transport().endpoint_data;
        self.check_conclave_reachable(conn, endpoint)?;
        let wire = self.tightbeam.prepare_send(conn, msg)?;
        *d = core::mem::take(d).hex("tag", wire.tag).kv("endpoint", wire.endpoint_data);
        self.proxy.ensure_ipc_buffer(thread)?;
        let reply = self.endpoint_call(Actor::Task(task), thread, wire.endpoint_data, wire.message_tag())?;
        if want_reply {
            Ok(Some(self.tightbeam.receive_reply(conn, reply.tag)?))
        } else {
            Ok(None)
        }
    }

    /// Suspended conclaves take no calls; stopped ones have no IPC at all.
    fn check_conclave_reachable(&self, conn: u32, endpoint: ResourceId) -> Result<(), SimError> {
        let Ok(res) = self.registry.resource(endpoint) else {
            return Ok(());
        };
        let manager = match res.kind {
            ResourceKind::ConclaveManager => Some(res.id),
            _ => self.registry.conclave_of_domain(&res.domain),
        };
        let Some(manager) = manager else {
            return Ok(());
        };
        match self.registry.conclave(manager)?.state {
            ConclaveState::Suspended => Err(SimError::ConclaveSuspended(manager)),
            ConclaveState::Stopped => Err(TbError::ConnectionClosed(conn).into()),
            _ => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exclave_resources::{entitlement, IpcSpace};
    use crate::tightbeam::{Disposition, MessageState};
    use crate::xnuproxy::ThreadFlags;
    use alloc::string::ToString;

    const AUDIO: &str = "com.apple.audiomxd.conclave";

    fn fixture() -> Vec<ResourceInfo> {
        let r =
            |domain: &str, name: &str, kind| ResourceInfo { domain: domain.into(), name: name.into(), kind, id: None };
        alloc::vec![
            r(KERNEL_DOMAIN, "com.apple.service.ExclavesKernelService", ResourceKind::Service),
            r(KERNEL_DOMAIN, AUDIO, ResourceKind::ConclaveManager),
            r(AUDIO, "com.apple.sensors.mic", ResourceKind::Sensor),
            r(AUDIO, "com.apple.audio.AudioCaptureServer", ResourceKind::Service),
            r(AUDIO, "com.apple.audio.buffer", ResourceKind::NamedBuffer),
        ]
    }

    fn task(id: TaskId, ents: &[&str], launchd: bool) -> TaskRecord {
        TaskRecord {
            task_id: id,
            name: alloc::format!("task{id}"),
            entitlements: ents.iter().map(|s| s.to_string()).collect(),
            is_launchd: launchd,
            is_kernel: false,
            conclave: None,
            space: IpcSpace::default(),
            thread: 100 + id,
        }
    }

    fn world(config: Config) -> System {
        let mut s = System::new(config, RuleSet::builtin(), fixture());
        s.boot().unwrap();
        s.exclaves_boot().unwrap();
        s.add_task(task(1, &[], true));
        s.add_task(task(2, &[entitlement::CONCLAVE_HOST], false));
        s.add_task(task(3, &[], false));
        s
    }

    fn running(config: Config) -> System {
        let mut s = world(config);
        s.conclave_attach(1, 2, AUDIO).unwrap();
        s.conclave_request(2, ConclaveRequest::Launch).unwrap();
        s
    }

    #[test]
    fn boot_registers_and_lands_in_runtime() {
        let mut s = System::new(Config::default(), RuleSet::builtin(), Vec::new());
        s.boot().unwrap();
        assert_eq!(s.monitor().state().current_state(), RUNTIME_STATE);
        assert_eq!(s.trace().count("register_dispatch_table"), 3 + 2 + 2);
        assert_eq!(s.trace().count("register_iommu"), 5);
        assert_eq!(s.frames().frame_type_of(1), Ok(FrameType::TXM_RW));
        assert_eq!(s.frames().frame_type_of(3), Ok(FrameType::TXM_THREAD_STACK));
        assert!(!s.monitor().registrations().any(|r| r.handler.table == DispatchTableId::HIB));
        assert_eq!(s.boot(), Err(SimError::AlreadyBooted));
        let mut hib = System::new(Config { hibernation: true, ..Config::default() }, RuleSet::builtin(), Vec::new());
        hib.boot().unwrap();
        assert!(hib.monitor().registrations().any(|r| r.handler.table == DispatchTableId::HIB));
    }

    #[test]
    fn xnu_retype_chain_returns_to_runtime() {
        let mut s = world(Config::default());
        let f = 10;
        s.retype(DomainCode::Xnu, f, FrameType::SPTM_UNTYPED, FrameType::XNU_DEFAULT).unwrap();
        s.retype(DomainCode::Xnu, f, FrameType::XNU_DEFAULT, FrameType::XNU_USER_JIT).unwrap();
        s.retype(DomainCode::Xnu, f, FrameType::XNU_USER_JIT, FrameType::XNU_DEFAULT).unwrap();
        assert_eq!(s.monitor().state().current_state(), RUNTIME_STATE);
        let last = s.trace().records().last().unwrap();
        assert_eq!((last.get("path"), last.outcome.as_str()), (Some("0x5>0xb>0x5"), "ok"));
        let denied = s.retype(DomainCode::Xnu, f, FrameType::XNU_DEFAULT, FrameType::TXM_RW);
        assert_eq!(denied.unwrap_err().status_name(), "TransitionDenied");
        assert_eq!(s.monitor().state().current_state(), RUNTIME_STATE);
    }

    #[test]
    fn guest_routes_need_guest_context() {
        let mut s = world(Config::default());
        let r = s.retype(DomainCode::Txm, 11, FrameType::SPTM_UNTYPED, FrameType::TXM_DEFAULT);
        // Outside TXM the runtime row credits XNU, which the table refuses.
        assert_eq!(r.unwrap_err().status_name(), "PermissionDenied");
        assert_eq!(s.monitor().state().current_state(), RUNTIME_STATE);
        s.genter(DomainCode::Xnu, DispatchTarget::new(DomainCode::Txm, DispatchTableId(0), 1)).unwrap();
        s.retype(DomainCode::Txm, 11, FrameType::SPTM_UNTYPED, FrameType::TXM_DEFAULT).unwrap();
        s.complete(DispatchTarget::new(DomainCode::Txm, DispatchTableId(0), 1)).unwrap();
        assert_eq!(s.monitor().state().current_state(), RUNTIME_STATE);
    }

    #[test]
    fn txm_and_sk_calls() {
        let mut s = world(Config::default());
        let sel = s.rules().txm_selectors.by_name("GetTrustCacheInfo").unwrap().selector;
        assert_eq!(s.txm_call(sel, Vec::new()).unwrap().outputs.len(), 4);
        assert_eq!(s.txm_call(0x2e, Vec::new()).unwrap_err().status_name(), "SelectorUnknown");
        assert_eq!(s.sk_enter(0), Ok(SkEntry::EnterGl0));
        assert_eq!(s.sk_enter(2).unwrap_err().status_name(), "InvalidEndpoint");
        assert_eq!(s.monitor().state().current_state(), RUNTIME_STATE);
    }

    #[test]
    fn map_page_goes_through_the_gate() {
        let mut s = world(Config::default());
        s.retype(DomainCode::Xnu, 20, FrameType::SPTM_UNTYPED, FrameType::XNU_DEFAULT).unwrap();
        let r = s.map_page(0, 21, 0x4000, 20, PteBits::for_index(0));
        assert!(r.is_err());
        assert_eq!(s.trace().records().last().unwrap().operation, "map_page");
    }

    #[test]
    fn trap_guardrails() {
        let mut s = running(Config::default());
        let none =
            s.ctl_trap(3, TrapRequest::Create { op: CreateOp::SensorCreate, name: "com.apple.sensors.mic".into() });
        assert_eq!(none, Err(SimError::NotEntitled(3)));
        let create = TrapRequest::Create { op: CreateOp::SensorCreate, name: "com.apple.sensors.mic".into() };
        assert_eq!(s.ctl_trap(2, create.clone()), Ok(TrapResult::PortName(0x1003)));
        let mic = s.registry().lookup(AUDIO, "com.apple.sensors.mic", None).unwrap();
        let port = s.registry().resource(mic).unwrap().port.unwrap();
        let before = (s.registry().port(port).unwrap().send_rights, s.registry().resource(mic).unwrap().use_count);
        assert_eq!(s.ctl_trap(2, create), Ok(TrapResult::PortName(0x1003)));
        let after = (s.registry().port(port).unwrap().send_rights, s.registry().resource(mic).unwrap().use_count);
        assert_eq!((before, after), ((1, 2), (1, 2)));
        let call = |id| TrapRequest::EndpointCall { identifier: id, buffer: alloc::vec![0; IPC_BUFFER_SIZE] };
        assert_eq!(s.ctl_trap(2, call(192)), Err(SimError::InvalidArgument("identifier")));
        assert_eq!(s.ctl_trap(2, call(0)), Err(SimError::InvalidArgument("service not in conclave")));
        let svc = s.registry().lookup_service(AUDIO, "com.apple.audio.AudioCaptureServer").unwrap();
        assert!(matches!(s.ctl_trap(2, call(svc)), Ok(TrapResult::Reply { .. })));
        let short = TrapRequest::EndpointCall { identifier: svc, buffer: alloc::vec![0; 8] };
        assert_eq!(s.ctl_trap(2, short), Err(SimError::InvalidArgument("buffer size")));
        assert_eq!(s.monitor().state().current_state(), RUNTIME_STATE);
        assert!(s.proxy().thread(102).flags.is_empty());
    }

    #[test]
    fn named_buffer_strict_firmware() {
        let op = TrapRequest::Create { op: CreateOp::NamedBufferCreate, name: "com.apple.audio.buffer".into() };
        let mut strict = running(Config { strict_firmware: true, ..Config::default() });
        assert_eq!(strict.ctl_trap(2, op.clone()), Err(SimError::ServiceNotSupported));
        let mut lax = running(Config::default());
        assert!(matches!(lax.ctl_trap(2, op), Ok(TrapResult::PortName(_))));
    }

    #[test]
    fn trap_before_exclaves_boot() {
        let mut s = System::new(Config::default(), RuleSet::builtin(), fixture());
        s.boot().unwrap();
        s.add_task(task(9, &[entitlement::KERNEL_DOMAIN], false));
        let op = TrapRequest::Create { op: CreateOp::SensorCreate, name: "x".into() };
        assert_eq!(s.ctl_trap(9, op).unwrap_err().status_name(), "NotBooted");
        assert_eq!(s.ctl_trap(9, TrapRequest::Boot), Ok(TrapResult::Booted));
        assert_eq!(s.ctl_trap(9, TrapRequest::Boot), Err(SimError::AlreadyBooted));
    }

    fn query(s: &mut System, size: u64) -> (u32, MessageHandle) {
        let svc = s.registry().lookup_service(AUDIO, "com.apple.audio.AudioCaptureServer").unwrap();
        let ep = s.tb_endpoint_create(2, EP_TYPE_XNU, svc, 0).unwrap();
        let conn = s.tb_connection_create(2, ep).unwrap();
        s.tb_activate(2, conn).unwrap();
        let msg = s.tb_message_construct(2, conn, size, 0, 0).unwrap();
        s.tb_message_encode(2, msg, &[7]).unwrap();
        s.tb_message_complete(2, msg).unwrap();
        (conn, msg)
    }

    #[test]
    fn send_query_makes_one_endpoint_call() {
        let mut s = running(Config::default());
        let (conn, msg) = query(&mut s, 9);
        let before = s.trace().count("exclaves_endpoint_call");
        let reply = s.tb_send_query(2, conn, msg, true).unwrap().unwrap();
        assert_eq!(s.trace().count("exclaves_endpoint_call"), before + 1);
        let call = s.trace().records().iter().rev().find(|r| r.operation == "exclaves_endpoint_call").unwrap();
        assert_eq!(call.get("tag"), Some("0x2"));
        let r = s.tightbeam().message(reply).unwrap();
        assert_eq!((r.state(), r.disposition), (MessageState::Received, Disposition::Reply));
        assert_eq!(s.tightbeam().message(msg).unwrap().state(), MessageState::Sent);
        assert_eq!(s.tb_send_query(2, conn, msg, false).unwrap_err().status_name(), "WrongState");
        assert_eq!(s.trace().count("exclaves_endpoint_call"), before + 1);
        assert!(!s.proxy().thread(102).flags.contains(ThreadFlags::RPC));
    }

    #[test]
    fn suspended_and_stopped_conclaves_refuse_queries() {
        let mut s = running(Config::default());
        let (conn, msg) = query(&mut s, 8);
        s.conclave_request(2, ConclaveRequest::Suspend).unwrap();
        let m = s.registry().conclave_of_domain(AUDIO).unwrap();
        assert_eq!(s.tb_send_query(2, conn, msg, false), Err(SimError::ConclaveSuspended(m)));
        s.conclave_request(2, ConclaveRequest::Resume).unwrap();
        s.tb_send_query(2, conn, msg, false).unwrap();
        let (conn, msg) = query(&mut s, 8);
        let t = s.conclave_request(2, ConclaveRequest::Stop).unwrap();
        let control = t.closed_connection.unwrap();
        assert!(s.tightbeam().connection(control).unwrap().closed);
        assert_eq!(s.tb_send_query(2, conn, msg, false).unwrap_err().status_name(), "ConnectionClosed");
        assert_eq!(s.conclave_request(2, ConclaveRequest::Launch).unwrap_err().status_name(), "IllegalTransition");
    }

    #[test]
    fn gl0_service_routes_to_secure_kernel() {
        let mut s = world(Config::default());
        assert!(matches!(s.gl0_service(3, 30, 0x3f), Ok(sk::ServiceOutcome::Retyped(_))));
        assert!(matches!(s.gl0_service(0, 30, 0), Ok(sk::ServiceOutcome::Retyped(_))));
        assert_eq!(s.frames().frame_type_of(30), Ok(FrameType::SK_SHARED_RO));
        assert_eq!(s.gl0_service(9, 30, 0), Ok(sk::ServiceOutcome::UnknownService(9)));
        assert_eq!(s.trace().records().last().unwrap().outcome, "UnknownService");
    }

    #[test]
    fn trace_is_deterministic() {
        let run = || {
            let mut s = running(Config::default());
            let (conn, msg) = query(&mut s, 9);
            s.tb_send_query(2, conn, msg, true).unwrap();
            s.trace().render()
        };
        assert_eq!(run(), run());
    }
}
