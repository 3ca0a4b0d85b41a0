// SPDX-License-Identifier: Apache-2.0
//! Exclave resource registry: domain scoping, conclave lifecycle,
//! entitlement checks and port names for IPC-backed resources.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use thiserror::Error;

use crate::core_model::Status;

pub const RESOURCE_NAME_MAX: usize = 128;
pub const CONCLAVE_SERVICE_MAX: usize = 192;
/// Domain every conclave manager lives in.
pub const KERNEL_DOMAIN: &str = "com.apple.kernel";

pub mod entitlement {
    pub const KERNEL_DOMAIN: &str = "com.apple.private.exclaves.kernel-domain";
    pub const CONCLAVE_SPAWN: &str = "com.apple.private.exclaves.conclave-spawn";
    pub const CONCLAVE_HOST: &str = "com.apple.private.exclaves.conclave-host";
}

pub type ResourceId = u64;
pub type TaskId = u32;
pub type ThreadId = u32;
/// Tightbeam connection handle held by a conclave.
pub type ConnectionId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ResourceKind {
    ConclaveManager,
    Notification,
    Service,
    NamedBuffer,
    ArbitratedAudioBuffer,
    Sensor,
    SharedMemory,
    ArbitratedAudioMemory,
}

impl ResourceKind {
    pub const ALL: [ResourceKind; 8] = [
        Self::ConclaveManager,
        Self::Notification,
        Self::Service,
        Self::NamedBuffer,
        Self::ArbitratedAudioBuffer,
        Self::Sensor,
        Self::SharedMemory,
        Self::ArbitratedAudioMemory,
    ];

    /// Name without the `XNUPROXY_RESOURCE_` prefix.
    pub const fn short_name(self) -> &'static str {
        match self {
            Self::ConclaveManager => "CONCLAVE_MANAGER",
            Self::Notification => "NOTIFICATION",
            Self::Service => "SERVICE",
            Self::NamedBuffer => "NAMED_BUFFER",
            Self::ArbitratedAudioBuffer => "ARBITRATED_AUDIO_BUFFER",
            Self::Sensor => "SENSOR",
            Self::SharedMemory => "SHARED_MEMORY",
            Self::ArbitratedAudioMemory => "ARBITRATED_AUDIO_MEMORY",
        }
    }

    /// Accepts the short or the `XNUPROXY_RESOURCE_`-prefixed name.
    pub fn parse(s: &str) -> Option<Self> {
        let s = s.strip_prefix("XNUPROXY_RESOURCE_").unwrap_or(s);
        Self::ALL.into_iter().find(|k| k.short_name() == s)
    }
}

impl fmt::Display for ResourceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "XNUPROXY_RESOURCE_{}", self.short_name())
    }
}

/// One record returned by a resource-info query.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResourceInfo {
    pub domain: String,
    pub name: String,
    pub kind: ResourceKind,
    /// Assigned sequentially when absent.
    pub id: Option<ResourceId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Default)]
pub enum ConclaveState {
    #[default]
    None = 0,
    Attached = 1,
    Running = 2,
    Stopped = 3,
    Suspended = 4,
}

impl ConclaveState {
    pub const ALL: [ConclaveState; 5] = [Self::None, Self::Attached, Self::Running, Self::Stopped, Self::Suspended];

    pub const fn code(self) -> u8 {
        self as u8
    }

    pub const fn name(self) -> &'static str {
        match self {
            Self::None => "CONCLAVE_S_NONE",
            Self::Attached => "CONCLAVE_S_ATTACHED",
            Self::Running => "CONCLAVE_S_RUNNING",
            Self::Stopped => "CONCLAVE_S_STOPPED",
            Self::Suspended => "CONCLAVE_S_SUSPENDED",
        }
    }
}

/// Request field codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Default)]
pub enum ConclaveRequestCode {
    #[default]
    None = 0,
    LaunchRequested = 1,
    SuspendRequested = 2,
    StopRequested = 4,
}

impl ConclaveRequestCode {
    pub const fn code(self) -> u8 {
        self as u8
    }

    pub const fn name(self) -> &'static str {
        match self {
            Self::None => "CONCLAVE_R_NONE",
            Self::LaunchRequested => "CONCLAVE_R_LAUNCH_REQUESTED",
            Self::SuspendRequested => "CONCLAVE_R_SUSPEND_REQUESTED",
            Self::StopRequested => "CONCLAVE_R_STOP_REQUESTED",
        }
    }
}

/// Lifecycle requests a caller can make.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ConclaveRequest {
    Launch,
    Suspend,
    Resume,
    Stop,
}

impl ConclaveRequest {
    pub const ALL: [ConclaveRequest; 4] = [Self::Launch, Self::Suspend, Self::Resume, Self::Stop];

    /// Resume has no code of its own and reuses the suspend code.
    pub const fn code(self) -> ConclaveRequestCode {
        match self {
            Self::Launch => ConclaveRequestCode::LaunchRequested,
            Self::Suspend | Self::Resume => ConclaveRequestCode::SuspendRequested,
            Self::Stop => ConclaveRequestCode::StopRequested,
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "launch" => Some(Self::Launch),
            "suspend" => Some(Self::Suspend),
            "resume" => Some(Self::Resume),
            "stop" => Some(Self::Stop),
            _ => None,
        }
    }

    pub const fn name(self) -> &'static str {
        match self {
            Self::Launch => "launch",
            Self::Suspend => "suspend",
            Self::Resume => "resume",
            Self::Stop => "stop",
        }
    }
}

/// The five legal lifecycle edges. The resume edge is inferred.
pub const fn conclave_edge(state: ConclaveState, request: ConclaveRequest) -> Option<ConclaveState> {
    use ConclaveRequest as R;
    use ConclaveState as S;
    match (state, request) {
        (S::Attached, R::Launch) => Some(S::Running),
        (S::Running, R::Suspend) => Some(S::Suspended),
        (S::Suspended, R::Resume) => Some(S::Running),
        (S::Running, R::Stop) | (S::Suspended, R::Stop) => Some(S::Stopped),
        _ => None,
    }
}

/// Bitmap over service ids below [`CONCLAVE_SERVICE_MAX`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ServiceBitmap([u64; CONCLAVE_SERVICE_MAX / 64]);

impl ServiceBitmap {
    pub fn insert(&mut self, id: ResourceId) -> Result<(), ResourceError> {
        let i = usize::try_from(id).ok().filter(|i| *i < CONCLAVE_SERVICE_MAX);
        let i = i.ok_or(ResourceError::ServiceIdOutOfRange(id))?;
        self.0[i / 64] |= 1 << (i % 64);
        Ok(())
    }

    pub fn contains(&self, id: u64) -> bool {
        usize::try_from(id)
            .ok()
            .filter(|i| *i < CONCLAVE_SERVICE_MAX)
            .is_some_and(|i| self.0[i / 64] & (1 << (i % 64)) != 0)
    }

    pub fn len(&self) -> usize {
        self.0.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = ResourceId> + '_ {
        (0..CONCLAVE_SERVICE_MAX as u64).filter(|i| self.contains(*i))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ConclaveRecord {
    pub state: ConclaveState,
    pub request: ConclaveRequestCode,
    pub active_downcall: bool,
    pub active_stopcall: bool,
    pub active_detach: bool,
    pub control_connection: Option<ConnectionId>,
    pub task: Option<TaskId>,
    pub downcall_thread: Option<ThreadId>,
    pub service_bits: ServiceBitmap,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Payload {
    None,
    Conclave(ConclaveRecord),
    Sensor,
    Notification { listeners: Vec<TaskId> },
    SharedMemory,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExclaveResource {
    pub id: ResourceId,
    pub domain: String,
    pub name: String,
    pub kind: ResourceKind,
    pub use_count: u32,
    pub port: Option<PortId>,
    pub active: bool,
    pub connected: bool,
    pub payload: Payload,
}

impl ExclaveResource {
    pub fn conclave(&self) -> Option<&ConclaveRecord> {
        match &self.payload {
            Payload::Conclave(c) => Some(c),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PortId(pub u32);

/// Kernel object port backing a resource.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Port {
    pub resource: ResourceId,
    pub send_rights: u32,
    /// No-senders notification requested.
    pub armed: bool,
}

/// First index handed out; names are `(index << 8) | 3`.
pub const FIRST_NAME_INDEX: u32 = 0x10;
const NAME_GENERATION: u32 = 3;

/// A task's name space for send rights.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IpcSpace {
    entries: BTreeMap<u32, (PortId, u32)>,
    capacity: usize,
}

impl IpcSpace {
    pub fn new(capacity: usize) -> Self {
        Self { entries: BTreeMap::new(), capacity }
    }

    pub fn name_of(&self, port: PortId) -> Option<u32> {
        self.entries.iter().find(|(_, (p, _))| *p == port).map(|(n, _)| *n)
    }

    /// User references held under `name`.
    pub fn urefs(&self, name: u32) -> u32 {
        self.entries.get(&name).map_or(0, |(_, u)| *u)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn next_name(&self) -> Option<u32> {
        if self.entries.len() >= self.capacity {
            return None;
        }
        (FIRST_NAME_INDEX..).map(|i| (i << 8) | NAME_GENERATION).find(|n| !self.entries.contains_key(n))
    }
}

impl Default for IpcSpace {
    fn default() -> Self {
        Self::new(64)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskRecord {
    pub task_id: TaskId,
    pub name: String,
    pub entitlements: BTreeSet<String>,
    pub is_launchd: bool,
    pub is_kernel: bool,
    /// Conclave manager resource, set only by a checked attach.
    pub conclave: Option<ResourceId>,
    pub space: IpcSpace,
    pub thread: ThreadId,
}

impl TaskRecord {
    pub fn has(&self, ent: &str) -> bool {
        self.entitlements.contains(ent)
    }

    pub fn may_spawn_conclaves(&self) -> bool {
        self.is_launchd || self.has(entitlement::CONCLAVE_SPAWN)
    }

    pub fn may_host_conclave(&self) -> bool {
        self.has(entitlement::CONCLAVE_HOST) || self.has(entitlement::CONCLAVE_SPAWN)
    }

    /// Tasks allowed through the control trap.
    pub fn may_use_exclaves(&self) -> bool {
        self.is_kernel || self.has(entitlement::KERNEL_DOMAIN) || self.conclave.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ResourceError {
    #[error("resource name exceeds {RESOURCE_NAME_MAX} bytes")]
    NameTooLong,
    #[error("resource id {id} already used in {domain}")]
    DuplicateResourceId { domain: String, id: ResourceId },
    #[error("conclave {0} has more than {CONCLAVE_SERVICE_MAX} services")]
    TooManyServices(String),
    #[error("service id {0} does not fit the service bitmap")]
    ServiceIdOutOfRange(ResourceId),
    #[error("conclave manager {0} is outside the kernel domain")]
    ManagerOutsideKernelDomain(String),
    #[error("no resource {name} in {domain}")]
    NotFound { domain: String, name: String },
    #[error("resource {0} is unknown")]
    UnknownResource(ResourceId),
    #[error("resource {0} is not a conclave manager")]
    NotAConclave(ResourceId),
    #[error("task {0} is unknown")]
    UnknownTask(TaskId),
    #[error("caller may not attach conclaves")]
    CallerNotEntitled,
    #[error("target may not host a conclave")]
    TargetNotEntitled,
    #[error("conclave or task already attached")]
    AlreadyAttached,
    #[error("{request} is not legal from {from}", from = .from.name(), request = .request.name())]
    IllegalTransition { from: ConclaveState, request: ConclaveRequest },
    #[error("resource {0} holds no use count")]
    UseCountZero(ResourceId),
    #[error("port name space is exhausted")]
    PortInvalid,
}

impl Status for ResourceError {
    fn status_name(&self) -> &'static str {
        match self {
            Self::NameTooLong => "NameTooLong",
            Self::DuplicateResourceId { .. } => "DuplicateResourceId",
            Self::TooManyServices(_) => "TooManyServices",
            Self::ServiceIdOutOfRange(_) => "ServiceIdOutOfRange",
            Self::ManagerOutsideKernelDomain(_) => "ManagerOutsideKernelDomain",
            Self::NotFound { .. } => "NotFound",
            Self::UnknownResource(_) => "UnknownResource",
            Self::NotAConclave(_) => "NotAConclave",
            Self::UnknownTask(_) => "UnknownTask",
            Self::CallerNotEntitled => "CallerNotEntitled",
            Self::TargetNotEntitled => "TargetNotEntitled",
            Self::AlreadyAttached => "AlreadyAttached",
            Self::IllegalTransition { .. } => "IllegalTransition",
            Self::UseCountZero(_) => "UseCountZero",
            Self::PortInvalid => "PortInvalid",
        }
    }
}

/// Result of a lifecycle step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConclaveTransition {
    pub from: ConclaveState,
    pub to: ConclaveState,
    /// Request code held while the step ran; cleared afterwards.
    pub request: ConclaveRequestCode,
    /// Control connection torn down by a stop.
    pub closed_connection: Option<ConnectionId>,
}

/// Two-level table: domain name to the resources registered in it.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ResourceRegistry {
    domains: BTreeMap<String, Vec<ResourceId>>,
    resources: BTreeMap<ResourceId, ExclaveResource>,
    ports: BTreeMap<PortId, Port>,
    tasks: BTreeMap<TaskId, TaskRecord>,
    next_id: ResourceId,
}

impl ResourceRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn domains(&self) -> impl Iterator<Item = (&str, &[ResourceId])> {
        self.domains.iter().map(|(d, ids)| (d.as_str(), ids.as_slice()))
    }

    pub fn resources(&self) -> impl Iterator<Item = &ExclaveResource> {
        self.resources.values()
    }

    pub fn resource(&self, id: ResourceId) -> Result<&ExclaveResource, ResourceError> {
        self.resources.get(&id).ok_or(ResourceError::UnknownResource(id))
    }

    fn resource_mut(&mut self, id: ResourceId) -> Result<&mut ExclaveResource, ResourceError> {
        self.resources.get_mut(&id).ok_or(ResourceError::UnknownResource(id))
    }

    pub fn port(&self, id: PortId) -> Option<&Port> {
        self.ports.get(&id)
    }

    /// Allocates a resource in its domain and runs type-specific setup.
    pub fn insert(&mut self, info: ResourceInfo) -> Result<ResourceId, ResourceError> {
        if info.name.len() > RESOURCE_NAME_MAX {
            return Err(ResourceError::NameTooLong);
        }
        if info.kind == ResourceKind::ConclaveManager && info.domain != KERNEL_DOMAIN {
            return Err(ResourceError::ManagerOutsideKernelDomain(info.name));
        }
        let id = info.id.unwrap_or(self.next_id);
        let members = self.domains.get(&info.domain).map(Vec::as_slice).unwrap_or_default();
        if members.contains(&id) {
            return Err(ResourceError::DuplicateResourceId { domain: info.domain, id });
        }
        if self.resources.contains_key(&id) {
            // Ids also key the arena, so they must be globally fresh.
            return Err(ResourceError::DuplicateResourceId { domain: info.domain, id });
        }
        if info.kind == ResourceKind::Service {
            let services = members.iter().filter(|r| self.resources[r].kind == ResourceKind::Service).count();
            if services >= CONCLAVE_SERVICE_MAX {
                return Err(ResourceError::TooManyServices(info.domain));
            }
        }
        let payload = match info.kind {
            ResourceKind::ConclaveManager => Payload::Conclave(ConclaveRecord::default()),
            ResourceKind::Notification => Payload::Notification { listeners: Vec::new() },
            ResourceKind::Sensor => Payload::Sensor,
            ResourceKind::SharedMemory | ResourceKind::ArbitratedAudioMemory => Payload::SharedMemory,
            _ => Payload::None,
        };
        self.domains.entry(info.domain.clone()).or_default().push(id);
        self.resources.insert(
            id,
            ExclaveResource {
                id,
                domain: info.domain,
                name: info.name,
                kind: info.kind,
                use_count: 1,
                port: None,
                active: false,
                connected: false,
                payload,
            },
        );
        self.next_id = self.next_id.max(id + 1);
        Ok(id)
    }

    pub fn set_control_connection(&mut self, manager: ResourceId, conn: ConnectionId) -> Result<(), ResourceError> {
        let r = self.resource_mut(manager)?;
        r.connected = true;
        match &mut r.payload {
            Payload::Conclave(c) => {
                c.control_connection = Some(conn);
                Ok(())
            }
            _ => Err(ResourceError::NotAConclave(manager)),
        }
    }

    /// Sets each conclave's bits from the services of its own domain.
    pub fn populate_conclave_services(&mut self) -> Result<(), ResourceError> {
        let managers: Vec<(ResourceId, String)> = self
            .resources
            .values()
            .filter(|r| r.kind == ResourceKind::ConclaveManager)
            .map(|r| (r.id, r.name.clone()))
            .collect();
        for (id, conclave_domain) in managers {
            let mut bits = ServiceBitmap::default();
            for sid in self.domains.get(&conclave_domain).into_iter().flatten() {
                if self.resources[sid].kind == ResourceKind::Service {
                    bits.insert(*sid)?;
                }
            }
            if let Payload::Conclave(c) = &mut self.resource_mut(id)?.payload {
                c.service_bits = bits;
            }
        }
        Ok(())
    }

    /// Gives every resource a kernel object port.
    pub fn allocate_ports(&mut self) {
        for r in self.resources.values_mut().filter(|r| r.port.is_none()) {
            let id = PortId(self.ports.len() as u32);
            self.ports.insert(id, Port { resource: r.id, send_rights: 0, armed: false });
            r.port = Some(id);
        }
    }

    /// First resource of `kind` named `name` in `domain`.
    pub fn lookup(&self, domain: &str, name: &str, kind: Option<ResourceKind>) -> Result<ResourceId, ResourceError> {
        self.domains
            .get(domain)
            .into_iter()
            .flatten()
            .map(|id| &self.resources[id])
            .find(|r| r.name == name && kind.is_none_or(|k| r.kind == k))
            .map(|r| r.id)
            .ok_or_else(|| ResourceError::NotFound { domain: domain.into(), name: name.into() })
    }

    pub fn lookup_service(&self, domain: &str, name: &str) -> Result<ResourceId, ResourceError> {
        self.lookup(domain, name, Some(ResourceKind::Service))
    }

    pub fn conclave(&self, manager: ResourceId) -> Result<&ConclaveRecord, ResourceError> {
        self.resource(manager)?.conclave().ok_or(ResourceError::NotAConclave(manager))
    }

    fn conclave_mut(&mut self, manager: ResourceId) -> Result<&mut ConclaveRecord, ResourceError> {
        match &mut self.resource_mut(manager)?.payload {
            Payload::Conclave(c) => Ok(c),
            _ => Err(ResourceError::NotAConclave(manager)),
        }
    }

    pub fn conclave_has_service(&self, manager: Option<ResourceId>, identifier: u64) -> bool {
        manager.and_then(|m| self.conclave(m).ok()).is_some_and(|c| c.service_bits.contains(identifier))
    }

    /// Conclave manager whose domain holds `resource`, if any.
    pub fn conclave_of_domain(&self, domain: &str) -> Option<ResourceId> {
        self.lookup(KERNEL_DOMAIN, domain, Some(ResourceKind::ConclaveManager)).ok()
    }

    pub fn add_task(&mut self, task: TaskRecord) {
        self.tasks.insert(task.task_id, task);
    }

    pub fn task(&self, id: TaskId) -> Result<&TaskRecord, ResourceError> {
        self.tasks.get(&id).ok_or(ResourceError::UnknownTask(id))
    }

    pub fn tasks(&self) -> impl Iterator<Item = &TaskRecord> {
        self.tasks.values()
    }

    /// Domain a task's resource lookups are scoped to.
    pub fn task_domain(&self, task: TaskId) -> Result<Option<String>, ResourceError> {
        let t = self.task(task)?;
        Ok(match t.conclave {
            Some(m) => Some(self.resource(m)?.name.clone()),
            None if t.is_kernel || t.has(entitlement::KERNEL_DOMAIN) => Some(KERNEL_DOMAIN.into()),
            None => None,
        })
    }

    pub fn conclave_attach(&mut self, task: TaskId, caller: TaskId, manager: ResourceId) -> Result<(), ResourceError> {
        let c = self.conclave(manager)?;
        let (caller_rec, task_rec) = (self.task(caller)?, self.task(task)?);
        if !caller_rec.may_spawn_conclaves() {
            return Err(ResourceError::CallerNotEntitled);
        }
        if !task_rec.may_host_conclave() {
            return Err(ResourceError::TargetNotEntitled);
        }
        if c.state != ConclaveState::None || task_rec.conclave.is_some() {
            return Err(ResourceError::AlreadyAttached);
        }
        let thread = task_rec.thread;
        let c = self.conclave_mut(manager)?;
        c.task = Some(task);
        c.downcall_thread = Some(thread);
        c.state = ConclaveState::Attached;
        self.tasks.get_mut(&task).expect("checked above").conclave = Some(manager);
        Ok(())
    }

    pub fn conclave_transition(
        &mut self,
        manager: ResourceId,
        request: ConclaveRequest,
    ) -> Result<ConclaveTransition, ResourceError> {
        let c = self.conclave_mut(manager)?;
        let from = c.state;
        let to = conclave_edge(from, request).ok_or(ResourceError::IllegalTransition { from, request })?;
        c.request = request.code();
        c.active_stopcall = request == ConclaveRequest::Stop;
        c.state = to;
        let closed_connection = if to == ConclaveState::Stopped { c.control_connection.take() } else { None };
        c.request = ConclaveRequestCode::None;
        c.active_stopcall = false;
        if closed_connection.is_some() {
            self.resource_mut(manager)?.connected = false;
        }
        Ok(ConclaveTransition { from, to, request: request.code(), closed_connection })
    }

    /// Lookup path of the trap: takes a use count on the resource.
    pub fn retain(&mut self, id: ResourceId) -> Result<(), ResourceError> {
        self.resource_mut(id)?.use_count += 1;
        Ok(())
    }

    pub fn release(&mut self, id: ResourceId) -> Result<(), ResourceError> {
        let r = self.resource_mut(id)?;
        r.use_count = r.use_count.saturating_sub(1);
        Ok(())
    }

    /// Arms a send right on the resource's port and names it in the task's space.
    pub fn create_port_name(&mut self, resource: ResourceId, task: TaskId) -> Result<u32, ResourceError> {
        let r = self.resource(resource)?;
        if r.use_count == 0 {
            return Err(ResourceError::UseCountZero(resource));
        }
        let port_id = r.port.ok_or(ResourceError::PortInvalid)?;
        let port = self.ports.get_mut(&port_id).ok_or(ResourceError::PortInvalid)?;
        port.send_rights += 1;
        port.armed = true;
        if port.send_rights > 1 {
            // The earlier send right already holds a use count.
            self.release(resource)?;
        }
        let space = &mut self.tasks.get_mut(&task).ok_or(ResourceError::UnknownTask(task))?.space;
        let port = self.ports.get_mut(&port_id).expect("looked up above");
        if let Some(name) = space.name_of(port_id) {
            // Copyout merges into the existing entry.
            space.entries.get_mut(&name).expect("name exists").1 += 1;
            port.send_rights -= 1;
            return Ok(name);
        }
        match space.next_name() {
            Some(name) => {
                space.entries.insert(name, (port_id, 1));
                Ok(name)
            }
            None => {
                port.send_rights -= 1;
                Err(ResourceError::PortInvalid)
            }
        }
    }
}
