// SPDX-License-Identifier: Apache-2.0
//! Secure-world request broker: management commands, IPC buffers,
//! scheduling-context ids and endpoint-call delivery.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec::Vec;
use core::fmt;

use bitflags::bitflags;
use thiserror::Error;

use crate::core_model::{FieldOverflow, Status};
use crate::exclave_resources::{ResourceId, ResourceInfo, ResourceKind, ResourceRegistry, ThreadId};

/// Scheduling-context id.
pub type Scid = u64;

/// Message-register words per buffer.
pub const IPC_MRS: usize = 32;
/// Capability-register words per direction.
pub const IPC_CRS: usize = 8;
/// Serialized buffer size in bytes.
pub const IPC_BUFFER_SIZE: usize = (IPC_MRS + 2 * IPC_CRS) * 8;
/// Message register holding the tag.
pub const MR_TAG: usize = 0;
/// Source capability register holding the call's return value.
pub const SCR_RETVAL: usize = 0;

macro_rules! proxy_commands {
    ($($variant:ident = $code:literal => $name:literal),+ $(,)?) => {
        /// Management command codes in declaration order.
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
        pub enum ProxyCommand { $($variant = $code),+ }

        impl ProxyCommand {
            pub const ALL: [ProxyCommand; 20] = [$(Self::$variant),+];

            pub const fn name(self) -> &'static str {
                match self { $(Self::$variant => concat!("XNUPROXY_CMD_", $name)),+ }
            }
        }
    };
}

proxy_commands! {
    Undefined = 0 => "UNDEFINED",
    Setup = 1 => "SETUP",
    ContextAllocate = 2 => "CONTEXT_ALLOCATE",
    ContextFree = 3 => "CONTEXT_FREE",
    NamedBufferCreate = 4 => "NAMED_BUFFER_CREATE",
    NamedBufferDelete = 5 => "NAMED_BUFFER_DELETE",
    ResourceInfo = 6 => "RESOURCE_INFO",
    AudioBufferCreate = 7 => "AUDIO_BUFFER_CREATE",
    AudioBufferCopyout = 8 => "AUDIO_BUFFER_COPYOUT",
    AudioBufferDelete = 9 => "AUDIO_BUFFER_DELETE",
    SensorStart = 10 => "SENSOR_START",
    SensorStop = 11 => "SENSOR_STOP",
    SensorStatus = 12 => "SENSOR_STATUS",
    DisplayHealthcheckRate = 13 => "DISPLAY_HEALTHCHECK_RATE",
    NamedBufferMap = 14 => "NAMED_BUFFER_MAP",
    NamedBufferLayout = 15 => "NAMED_BUFFER_LAYOUT",
    AudioBufferMap = 16 => "AUDIO_BUFFER_MAP",
    AudioBufferLayout = 17 => "AUDIO_BUFFER_LAYOUT",
    ReportMemoryUsage = 18 => "REPORT_MEMORY_USAGE",
    UpcallReady = 19 => "UPCALL_READY",
}

impl ProxyCommand {
    pub const fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(usize::from(code)).copied()
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == s || &c.name()["XNUPROXY_CMD_".len()..] == s)
    }
}

impl fmt::Display for ProxyCommand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MsgStatus {
    None,
    Processing,
    Upcall,
    Error,
}

bitflags! {
    /// Per-thread exclave state bits.
    #[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
    pub struct ThreadFlags: u32 {
        const RPC = 0x1;
        const UPCALL = 0x2;
        const SCHEDULER_REQUEST = 0x4;
        const XNUPROXY = 0x8;
        const SCHEDULER_CALL = 0x10;
        const STOP_UPCALL_PENDING = 0x20;
    }
}

bitflags! {
    #[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
    pub struct InterruptState: u32 {
        const EXECUTION = 0x1;
    }
}

/// Per-command request and response fields.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CmdPayload {
    None,
    /// `info` stays `None` past the last resource.
    ResourceInfo {
        index: u64,
        info: Option<ResourceInfo>,
    },
    ContextAllocate {
        scid: Option<Scid>,
    },
    ContextFree {
        scid: Scid,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProxyMessage {
    pub cmd: ProxyCommand,
    pub server_id: Scid,
    pub status: MsgStatus,
    pub payload: CmdPayload,
}

impl ProxyMessage {
    pub fn new(cmd: ProxyCommand, payload: CmdPayload) -> Self {
        Self { cmd, server_id: 0, status: MsgStatus::None, payload }
    }

    pub fn resource_info(index: u64) -> Self {
        Self::new(ProxyCommand::ResourceInfo, CmdPayload::ResourceInfo { index, info: None })
    }
}

/// L4-style message tag: `r` bits 0..6, `c` 6..9, `u` 9..12, `n` bit 12,
/// label 16..32. Bits 13..16 are unused.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct MessageTag {
    mr_count: u8,
    cap_count: u8,
    unwrapped: u8,
    non_blocking: bool,
    label: u16,
}

impl MessageTag {
    pub fn new(
        mr_count: u8,
        cap_count: u8,
        unwrapped: u8,
        non_blocking: bool,
        label: u16,
    ) -> Result<Self, FieldOverflow> {
        let fit = |field, v: u8, bits: u32| {
            if u32::from(v) >> bits == 0 {
                Ok(v)
            } else {
                Err(FieldOverflow { field, value: u64::from(v), bits })
            }
        };
        Ok(Self {
            mr_count: fit("mr_count", mr_count, 6)?,
            cap_count: fit("cap_count", cap_count, 3)?,
            unwrapped: fit("unwrapped", unwrapped, 3)?,
            non_blocking,
            label,
        })
    }

    pub const fn mr_count(self) -> u8 {
        self.mr_count
    }

    pub const fn cap_count(self) -> u8 {
        self.cap_count
    }

    pub const fn unwrapped(self) -> u8 {
        self.unwrapped
    }

    pub const fn non_blocking(self) -> bool {
        self.non_blocking
    }

    pub const fn label(self) -> u16 {
        self.label
    }

    pub const fn pack(self) -> u64 {
        self.mr_count as u64
            | (self.cap_count as u64) << 6
            | (self.unwrapped as u64) << 9
            | (self.non_blocking as u64) << 12
            | (self.label as u64) << 16
    }

    /// Ignores the unused bits and everything above bit 31.
    pub const fn unpack(raw: u64) -> Self {
        Self {
            mr_count: (raw & 0x3f) as u8,
            cap_count: (raw >> 6 & 0x7) as u8,
            unwrapped: (raw >> 9 & 0x7) as u8,
            non_blocking: raw >> 12 & 1 == 1,
            label: (raw >> 16) as u16,
        }
    }
}

/// Per-thread shared buffer; sizes are fixed at allocation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IpcBuffer {
    pub mr: [u64; IPC_MRS],
    pub scr: [u64; IPC_CRS],
    pub dcr: [u64; IPC_CRS],
    pub endpoint: Option<ResourceId>,
}

impl Default for IpcBuffer {
    fn default() -> Self {
        Self { mr: [0; IPC_MRS], scr: [0; IPC_CRS], dcr: [0; IPC_CRS], endpoint: None }
    }
}

impl IpcBuffer {
    pub fn tag(&self) -> MessageTag {
        MessageTag::unpack(self.mr[MR_TAG])
    }

    fn words_mut(&mut self) -> impl Iterator<Item = &mut u64> {
        self.mr.iter_mut().chain(self.scr.iter_mut()).chain(self.dcr.iter_mut())
    }

    /// Little-endian register image; the endpoint field is not part of it.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.mr.iter().chain(&self.scr).chain(&self.dcr).flat_map(|w| w.to_le_bytes()).collect()
    }

    /// Overwrites the registers from a user image of exactly [`IPC_BUFFER_SIZE`] bytes.
    pub fn copy_in(&mut self, bytes: &[u8]) -> Result<(), ProxyError> {
        if bytes.len() != IPC_BUFFER_SIZE {
            return Err(ProxyError::BadBufferSize(bytes.len()));
        }
        for (w, chunk) in self.words_mut().zip(bytes.chunks_exact(8)) {
            *w = u64::from_le_bytes(chunk.try_into().expect("chunks are 8 bytes"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ThreadExclaveState {
    pub flags: ThreadFlags,
    pub intstate: InterruptState,
    pub scid: Option<Scid>,
    pub ipc_buffer: Option<IpcBuffer>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProxyError {
    #[error("exclaves are not booted")]
    NotBooted,
    #[error("exclaves are already booted")]
    AlreadyBooted,
    #[error("thread {thread} already has exclave state {flags:?}")]
    Reentry { thread: ThreadId, flags: ThreadFlags },
    #[error("{0} ended with a failure status")]
    ProxyFailure(ProxyCommand),
    #[error("thread {0} already holds an IPC buffer")]
    AlreadyAllocated(ThreadId),
    #[error("thread {0} holds no IPC buffer")]
    NoIpcBuffer(ThreadId),
    #[error("endpoint {0} is neither a service nor a conclave manager")]
    ServiceUnknown(ResourceId),
    #[error("buffer image of {0} bytes does not match the IPC buffer")]
    BadBufferSize(usize),
}

impl Status for ProxyError {
    fn status_name(&self) -> &'static str {
        match self {
            Self::NotBooted => "NotBooted",
            Self::AlreadyBooted => "AlreadyBooted",
            Self::Reentry { .. } => "Reentry",
            Self::ProxyFailure(_) => "ProxyFailure",
            Self::AlreadyAllocated(_) => "AlreadyAllocated",
            Self::NoIpcBuffer(_) => "NoIpcBuffer",
            Self::ServiceUnknown(_) => "ServiceUnknown",
            Self::BadBufferSize(_) => "BadBufferSize",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SendOutcome {
    pub message: ProxyMessage,
    /// An upcall was serviced while the message was processing.
    pub upcall_bounced: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EndpointReply {
    pub tag: MessageTag,
    pub retval: u64,
}

/// The broker plus every thread's exclave state.
#[derive(Debug, Clone, Default)]
pub struct XnuProxy {
    fixture: Vec<ResourceInfo>,
    proxy_scid: Option<Scid>,
    next_scid: Scid,
    live_scids: BTreeSet<Scid>,
    threads: BTreeMap<ThreadId, ThreadExclaveState>,
    upcall_armed: bool,
}

impl XnuProxy {
    /// `fixture` is what resource-info queries enumerate.
    pub fn new(fixture: Vec<ResourceInfo>) -> Self {
        Self { fixture, ..Self::default() }
    }

    pub fn is_booted(&self) -> bool {
        self.proxy_scid.is_some()
    }

    pub fn proxy_scid(&self) -> Option<Scid> {
        self.proxy_scid
    }

    pub fn live_scids(&self) -> impl Iterator<Item = Scid> + '_ {
        self.live_scids.iter().copied()
    }

    pub fn thread(&self, tid: ThreadId) -> ThreadExclaveState {
        self.threads.get(&tid).cloned().unwrap_or_default()
    }

    fn thread_mut(&mut self, tid: ThreadId) -> &mut ThreadExclaveState {
        self.threads.entry(tid).or_default()
    }

    fn fresh_scid(&mut self) -> Scid {
        let s = self.next_scid;
        self.next_scid += 1;
        self.live_scids.insert(s);
        s
    }

    /// Setup: the broker takes the first scheduling context.
    pub fn setup(&mut self) -> Result<Scid, ProxyError> {
        if self.is_booted() {
            return Err(ProxyError::AlreadyBooted);
        }
        let scid = self.fresh_scid();
        self.proxy_scid = Some(scid);
        Ok(scid)
    }

    /// Makes the next send observe one upcall before completing.
    pub fn arm_upcall(&mut self) {
        self.upcall_armed = true;
    }

    /// Synchronous secure-world handling of a management command.
    fn process(&mut self, msg: &mut ProxyMessage) {
        msg.status = MsgStatus::None;
        match (msg.cmd, &mut msg.payload) {
            (ProxyCommand::Undefined | ProxyCommand::Setup, _) => msg.status = MsgStatus::Error,
            (ProxyCommand::ResourceInfo, CmdPayload::ResourceInfo { index, info }) => {
                *info = usize::try_from(*index).ok().and_then(|i| self.fixture.get(i)).cloned();
            }
            (ProxyCommand::ContextAllocate, CmdPayload::ContextAllocate { scid }) => {
                *scid = Some(self.fresh_scid());
            }
            (ProxyCommand::ContextFree, CmdPayload::ContextFree { scid }) => {
                if !self.live_scids.remove(scid) || Some(*scid) == self.proxy_scid {
                    msg.status = MsgStatus::Error;
                }
            }
            (ProxyCommand::ResourceInfo | ProxyCommand::ContextAllocate | ProxyCommand::ContextFree, _) => {
                msg.status = MsgStatus::Error;
            }
            // Remaining commands are acknowledged without effect.
            _ => {}
        }
    }

    pub fn proxy_send(&mut self, tid: ThreadId, msg: ProxyMessage) -> Result<SendOutcome, ProxyError> {
        let proxy_scid = self.proxy_scid.ok_or(ProxyError::NotBooted)?;
        let flags = self.thread(tid).flags;
        if !flags.is_empty() {
            return Err(ProxyError::Reentry { thread: tid, flags });
        }
        self.thread_mut(tid).flags.insert(ThreadFlags::XNUPROXY);
        let mut msg = ProxyMessage { server_id: proxy_scid, status: MsgStatus::Processing, ..msg };
        let mut upcall_bounced = false;
        while msg.status == MsgStatus::Processing {
            // One resume: either the request completes or the secure world
            // posts an upcall on the side buffer and leaves it processing.
            let upcall = if core::mem::take(&mut self.upcall_armed) {
                MsgStatus::Upcall
            } else {
                self.process(&mut msg);
                MsgStatus::None
            };
            if upcall == MsgStatus::Upcall {
                upcall_bounced = true;
            }
        }
        self.thread_mut(tid).flags.remove(ThreadFlags::XNUPROXY);
        match msg.status {
            MsgStatus::None => Ok(SendOutcome { message: msg, upcall_bounced }),
            _ => Err(ProxyError::ProxyFailure(msg.cmd)),
        }
    }

    /// Enumerates the resource list until the end marker.
    pub fn enumerate_resources(&mut self, tid: ThreadId) -> Result<Vec<ResourceInfo>, ProxyError> {
        let mut out = Vec::new();
        loop {
            let reply = self.proxy_send(tid, ProxyMessage::resource_info(out.len() as u64))?;
            match reply.message.payload {
                CmdPayload::ResourceInfo { info: Some(info), .. } => out.push(info),
                _ => return Ok(out),
            }
        }
    }

    pub fn allocate_ipc_buffer(&mut self, tid: ThreadId) -> Result<Scid, ProxyError> {
        if self.thread(tid).ipc_buffer.is_some() {
            return Err(ProxyError::AlreadyAllocated(tid));
        }
        let msg = ProxyMessage::new(ProxyCommand::ContextAllocate, CmdPayload::ContextAllocate { scid: None });
        let reply = self.proxy_send(tid, msg)?;
        let CmdPayload::ContextAllocate { scid: Some(scid) } = reply.message.payload else {
            return Err(ProxyError::ProxyFailure(ProxyCommand::ContextAllocate));
        };
        let t = self.thread_mut(tid);
        t.scid = Some(scid);
        t.ipc_buffer = Some(IpcBuffer::default());
        Ok(scid)
    }

    /// Allocates on first use; later calls return the held context.
    pub fn ensure_ipc_buffer(&mut self, tid: ThreadId) -> Result<Scid, ProxyError> {
        match self.thread(tid).scid {
            Some(s) if self.thread(tid).ipc_buffer.is_some() => Ok(s),
            _ => self.allocate_ipc_buffer(tid),
        }
    }

    /// Returns the context; its scid is never handed out again.
    pub fn free_ipc_buffer(&mut self, tid: ThreadId) -> Result<Scid, ProxyError> {
        let scid = self.thread(tid).scid.ok_or(ProxyError::NoIpcBuffer(tid))?;
        let msg = ProxyMessage::new(ProxyCommand::ContextFree, CmdPayload::ContextFree { scid });
        self.proxy_send(tid, msg)?;
        let t = self.thread_mut(tid);
        t.scid = None;
        t.ipc_buffer = None;
        Ok(scid)
    }

    pub fn ipc_buffer_mut(&mut self, tid: ThreadId) -> Result<&mut IpcBuffer, ProxyError> {
        self.thread_mut(tid).ipc_buffer.as_mut().ok_or(ProxyError::NoIpcBuffer(tid))
    }

    /// Writes the call into the thread's buffer and marks the thread in RPC.
    pub fn begin_endpoint_call(
        &mut self,
        tid: ThreadId,
        registry: &ResourceRegistry,
        endpoint: ResourceId,
        tag: MessageTag,
    ) -> Result<(), ProxyError> {
        if !self.is_booted() {
            return Err(ProxyError::NotBooted);
        }
        let flags = self.thread(tid).flags;
        if !flags.is_empty() {
            return Err(ProxyError::Reentry { thread: tid, flags });
        }
        let known = registry
            .resource(endpoint)
            .is_ok_and(|r| matches!(r.kind, ResourceKind::Service | ResourceKind::ConclaveManager));
        if !known {
            return Err(ProxyError::ServiceUnknown(endpoint));
        }
        let buf = self.ipc_buffer_mut(tid)?;
        buf.mr[MR_TAG] = tag.pack();
        buf.endpoint = Some(endpoint);
        self.thread_mut(tid).flags.insert(ThreadFlags::RPC);
        Ok(())
    }

    /// The simulated service: echoes the tag and reports success.
    pub fn deliver(&mut self, tid: ThreadId) -> Result<(), ProxyError> {
        let buf = self.ipc_buffer_mut(tid)?;
        buf.scr[SCR_RETVAL] = 0;
        Ok(())
    }

    /// Clears RPC and reads the reply out of the buffer.
    pub fn end_endpoint_call(&mut self, tid: ThreadId) -> Result<EndpointReply, ProxyError> {
        let t = self.thread_mut(tid);
        t.flags.remove(ThreadFlags::RPC);
        let buf = t.ipc_buffer.as_ref().ok_or(ProxyError::NoIpcBuffer(tid))?;
        Ok(EndpointReply { tag: buf.tag(), retval: buf.scr[SCR_RETVAL] })
    }

    /// Unwinds a call whose gate entry failed.
    pub fn abort_endpoint_call(&mut self, tid: ThreadId) {
        self.thread_mut(tid).flags.remove(ThreadFlags::RPC);
    }
}
