// SPDX-License-Identifier: Apache-2.0
//! Tightbeam IPC: endpoints, transports, connections and the message
//! lifecycle. Sending is split so the caller can route the wire call.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;
use core::fmt;

use thiserror::Error;

use crate::core_model::Status;
use crate::exclave_resources::ConnectionId;
use crate::rules::{self, DataError};
use crate::xnuproxy::{MessageTag, IPC_MRS};

pub type EndpointHandle = u32;
pub type MessageHandle = u32;

/// Transmit buffer of the XNU transport: the message registers.
pub const XNU_TX_BUFFER_SIZE: u64 = (IPC_MRS * 8) as u64;
/// Transmit buffer assumed for every other transport kind.
pub const DEFAULT_TX_BUFFER_SIZE: u64 = 4096;
/// Live-object budget of an arena unless configured.
pub const DEFAULT_CAPACITY: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TransportKind {
    Null,
    Mach,
    Eve,
    Xnu,
    Darwin,
    Unix,
    Delegated,
    Afk,
}

impl TransportKind {
    pub const ALL: [TransportKind; 8] =
        [Self::Null, Self::Mach, Self::Eve, Self::Xnu, Self::Darwin, Self::Unix, Self::Delegated, Self::Afk];

    pub const fn name(self) -> &'static str {
        match self {
            Self::Null => "NULL",
            Self::Mach => "MACH",
            Self::Eve => "EVE",
            Self::Xnu => "XNU",
            Self::Darwin => "DARWIN",
            Self::Unix => "UNIX",
            Self::Delegated => "DELEGATED",
            Self::Afk => "AFK",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

/// Endpoint type code of the XNU transport.
pub const EP_TYPE_XNU: u32 = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransportRole {
    Client,
    Service,
}

impl TransportRole {
    pub const fn name(self) -> &'static str {
        match self {
            Self::Client => "client",
            Self::Service => "service",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Self::Client, Self::Service].into_iter().find(|r| r.name() == s)
    }
}

/// Which build's transport table applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Kernel,
    Framework,
}

impl Mode {
    pub const fn name(self) -> &'static str {
        match self {
            Self::Kernel => "kernel",
            Self::Framework => "framework",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Self::Kernel, Self::Framework].into_iter().find(|m| m.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TransportRule {
    pub ep_type: u32,
    /// `None` matches any options value.
    pub options: Option<u64>,
    pub kind: TransportKind,
    pub role: Option<TransportRole>,
    pub mode: Mode,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransportTable {
    rules: Vec<TransportRule>,
}

impl TransportTable {
    pub fn parse(text: &str) -> Result<Self, DataError> {
        let rules = rules::rows("transports.tsv", text)
            .map(|row| {
                let options = match row.cell(1)? {
                    "any" => None,
                    _ => Some(row.int(1)?),
                };
                let role = match row.opt(3) {
                    None => None,
                    Some(r) => {
                        Some(TransportRole::parse(r).ok_or_else(|| row.error(alloc::format!("unknown role {r}")))?)
                    }
                };
                let m = row.cell(4)?;
                let mode = Mode::parse(m).ok_or_else(|| row.error(alloc::format!("unknown mode {m}")))?;
                Ok(TransportRule {
                    ep_type: u32::try_from(row.int(0)?).map_err(|_| row.error("type too wide"))?,
                    options,
                    kind: TransportKind::parse(row.cell(2)?).ok_or_else(|| row.error("unknown kind"))?,
                    role,
                    mode,
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { rules })
    }

    pub fn rules(&self) -> &[TransportRule] {
        &self.rules
    }

    pub fn resolve(&self, mode: Mode, ep_type: u32, options: u64) -> Option<&TransportRule> {
        self.rules.iter().find(|r| r.mode == mode && r.ep_type == ep_type && r.options.is_none_or(|o| o == options))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TbEndpoint {
    pub ep_type: u32,
    pub options: u64,
    pub interface_id: u64,
    /// Resource id for XNU endpoints.
    pub data: u64,
    pub valid: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TbTransport {
    pub kind: TransportKind,
    pub role: Option<TransportRole>,
    pub endpoint_data: u64,
    pub tx_buffer_size: u64,
    pub multipart: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TbConnection {
    transport: TbTransport,
    pub observers: Vec<u32>,
    /// Per-observer notification counts.
    pub notifications: BTreeMap<u32, u32>,
    pub closed: bool,
}

impl TbConnection {
    pub fn transport(&self) -> &TbTransport {
        &self.transport
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum MessageState {
    Uninitialized = 0,
    Preparing = 1,
    Ready = 2,
    Sent = 3,
    Received = 4,
}

impl MessageState {
    pub const ALL: [MessageState; 5] = [Self::Uninitialized, Self::Preparing, Self::Ready, Self::Sent, Self::Received];

    pub const fn name(self) -> &'static str {
        match self {
            Self::Uninitialized => "TB_MESSAGE_STATE_UNINITIALIZED",
            Self::Preparing => "TB_MESSAGE_STATE_PREPARING",
            Self::Ready => "TB_MESSAGE_STATE_READY",
            Self::Sent => "TB_MESSAGE_STATE_SENT",
            Self::Received => "TB_MESSAGE_STATE_RECEIVED",
        }
    }
}

/// The only state changes a message may make.
pub const fn message_transition_allowed(from: MessageState, to: MessageState) -> bool {
    use MessageState as S;
    matches!(
        (from, to),
        (S::Uninitialized, S::Preparing) | (S::Preparing, S::Ready) | (S::Ready, S::Sent) | (S::Sent, S::Received)
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Disposition {
    Query = 1,
    Reply = 2,
}

impl Disposition {
    pub const fn name(self) -> &'static str {
        match self {
            Self::Query => "TB_MESSAGE_DISPOSITION_QUERY",
            Self::Reply => "TB_MESSAGE_DISPOSITION_REPLY",
        }
    }
}

/// Transport message buffer; `offset <= size` always holds.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TbBuffer {
    /// Function selector at the endpoint.
    pub type_word: u64,
    pub wrapping: u64,
    offset: u64,
    size: u64,
    /// Flag halfword carried in the wire tag label.
    pub flags: u16,
    payload: Vec<u8>,
}

impl TbBuffer {
    pub fn new(size: u64) -> Self {
        Self { type_word: 0, wrapping: 0, offset: 0, size, flags: 0, payload: Vec::new() }
    }

    pub const fn offset(&self) -> u64 {
        self.offset
    }

    pub const fn size(&self) -> u64 {
        self.size
    }

    pub fn payload(&self) -> &[u8] {
        &self.payload
    }

    /// Wire tag: message-register count in the low six bits, flags as the label.
    pub const fn wire_tag(&self) -> u64 {
        ((self.size + 7) >> 3) & 0x3f | (self.flags as u64) << 16
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TbMessage {
    state: MessageState,
    pub disposition: Disposition,
    pub connection_id: ConnectionId,
    pub client_id: u64,
    pub msg_id: u64,
    pub num_caps: u64,
    pub buffer: TbBuffer,
}

impl TbMessage {
    pub const fn state(&self) -> MessageState {
        self.state
    }

    fn advance(&mut self, to: MessageState) -> Result<(), TbError> {
        if !message_transition_allowed(self.state, to) {
            return Err(TbError::WrongState { expected: to, actual: self.state });
        }
        self.state = to;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum TbError {
    #[error("arena capacity exhausted")]
    AllocationFailure,
    #[error("endpoint {0} is not valid")]
    EndpointInvalid(EndpointHandle),
    #[error("no {mode:?} transport for endpoint type {ep_type} options {options}")]
    UnsupportedTransport { mode: Mode, ep_type: u32, options: u64 },
    #[error("connection {0} is unknown")]
    UnknownConnection(ConnectionId),
    #[error("connection {0} is closed")]
    ConnectionClosed(ConnectionId),
    #[error("message {0} is unknown")]
    UnknownMessage(MessageHandle),
    #[error("buffer wrapping flag is set")]
    WrappingNotFalse,
    #[error("{size} bytes exceed the {limit}-byte transmit buffer")]
    OversizeWithoutMultipart { size: u64, limit: u64 },
    #[error("encoding {len} bytes at offset {offset} overflows {size}")]
    BufferOverflow { offset: u64, len: usize, size: u64 },
    #[error("message is {} where {} is required", .actual.name(), .expected.name())]
    WrongState { expected: MessageState, actual: MessageState },
    #[error("message disposition is not a query")]
    WrongDisposition,
    #[error("message belongs to another connection")]
    ConnectionMismatch,
}

impl Status for TbError {
    fn status_name(&self) -> &'static str {
        match self {
            Self::AllocationFailure => "AllocationFailure",
            Self::EndpointInvalid(_) => "EndpointInvalid",
            Self::UnsupportedTransport { .. } => "UnsupportedTransport",
            Self::UnknownConnection(_) => "UnknownConnection",
            Self::ConnectionClosed(_) => "ConnectionClosed",
            Self::UnknownMessage(_) => "UnknownMessage",
            Self::WrappingNotFalse => "WrappingNotFalse",
            Self::OversizeWithoutMultipart { .. } => "OversizeWithoutMultipart",
            Self::BufferOverflow { .. } => "BufferOverflow",
            Self::WrongState { .. } => "WrongState",
            Self::WrongDisposition => "WrongDisposition",
            Self::ConnectionMismatch => "ConnectionMismatch",
        }
    }
}

/// What the transport hands to the wire after a send passes its checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WireCall {
    pub kind: TransportKind,
    pub endpoint_data: u64,
    pub tag: u64,
}

impl WireCall {
    pub const fn message_tag(&self) -> MessageTag {
        MessageTag::unpack(self.tag)
    }
}

impl fmt::Display for WireCall {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} endpoint={} tag={:#x}", self.kind.name(), self.endpoint_data, self.tag)
    }
}

/// Arena owning every endpoint, connection and message.
#[derive(Debug, Clone)]
pub struct Tightbeam {
    mode: Mode,
    table: TransportTable,
    capacity: usize,
    endpoints: BTreeMap<EndpointHandle, TbEndpoint>,
    connections: BTreeMap<ConnectionId, TbConnection>,
    messages: BTreeMap<MessageHandle, TbMessage>,
    next_handle: u32,
}

impl Tightbeam {
    pub fn new(mode: Mode, table: TransportTable) -> Self {
        Self::with_capacity(mode, table, DEFAULT_CAPACITY)
    }

    pub fn with_capacity(mode: Mode, table: TransportTable, capacity: usize) -> Self {
        Self {
            mode,
            table,
            capacity,
            endpoints: BTreeMap::new(),
            connections: BTreeMap::new(),
            messages: BTreeMap::new(),
            next_handle: 0,
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    fn live(&self) -> usize {
        self.endpoints.len() + self.connections.len() + self.messages.len()
    }

    fn alloc_handle(&mut self) -> Result<u32, TbError> {
        if self.live() >= self.capacity {
            return Err(TbError::AllocationFailure);
        }
        let h = self.next_handle;
        self.next_handle += 1;
        Ok(h)
    }

    pub fn endpoint(&self, ep: EndpointHandle) -> Option<&TbEndpoint> {
        self.endpoints.get(&ep)
    }

    pub fn connection(&self, conn: ConnectionId) -> Result<&TbConnection, TbError> {
        self.connections.get(&conn).ok_or(TbError::UnknownConnection(conn))
    }

    fn connection_mut(&mut self, conn: ConnectionId) -> Result<&mut TbConnection, TbError> {
        self.connections.get_mut(&conn).ok_or(TbError::UnknownConnection(conn))
    }

    pub fn message(&self, msg: MessageHandle) -> Result<&TbMessage, TbError> {
        self.messages.get(&msg).ok_or(TbError::UnknownMessage(msg))
    }

    fn message_mut(&mut self, msg: MessageHandle) -> Result<&mut TbMessage, TbError> {
        self.messages.get_mut(&msg).ok_or(TbError::UnknownMessage(msg))
    }

    pub fn endpoint_create(&mut self, ep_type: u32, id: u64, options: u64) -> Result<EndpointHandle, TbError> {
        let h = self.alloc_handle()?;
        self.endpoints.insert(h, TbEndpoint { ep_type, options, interface_id: 0, data: id, valid: true });
        Ok(h)
    }

    /// Builds the transport, creates the connection and consumes the endpoint.
    pub fn connection_create_with_endpoint(&mut self, ep: EndpointHandle) -> Result<ConnectionId, TbError> {
        let e = *self.endpoints.get(&ep).filter(|e| e.valid).ok_or(TbError::EndpointInvalid(ep))?;
        let rule = *self.table.resolve(self.mode, e.ep_type, e.options).ok_or(TbError::UnsupportedTransport {
            mode: self.mode,
            ep_type: e.ep_type,
            options: e.options,
        })?;
        let (tx_buffer_size, multipart) = match rule.kind {
            TransportKind::Xnu => (XNU_TX_BUFFER_SIZE, false),
            _ => (DEFAULT_TX_BUFFER_SIZE, false),
        };
        let transport =
            TbTransport { kind: rule.kind, role: rule.role, endpoint_data: e.data, tx_buffer_size, multipart };
        let id = self.alloc_handle()?;
        self.connections.insert(
            id,
            TbConnection { transport, observers: Vec::new(), notifications: BTreeMap::new(), closed: false },
        );
        self.endpoints.remove(&ep);
        Ok(id)
    }

    pub fn add_observer(&mut self, conn: ConnectionId, observer: u32) -> Result<(), TbError> {
        self.connection_mut(conn)?.observers.push(observer);
        Ok(())
    }

    /// Notifies observers; the XNU transport's own activation does nothing.
    pub fn connection_activate(&mut self, conn: ConnectionId) -> Result<usize, TbError> {
        let c = self.connection_mut(conn)?;
        for o in c.observers.clone() {
            *c.notifications.entry(o).or_default() += 1;
        }
        Ok(c.observers.len())
    }

    pub fn connection_close(&mut self, conn: ConnectionId) -> Result<(), TbError> {
        self.connection_mut(conn)?.closed = true;
        Ok(())
    }

    /// `option == 1` builds a reply, anything else a query.
    pub fn message_construct(
        &mut self,
        conn: ConnectionId,
        size: u64,
        option: u32,
        buffer: Option<TbBuffer>,
    ) -> Result<MessageHandle, TbError> {
        let c = self.connection(conn)?;
        if c.closed {
            return Err(TbError::ConnectionClosed(conn));
        }
        let t = *c.transport();
        let mut buffer = buffer.unwrap_or_else(|| TbBuffer::new(size));
        if buffer.wrapping != 0 {
            return Err(TbError::WrappingNotFalse);
        }
        if size > t.tx_buffer_size && !t.multipart {
            return Err(TbError::OversizeWithoutMultipart { size, limit: t.tx_buffer_size });
        }
        buffer.size = size;
        buffer.offset = 0;
        buffer.payload.clear();
        let disposition = if option == 1 { Disposition::Reply } else { Disposition::Query };
        let h = self.alloc_handle()?;
        let mut msg = TbMessage {
            state: MessageState::Uninitialized,
            disposition,
            connection_id: conn,
            client_id: 0,
            msg_id: u64::from(h),
            num_caps: 0,
            buffer,
        };
        msg.advance(MessageState::Preparing)?;
        self.messages.insert(h, msg);
        Ok(h)
    }

    pub fn message_encode(&mut self, msg: MessageHandle, bytes: &[u8]) -> Result<u64, TbError> {
        let m = self.message_mut(msg)?;
        if m.state != MessageState::Preparing {
            return Err(TbError::WrongState { expected: MessageState::Preparing, actual: m.state });
        }
        let b = &mut m.buffer;
        let end = b.offset.checked_add(bytes.len() as u64).filter(|e| *e <= b.size);
        let end = end.ok_or(TbError::BufferOverflow { offset: b.offset, len: bytes.len(), size: b.size })?;
        b.payload.extend_from_slice(bytes);
        b.offset = end;
        Ok(end)
    }

    /// Queries and replies alike become ready.
    pub fn message_complete(&mut self, msg: MessageHandle) -> Result<(), TbError> {
        let m = self.message_mut(msg)?;
        if m.state != MessageState::Preparing {
            return Err(TbError::WrongState { expected: MessageState::Preparing, actual: m.state });
        }
        m.advance(MessageState::Ready)
    }

    /// Send-side checks; on success the message is SENT and the wire call is returned.
    pub fn prepare_send(&mut self, conn: ConnectionId, msg: MessageHandle) -> Result<WireCall, TbError> {
        let c = self.connection(conn)?;
        if c.closed {
            return Err(TbError::ConnectionClosed(conn));
        }
        let t = *c.transport();
        let m = self.message(msg)?;
        if m.state != MessageState::Ready {
            return Err(TbError::WrongState { expected: MessageState::Ready, actual: m.state });
        }
        if m.disposition != Disposition::Query {
            return Err(TbError::WrongDisposition);
        }
        if m.connection_id != conn {
            return Err(TbError::ConnectionMismatch);
        }
        let m = self.message_mut(msg)?;
        m.advance(MessageState::Sent)?;
        // The transport repeats the state check before writing the tag.
        if m.state != MessageState::Sent {
            return Err(TbError::WrongState { expected: MessageState::Sent, actual: m.state });
        }
        Ok(WireCall { kind: t.kind, endpoint_data: t.endpoint_data, tag: m.buffer.wire_tag() })
    }

    /// Builds the response carrying `reply_tag` and walks it to RECEIVED.
    pub fn receive_reply(&mut self, conn: ConnectionId, reply_tag: MessageTag) -> Result<MessageHandle, TbError> {
        let size = u64::from(reply_tag.mr_count()) * 8;
        let limit = self.connection(conn)?.transport().tx_buffer_size;
        let h = self.message_construct(conn, size.min(limit), 1, None)?;
        let m = self.message_mut(h)?;
        m.buffer.flags = reply_tag.label();
        m.advance(MessageState::Ready)?;
        m.advance(MessageState::Sent)?;
        m.advance(MessageState::Received)?;
        Ok(h)
    }

    pub fn message_destroy(&mut self, msg: MessageHandle) -> Result<TbMessage, TbError> {
        self.messages.remove(&msg).ok_or(TbError::UnknownMessage(msg))
    }
}
