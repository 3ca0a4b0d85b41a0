// SPDX-License-Identifier: Apache-2.0
//! Line-oriented scenario scripts.
//!
//! One step per line, `verb key=value ...`; `#` starts a comment. Every verb
//! takes `expect=<status>` (default `ok`). Verbs that mint a handle take
//! `as=<name>`, and a handle may only be used by later lines.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;

use sptm_model::core_model::{
    xnu_endpoint, DispatchTableId, DispatchTarget, DomainCode, DomainSet, EndpointId, PteBits,
};
use sptm_model::dispatcher::SvcOrigin;
use sptm_model::exclave_resources::{ConclaveRequest, ResourceId, TaskId, ThreadId};
use sptm_model::frame_table::FrameType;
use sptm_model::rules::parse_int;
use sptm_model::system::CreateOp;
use sptm_model::xnuproxy::IPC_BUFFER_SIZE;
use thiserror::Error;

/// Status every step expects unless told otherwise.
pub const OK: &str = "ok";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}: {reason}")]
pub struct ParseError {
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HandleKind {
    Endpoint,
    Connection,
    Message,
}

impl fmt::Display for HandleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Endpoint => "endpoint",
            Self::Connection => "connection",
            Self::Message => "message",
        })
    }
}

/// A resource named by id, by service name in the task's domain, or by
/// conclave manager name.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ResourceRef {
    Id(ResourceId),
    Service(String),
    Conclave(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SelectorRef {
    Code(u32),
    Name(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TrapStep {
    Boot,
    Create { op: CreateOp, name: String },
    EndpointCall { target: ResourceRef, len: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Op {
    Boot,
    ExclavesBoot,
    Register { owner: DomainCode, table: DispatchTableId, perms: DomainSet },
    Genter { caller: DomainCode, target: DispatchTarget },
    Svc { origin: SvcOrigin, imm: u16, target: DispatchTarget },
    Hvc { target: DispatchTarget },
    Complete { target: DispatchTarget },
    Retype { caller: DomainCode, frame: usize, from: FrameType, to: FrameType },
    MapPage { root: usize, ttep: usize, va: u64, frame: usize, pte: PteBits },
    TxmCall { selector: SelectorRef, inputs: Vec<u64> },
    SkEnter { endpoint: EndpointId },
    Gl0Svc { selector: u8, frame: usize, low_bits: u64 },
    Task { id: TaskId, name: String, launchd: bool, kernel: bool, entitlements: Vec<String>, thread: ThreadId },
    ConclaveAttach { caller: TaskId, task: TaskId, conclave: String },
    Conclave { task: TaskId, request: ConclaveRequest },
    Trap { task: TaskId, request: TrapStep },
    TbEndpoint { task: TaskId, ep_type: u32, data: ResourceRef, options: u64 },
    TbConnect { task: TaskId, ep: String },
    TbActivate { task: TaskId, conn: String },
    TbConstruct { task: TaskId, conn: String, size: u64, option: u32, wrapping: u64 },
    TbEncode { task: TaskId, msg: String, bytes: Vec<u8> },
    TbComplete { task: TaskId, msg: String },
    TbSend { task: TaskId, conn: String, msg: String, reply: bool },
}

impl Op {
    pub fn verb(&self) -> &'static str {
        match self {
            Self::Boot => "boot",
            Self::ExclavesBoot => "exclaves_boot",
            Self::Register { .. } => "register",
            Self::Genter { .. } => "genter",
            Self::Svc { .. } => "svc",
            Self::Hvc { .. } => "hvc",
            Self::Complete { .. } => "complete",
            Self::Retype { .. } => "retype",
            Self::MapPage { .. } => "map_page",
            Self::TxmCall { .. } => "txm_call",
            Self::SkEnter { .. } => "sk_enter",
            Self::Gl0Svc { .. } => "gl0_svc",
            Self::Task { .. } => "task",
            Self::ConclaveAttach { .. } => "conclave_attach",
            Self::Conclave { .. } => "conclave",
            Self::Trap { .. } => "trap",
            Self::TbEndpoint { .. } => "tb_endpoint",
            Self::TbConnect { .. } => "tb_connect",
            Self::TbActivate { .. } => "tb_activate",
            Self::TbConstruct { .. } => "tb_construct",
            Self::TbEncode { .. } => "tb_encode",
            Self::TbComplete { .. } => "tb_complete",
            Self::TbSend { .. } => "tb_send",
        }
    }

    /// Kind of handle an `as=` clause binds, if the verb mints one.
    pub fn binds(&self) -> Option<HandleKind> {
        match self {
            Self::TbEndpoint { .. } => Some(HandleKind::Endpoint),
            Self::TbConnect { .. } => Some(HandleKind::Connection),
            Self::TbConstruct { .. } | Self::TbSend { .. } => Some(HandleKind::Message),
            _ => None,
        }
    }

    pub fn references(&self) -> Vec<(&str, HandleKind)> {
        match self {
            Self::TbConnect { ep, .. } => vec![(ep, HandleKind::Endpoint)],
            Self::TbActivate { conn, .. } | Self::TbConstruct { conn, .. } => vec![(conn, HandleKind::Connection)],
            Self::TbEncode { msg, .. } | Self::TbComplete { msg, .. } => vec![(msg, HandleKind::Message)],
            Self::TbSend { conn, msg, .. } => vec![(conn, HandleKind::Connection), (msg, HandleKind::Message)],
            _ => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Step {
    pub line: usize,
    pub op: Op,
    pub expect: String,
    pub bind: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scenario {
    pub name: String,
    pub steps: Vec<Step>,
    /// Fixture directory named by a leading `fixtures dir=...` line,
    /// relative to the script.
    pub fixtures: Option<PathBuf>,
}

/// The `key=value` cells of one line; every key must be consumed.
struct Args<'a> {
    line: usize,
    map: BTreeMap<&'a str, &'a str>,
}

impl<'a> Args<'a> {
    fn new(line: usize, cells: impl Iterator<Item = &'a str>) -> Result<Self, ParseError> {
        let mut map = BTreeMap::new();
        for cell in cells {
            let (k, v) = cell.split_once('=').ok_or_else(|| err(line, format!("expected key=value, got {cell:?}")))?;
            if k.is_empty() || v.is_empty() {
                return Err(err(line, format!("empty key or value in {cell:?}")));
            }
            if map.insert(k, v).is_some() {
                return Err(err(line, format!("duplicate key {k:?}")));
            }
        }
        Ok(Self { line, map })
    }

    fn opt(&mut self, key: &str) -> Option<&'a str> {
        self.map.remove(key)
    }

    fn req(&mut self, key: &str) -> Result<&'a str, ParseError> {
        self.opt(key).ok_or_else(|| err(self.line, format!("missing {key}=")))
    }

    fn fail<T>(&self, key: &str, value: &str, what: &str) -> Result<T, ParseError> {
        Err(err(self.line, format!("{key}={value}: expected {what}")))
    }

    fn int<T: TryFrom<u64>>(&mut self, key: &str) -> Result<T, ParseError> {
        let v = self.req(key)?;
        match parse_int(v).and_then(|n| T::try_from(n).ok()) {
            Some(n) => Ok(n),
            None => self.fail(key, v, "an integer in range"),
        }
    }

    fn int_or<T: TryFrom<u64>>(&mut self, key: &str, default: T) -> Result<T, ParseError> {
        if self.map.contains_key(key) {
            self.int(key)
        } else {
            Ok(default)
        }
    }

    fn flag(&mut self, key: &str) -> Result<bool, ParseError> {
        match self.opt(key) {
            None | Some("false") => Ok(false),
            Some("true") => Ok(true),
            Some(v) => self.fail(key, v, "true or false"),
        }
    }

    fn domain(&mut self, key: &str) -> Result<DomainCode, ParseError> {
        let v = self.req(key)?;
        match DomainCode::from_name(v).or_else(|| parse_int(v).and_then(|n| DomainCode::from_code(n as u8))) {
            Some(d) => Ok(d),
            None => self.fail(key, v, "a domain name"),
        }
    }

    fn frame_type(&mut self, key: &str) -> Result<FrameType, ParseError> {
        let v = self.req(key)?;
        match FrameType::parse(v) {
            Some(t) => Ok(t),
            None => self.fail(key, v, "a frame type name"),
        }
    }

    fn table(&mut self) -> Result<DispatchTableId, ParseError> {
        let v = self.req("table")?;
        match DispatchTableId::from_name(v)
            .or_else(|| parse_int(v).and_then(|n| u8::try_from(n).ok()).map(DispatchTableId))
        {
            Some(t) => Ok(t),
            None => self.fail("table", v, "a table name or number"),
        }
    }

    /// `target=<raw>` or `domain= table= endpoint=`; XNU endpoint names are accepted.
    fn target(&mut self) -> Result<DispatchTarget, ParseError> {
        if self.map.contains_key("target") {
            return Ok(DispatchTarget::decode(self.int("target")?));
        }
        let domain = self.domain("domain")?;
        let table = self.table()?;
        let v = self.req("endpoint")?;
        let endpoint = match parse_int(v).and_then(|n| u32::try_from(n).ok()).or_else(|| xnu_endpoint::from_name(v)) {
            Some(e) => e,
            None => return self.fail("endpoint", v, "an endpoint number or name"),
        };
        Ok(DispatchTarget::new(domain, table, endpoint))
    }

    fn resource(&mut self) -> Result<ResourceRef, ParseError> {
        let picked = [("id", 0), ("service", 1), ("conclave", 2)]
            .into_iter()
            .filter(|(k, _)| self.map.contains_key(k))
            .collect::<Vec<_>>();
        match picked.as_slice() {
            [("id", _)] => Ok(ResourceRef::Id(self.int("id")?)),
            [("service", _)] => Ok(ResourceRef::Service(self.req("service")?.to_string())),
            [("conclave", _)] => Ok(ResourceRef::Conclave(self.req("conclave")?.to_string())),
            _ => Err(err(self.line, "expected exactly one of id=, service=, conclave=")),
        }
    }

    fn finish(self) -> Result<(), ParseError> {
        match self.map.keys().next() {
            Some(k) => Err(err(self.line, format!("unknown key {k:?}"))),
            None => Ok(()),
        }
    }
}

fn err(line: usize, reason: impl Into<String>) -> ParseError {
    ParseError { line, reason: reason.into() }
}

fn hex_bytes(line: usize, s: &str) -> Result<Vec<u8>, ParseError> {
    if !s.len().is_multiple_of(2) {
        return Err(err(line, "bytes= needs an even number of hex digits"));
    }
    (0..s.len())
        .step_by(2)
        .map(|i| u8::from_str_radix(&s[i..i + 2], 16).map_err(|_| err(line, format!("bad hex in bytes={s}"))))
        .collect()
}

fn parse_op(verb: &str, a: &mut Args<'_>) -> Result<Op, ParseError> {
    let line = a.line;
    Ok(match verb {
        "boot" => Op::Boot,
        "exclaves_boot" => Op::ExclavesBoot,
        "register" => {
            let owner = a.domain("owner")?;
            let table = a.table()?;
            Op::Register { owner, table, perms: DomainSet::from_bits(a.int("perms")?) }
        }
        "genter" => Op::Genter { caller: a.domain("caller")?, target: a.target()? },
        "svc" => {
            let origin = match a.req("origin")? {
                "TXM" => SvcOrigin::Txm,
                "EXCLAVE" => SvcOrigin::Exclave,
                v => return a.fail("origin", v, "TXM or EXCLAVE"),
            };
            Op::Svc { origin, imm: a.int_or("imm", 0)?, target: a.target()? }
        }
        "hvc" => Op::Hvc { target: a.target()? },
        "complete" => Op::Complete { target: a.target()? },
        "retype" => Op::Retype {
            caller: a.domain("caller")?,
            frame: a.int("frame")?,
            from: a.frame_type("from")?,
            to: a.frame_type("to")?,
        },
        "map_page" => {
            let (root, ttep, va, frame) = (a.int("root")?, a.int("ttep")?, a.int("va")?, a.int("frame")?);
            let pte = if a.map.contains_key("sprr") {
                let index: u8 = a.int("sprr")?;
                if index > 15 {
                    return Err(err(line, "sprr= is a 4-bit index"));
                }
                PteBits::for_index(index)
            } else {
                let ap = a.int_or("ap", 0u8)?;
                let (uxn, pxn) = (a.flag("uxn")?, a.flag("pxn")?);
                PteBits::new(ap, uxn, pxn).map_err(|e| err(line, e.to_string()))?
            };
            Op::MapPage { root, ttep, va, frame, pte }
        }
        "txm_call" => {
            let v = a.req("selector")?;
            let selector = match parse_int(v).and_then(|n| u32::try_from(n).ok()) {
                Some(n) => SelectorRef::Code(n),
                None => SelectorRef::Name(v.to_string()),
            };
            let inputs = match a.opt("inputs") {
                None => Vec::new(),
                Some(list) => list
                    .split(',')
                    .map(|s| parse_int(s).ok_or_else(|| err(line, format!("bad input {s:?}"))))
                    .collect::<Result<_, _>>()?,
            };
            Op::TxmCall { selector, inputs }
        }
        "sk_enter" => Op::SkEnter { endpoint: a.int("endpoint")? },
        "gl0_svc" => {
            Op::Gl0Svc { selector: a.int("selector")?, frame: a.int("frame")?, low_bits: a.int_or("low_bits", 0)? }
        }
        "task" => {
            let id = a.int("id")?;
            Op::Task {
                id,
                name: a.req("name")?.to_string(),
                launchd: a.flag("launchd")?,
                kernel: a.flag("kernel")?,
                entitlements: a.opt("ent").map(|s| s.split(',').map(str::to_string).collect()).unwrap_or_default(),
                thread: a.int_or("thread", 100u32.saturating_add(id))?,
            }
        }
        "conclave_attach" => Op::ConclaveAttach {
            caller: a.int("caller")?,
            task: a.int("task")?,
            conclave: a.req("conclave")?.to_string(),
        },
        "conclave" => {
            let task = a.int("task")?;
            let v = a.req("request")?;
            match ConclaveRequest::parse(v) {
                Some(request) => Op::Conclave { task, request },
                None => return a.fail("request", v, "launch, suspend, resume or stop"),
            }
        }
        "trap" => {
            let task = a.int("task")?;
            let request = match a.req("op")? {
                "BOOT" => TrapStep::Boot,
                "ENDPOINT_CALL" => {
                    TrapStep::EndpointCall { target: a.resource()?, len: a.int_or("len", IPC_BUFFER_SIZE)? }
                }
                v => match CreateOp::parse(v) {
                    Some(op) => TrapStep::Create { op, name: a.req("name")?.to_string() },
                    None => return a.fail("op", v, "a control-trap operation"),
                },
            };
            Op::Trap { task, request }
        }
        "tb_endpoint" => Op::TbEndpoint {
            task: a.int("task")?,
            ep_type: a.int("type")?,
            data: a.resource()?,
            options: a.int_or("options", 0)?,
        },
        "tb_connect" => Op::TbConnect { task: a.int("task")?, ep: a.req("ep")?.to_string() },
        "tb_activate" => Op::TbActivate { task: a.int("task")?, conn: a.req("conn")?.to_string() },
        "tb_construct" => Op::TbConstruct {
            task: a.int("task")?,
            conn: a.req("conn")?.to_string(),
            size: a.int("size")?,
            option: a.int_or("option", 0)?,
            wrapping: a.int_or("wrapping", 0)?,
        },
        "tb_encode" => {
            let (task, msg) = (a.int("task")?, a.req("msg")?.to_string());
            Op::TbEncode { task, msg, bytes: hex_bytes(line, a.req("bytes")?)? }
        }
        "tb_complete" => Op::TbComplete { task: a.int("task")?, msg: a.req("msg")?.to_string() },
        "tb_send" => Op::TbSend {
            task: a.int("task")?,
            conn: a.req("conn")?.to_string(),
            msg: a.req("msg")?.to_string(),
            reply: a.flag("reply")?,
        },
        other => return Err(err(line, format!("unknown verb {other:?}"))),
    })
}

/// Parses a script; `name` labels the scenario.
pub fn parse(name: &str, text: &str) -> Result<Scenario, ParseError> {
    let mut steps = Vec::new();
    let mut fixtures = None;
    let mut handles: BTreeMap<String, HandleKind> = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let body = raw.split_once('#').map_or(raw, |(b, _)| b).trim();
        let mut cells = body.split_whitespace();
        let Some(verb) = cells.next() else { continue };
        let mut args = Args::new(line, cells)?;
        if verb == "fixtures" {
            if !steps.is_empty() || fixtures.is_some() {
                return Err(err(line, "fixtures must precede every step and appear once"));
            }
            fixtures = Some(PathBuf::from(args.req("dir")?));
            args.finish()?;
            continue;
        }
        let expect = args.opt("expect").unwrap_or(OK).to_string();
        let bind = args.opt("as").map(str::to_string);
        let op = parse_op(verb, &mut args)?;
        args.finish()?;
        for (name, kind) in op.references() {
            match handles.get(name) {
                Some(k) if *k == kind => {}
                Some(k) => return Err(err(line, format!("{name:?} is a {k} handle, expected a {kind}"))),
                None => return Err(err(line, format!("{name:?} is not bound by an earlier step"))),
            }
        }
        if let Some(b) = &bind {
            let kind = op.binds().ok_or_else(|| err(line, format!("{verb} does not produce a handle")))?;
            if handles.insert(b.clone(), kind).is_some() {
                return Err(err(line, format!("handle {b:?} is already bound")));
            }
        }
        steps.push(Step { line, op, expect, bind });
    }
    Ok(Scenario { name: name.to_string(), steps, fixtures })
}
