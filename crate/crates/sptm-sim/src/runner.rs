// SPDX-License-Identifier: Apache-2.0
//! Executes a scenario against a fresh world and compares outcomes.

use std::collections::BTreeMap;
use std::fmt;

use sptm_model::core_model::Status;
use sptm_model::exclave_resources::{IpcSpace, ResourceId, ResourceKind, TaskId, TaskRecord, KERNEL_DOMAIN};
use sptm_model::system::{Config, SimError, System, TrapRequest};
use sptm_model::trace::Trace;

use crate::fixtures::Fixtures;
use crate::scenario::{Op, ResourceRef, Scenario, SelectorRef, TrapStep};

pub const EXIT_OK: u8 = 0;
pub const EXIT_MISMATCH: u8 = 1;
pub const EXIT_PARSE: u8 = 2;

/// Outcome reported for a step whose handle was never bound because the
/// binding step failed.
pub const UNBOUND: &str = "Unbound";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepOutcome {
    pub line: usize,
    pub verb: &'static str,
    pub expected: String,
    pub actual: String,
}

impl StepOutcome {
    pub fn matched(&self) -> bool {
        self.expected == self.actual
    }
}

impl fmt::Display for StepOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {} expected {}, got {}", self.line, self.verb, self.expected, self.actual)
    }
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub trace: Trace,
    pub steps: Vec<StepOutcome>,
}

impl RunReport {
    pub fn mismatches(&self) -> impl Iterator<Item = &StepOutcome> {
        self.steps.iter().filter(|s| !s.matched())
    }

    pub fn exit_code(&self) -> u8 {
        if self.mismatches().next().is_some() {
            EXIT_MISMATCH
        } else {
            EXIT_OK
        }
    }
}

pub fn run(scenario: &Scenario, fixtures: &Fixtures, config: Config) -> RunReport {
    let mut sys = System::new(config, fixtures.rules.clone(), fixtures.resources.clone());
    let mut handles = BTreeMap::new();
    let mut steps = Vec::with_capacity(scenario.steps.len());
    for step in &scenario.steps {
        let (actual, minted) = execute(&mut sys, &handles, &step.op);
        if let (Some(name), Some(h)) = (&step.bind, minted) {
            handles.insert(name.clone(), h);
        }
        steps.push(StepOutcome { line: step.line, verb: step.op.verb(), expected: step.expect.clone(), actual });
    }
    RunReport { trace: sys.trace().clone(), steps }
}

fn status<T>(r: &Result<T, SimError>) -> String {
    match r {
        Ok(_) => "ok".into(),
        Err(e) => e.status_name().into(),
    }
}

/// Status plus the handle a binding step minted.
type Executed = (String, Option<u32>);

fn minted(r: Result<u32, SimError>) -> Executed {
    let s = status(&r);
    (s, r.ok())
}

fn resolve(sys: &System, task: TaskId, r: &ResourceRef) -> Result<ResourceId, SimError> {
    let reg = sys.registry();
    Ok(match r {
        ResourceRef::Id(id) => *id,
        ResourceRef::Service(name) => {
            let domain = reg.task_domain(task)?.unwrap_or_else(|| KERNEL_DOMAIN.to_string());
            reg.lookup_service(&domain, name)?
        }
        ResourceRef::Conclave(name) => reg.lookup(KERNEL_DOMAIN, name, Some(ResourceKind::ConclaveManager))?,
    })
}

fn execute(sys: &mut System, handles: &BTreeMap<String, u32>, op: &Op) -> Executed {
    macro_rules! handle {
        ($name:expr) => {
            match handles.get($name.as_str()) {
                Some(h) => *h,
                None => return (UNBOUND.into(), None),
            }
        };
    }
    let gate = |r: Result<sptm_model::dispatcher::GateOutcome, SimError>| match r {
        Ok(o) => o.status_name().to_string(),
        Err(e) => e.status_name().to_string(),
    };
    let done = |s: String| (s, None);
    match op {
        Op::Boot => done(status(&sys.boot())),
        Op::ExclavesBoot => done(status(&sys.exclaves_boot())),
        Op::Register { owner, table, perms } => done(status(&sys.register_dispatch_table(*owner, *table, *perms))),
        Op::Genter { caller, target } => done(gate(sys.genter(*caller, *target))),
        Op::Svc { origin, imm, target } => done(gate(sys.svc(*origin, *imm, *target))),
        Op::Hvc { target } => done(gate(sys.hvc(*target))),
        Op::Complete { target } => done(status(&sys.complete(*target))),
        Op::Retype { caller, frame, from, to } => done(status(&sys.retype(*caller, *frame, *from, *to))),
        Op::MapPage { root, ttep, va, frame, pte } => done(status(&sys.map_page(*root, *ttep, *va, *frame, *pte))),
        Op::TxmCall { selector, inputs } => {
            let code = match selector {
                SelectorRef::Code(c) => *c,
                SelectorRef::Name(n) => match sys.rules().txm_selectors.by_name(n) {
                    Some(s) => s.selector,
                    None => return done("SelectorUnknown".into()),
                },
            };
            done(status(&sys.txm_call(code, inputs.clone())))
        }
        Op::SkEnter { endpoint } => done(status(&sys.sk_enter(*endpoint))),
        Op::Gl0Svc { selector, frame, low_bits } => done(match sys.gl0_service(*selector, *frame, *low_bits) {
            Ok(o) => o.name().into(),
            Err(e) => e.status_name().into(),
        }),
        Op::Task { id, name, launchd, kernel, entitlements, thread } => {
            sys.add_task(TaskRecord {
                task_id: *id,
                name: name.clone(),
                entitlements: entitlements.iter().cloned().collect(),
                is_launchd: *launchd,
                is_kernel: *kernel,
                conclave: None,
                space: IpcSpace::default(),
                thread: *thread,
            });
            done("ok".into())
        }
        Op::ConclaveAttach { caller, task, conclave } => done(status(&sys.conclave_attach(*caller, *task, conclave))),
        Op::Conclave { task, request } => done(status(&sys.conclave_request(*task, *request))),
        Op::Trap { task, request } => {
            let request = match request {
                TrapStep::Boot => TrapRequest::Boot,
                TrapStep::Create { op, name } => TrapRequest::Create { op: *op, name: name.clone() },
                TrapStep::EndpointCall { target, len } => match resolve(sys, *task, target) {
                    Ok(identifier) => TrapRequest::EndpointCall { identifier, buffer: vec![0; *len] },
                    Err(e) => return done(e.status_name().into()),
                },
            };
            done(status(&sys.ctl_trap(*task, request)))
        }
        Op::TbEndpoint { task, ep_type, data, options } => match resolve(sys, *task, data) {
            Ok(id) => minted(sys.tb_endpoint_create(*task, *ep_type, id, *options)),
            Err(e) => done(e.status_name().into()),
        },
        Op::TbConnect { task, ep } => minted(sys.tb_connection_create(*task, handle!(ep))),
        Op::TbActivate { task, conn } => done(status(&sys.tb_activate(*task, handle!(conn)))),
        Op::TbConstruct { task, conn, size, option, wrapping } => {
            minted(sys.tb_message_construct(*task, handle!(conn), *size, *option, *wrapping))
        }
        Op::TbEncode { task, msg, bytes } => done(status(&sys.tb_message_encode(*task, handle!(msg), bytes))),
        Op::TbComplete { task, msg } => done(status(&sys.tb_message_complete(*task, handle!(msg)))),
        Op::TbSend { task, conn, msg, reply } => {
            let r = sys.tb_send_query(*task, handle!(conn), handle!(msg), *reply);
            (status(&r), r.ok().flatten())
        }
    }
}
