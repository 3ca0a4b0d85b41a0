// SPDX-License-Identifier: Apache-2.0
//! Acceptance criteria, one PASS/FAIL line each.
//!
//! Oracles here read the raw table text themselves and share no parsing or
//! decision code with the model. A criterion listed in `KNOWN_FAILURES`
//! must still fail; if it starts passing the run fails so the entry gets
//! removed.

use std::collections::{BTreeMap, BTreeSet};
use std::num::NonZeroUsize;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use proptest::prelude::Rng;
use proptest::test_runner::{Config as PtConfig, RngAlgorithm, TestRng, TestRunner};
use sptm_model::core_model::{DispatchTableId, DispatchTarget, DomainCode, DomainSet, Status};
use sptm_model::dispatcher::{event_for_genter, DispatchError, Monitor, MAX_EVENT, MAX_STATE};
use sptm_model::exclave_resources::{
    conclave_edge, entitlement, ConclaveRequest, ConclaveState, IpcSpace, ResourceInfo, ResourceKind, TaskRecord,
    KERNEL_DOMAIN,
};
use sptm_model::frame_table::{FrameTable, FrameType};
use sptm_model::page_mapper::xnu_mappable_set;
use sptm_model::rules::{RuleSet, RuleSources};
use sptm_model::system::{Config, CreateOp, SimError, System, TrapRequest, TrapResult};
use sptm_model::tightbeam::{message_transition_allowed, MessageState, EP_TYPE_XNU};
use sptm_model::xnuproxy::{MessageTag, IPC_BUFFER_SIZE};
use sptm_sim::{load_scenario, run};

type Verdict = Result<(), String>;
type Criterion = (u8, &'static str, fn() -> Verdict);

/// Criteria that cannot hold as written, with the reason.
const KNOWN_FAILURES: [(u8, &str); 1] = [(
    4,
    "NVME mask 0x12 sets domain bits 1 and 4 (XNU, XNU_HIB); the {TXM, SK} reading contradicts the 0x2 = {XNU} rows",
)];

fn check(cond: bool, msg: impl FnOnce() -> String) -> Verdict {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

/// Non-comment rows of a TSV table, split on tabs.
fn tsv(text: &str) -> Vec<Vec<&str>> {
    text.lines()
        .filter(|l| !l.trim().is_empty() && !l.starts_with('#'))
        .map(|l| l.split('\t').map(str::trim).collect())
        .collect()
}

fn int(s: &str) -> u64 {
    match s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
        Some(h) => u64::from_str_radix(h, 16).expect("hex"),
        None => s.parse().expect("decimal"),
    }
}

// ---- 1: retype matrix ----

fn retype_matrix() -> Verdict {
    let src = RuleSources::builtin();
    let names: BTreeMap<u8, &str> = tsv(src.frame_types).iter().map(|r| (int(r[0]) as u8, r[1])).collect();
    let owner: BTreeMap<&str, &str> =
        tsv(src.caller_domains).iter().map(|r| (r[1], r[2].trim_end_matches("_DOMAIN"))).collect();
    let allowed: BTreeMap<&str, BTreeSet<&str>> = tsv(src.retype_transitions)
        .iter()
        .map(|r| {
            let set = match r[1] {
                "*" => names.values().copied().collect(),
                "-" => BTreeSet::new(),
                list => list.split(',').collect(),
            };
            (r[0], set)
        })
        .collect();
    let oracle = |caller: &str, from: &str, to: &str| -> &'static str {
        if from != "SPTM_UNTYPED" && owner[from] != caller {
            "CallerDomainDenied"
        } else if !allowed[from].contains(to) {
            "TransitionDenied"
        } else {
            "ok"
        }
    };
    let rules = RuleSet::builtin();
    let one = NonZeroUsize::new(1).unwrap();
    let mut mismatches = Vec::new();
    let mut triples = 0;
    for caller in DomainCode::ALL {
        for (&from_code, &from) in &names {
            for (&to_code, &to) in &names {
                triples += 1;
                let mut ft = FrameTable::new(one, rules.frames.clone());
                let from_t = FrameType::new(from_code).unwrap();
                ft.retype(DomainCode::Sptm, 0, FrameType::SPTM_UNTYPED, from_t).map_err(|e| e.to_string())?;
                let got = match ft.retype(caller, 0, from_t, FrameType::new(to_code).unwrap()) {
                    Ok(_) => "ok",
                    Err(e) => e.status_name(),
                };
                let want = oracle(caller.name(), from, to);
                if got != want {
                    mismatches.push(format!("{}:{from}->{to} got {got} want {want}", caller.name()));
                }
            }
        }
    }
    check(triples == 5 * 63 * 63, || format!("enumerated {triples} triples"))?;
    check(mismatches.is_empty(), || format!("{} mismatches, first {:?}", mismatches.len(), mismatches.first()))
}

// ---- 2: mappable masks ----

fn mappable_masks() -> Verdict {
    let src = RuleSources::builtin();
    let names: BTreeMap<u64, &str> = tsv(src.frame_types).iter().map(|r| (int(r[0]), r[1])).collect();
    let listed: BTreeMap<u64, &str> = tsv(src.xnu_mappable).iter().map(|r| (int(r[0]), r[1])).collect();
    const MASK: u64 = 0x4fff_ffd1_c0fe_177e;
    let cleared: BTreeSet<u64> = (0..64).filter(|b| MASK >> b & 1 == 0).collect();
    check(cleared.len() == 20, || format!("{} clear bits", cleared.len()))?;
    check(cleared == listed.keys().copied().collect(), || "clear-bit decode differs from the listed codes".into())?;
    for (code, name) in &listed {
        if let Some(n) = names.get(code) {
            check(n == name, || format!("code {code}: listed {name}, type table {n}"))?;
        }
    }
    let model: BTreeSet<u64> = xnu_mappable_set().iter().map(|t| u64::from(t.code())).collect();
    check(model == cleared, || "model mappable set differs from the decode".into())?;

    let decode = |mask: u64| -> BTreeSet<&str> { (0..63).filter(|b| mask >> b & 1 == 1).map(|b| names[&b]).collect() };
    let want: BTreeSet<&str> = ["XNU_PAGE_TABLE", "XNU_PAGE_TABLE_ROZONE"].into();
    check(decode(0x280000) == want, || format!("0x280000 decodes to {:?}", decode(0x280000)))?;

    // Rows whose mask and named list disagree, computed from the text.
    let drift: BTreeSet<u8> = tsv(src.table_map_rules)
        .iter()
        .filter(|r| r[3] != "*")
        .filter(|r| {
            let named: BTreeSet<&str> = if r[3] == "-" { BTreeSet::new() } else { r[3].split(',').collect() };
            decode(int(r[2])) != named
        })
        .map(|r| int(r[0]) as u8)
        .collect();
    let flagged: BTreeSet<u8> = RuleSet::builtin().mapping.drift_rows().map(|r| r.table_type.code()).collect();
    check([17, 18].iter().all(|c| flagged.contains(c)), || format!("known drift rows not flagged: {flagged:?}"))?;
    check(flagged == drift, || format!("flagged {flagged:?}, disagreeing rows {drift:?}"))
}

// ---- 3: state machine ----

fn state_machine() -> Verdict {
    let text = RuleSources::builtin().state_transitions;
    let cells: BTreeSet<(u8, u8)> = tsv(text).iter().map(|r| (int(r[0]) as u8, int(r[1]) as u8)).collect();
    let edges: Vec<(u8, u8)> = tsv(text).iter().map(|r| (int(r[0]) as u8, int(r[3]) as u8)).collect();
    let table = RuleSet::builtin().transitions;
    let loaded: BTreeSet<(u8, u8)> = table.entries().map(|e| (e.state, e.event)).collect();
    check(loaded == cells, || format!("loaded {} cells, data has {}", loaded.len(), cells.len()))?;
    for sink in [0x13u8, 0x15] {
        let out = edges.iter().filter(|(s, _)| *s == sink).count();
        let inn = edges.iter().filter(|(_, n)| *n == sink).count();
        check(out == 0 && inn > 0, || format!("state {sink:#x}: out {out}, in {inn}"))?;
        check(table.out_degree(sink) == 0 && table.in_degree(sink) > 0, || format!("model degrees of {sink:#x}"))?;
    }
    let mut rng = TestRng::deterministic_rng(RngAlgorithm::ChaCha);
    let target = DispatchTarget::new(DomainCode::Sptm, DispatchTableId(0), 0);
    let mut monitor = Monitor::new(table);
    let (mut invalid, mut rejected) = (0u32, 0u32);
    for _ in 0..100_000 {
        let (state, ev) = ((rng.next_u32() & 0xff) as u8, (rng.next_u32() & 0xff) as u8);
        monitor.reset_state(state);
        let r = monitor.plan(ev, target);
        if ev > 14 || state > 22 {
            invalid += 1;
            if matches!(r, Err(DispatchError::InvalidEvent(_) | DispatchError::InvalidState(_))) {
                rejected += 1;
            }
        } else if !cells.contains(&(state, ev)) {
            check(matches!(r, Err(DispatchError::ForbiddenTransition { .. })), || format!("({state:#x},{ev:#x})"))?;
        }
    }
    check((MAX_EVENT, MAX_STATE) == (14, 22), || "bounds".into())?;
    check(invalid > 0 && invalid == rejected, || format!("{rejected}/{invalid} invalid pairs rejected"))
}

// ---- 4: dispatch permissions ----

/// State whose CALL row credits `d` as the caller, read from the data.
fn crediting_state(d: DomainCode) -> Option<u8> {
    tsv(RuleSources::builtin().state_transitions)
        .iter()
        .find(|r| int(r[1]) == 2 && r[4] == d.name() && r[5] != "-" && int(r[5]) & 1 == 1)
        .map(|r| int(r[0]) as u8)
}

fn dispatch_permissions() -> Verdict {
    let mut sys = System::new(Config { hibernation: true, ..Config::default() }, RuleSet::builtin(), Vec::new());
    sys.boot().map_err(|e| e.to_string())?;
    let regs: Vec<_> = sys.monitor().registrations().copied().collect();
    let tables: BTreeSet<(DomainCode, u8)> = regs.iter().map(|r| (r.handler.owner, r.handler.table.0)).collect();
    let want: BTreeSet<(DomainCode, u8)> = [0, 1, 2, 10, 5, 6, 7, 3, 4, 9]
        .into_iter()
        .map(|t| (DomainCode::Sptm, t))
        .chain([(DomainCode::Txm, 0), (DomainCode::Txm, 1), (DomainCode::Sk, 0), (DomainCode::Sk, 1)])
        .collect();
    check(tables == want, || format!("registered {tables:?}"))?;
    for reg in &regs {
        let target = DispatchTarget::new(reg.handler.owner, reg.handler.table, 0);
        for d in DomainCode::ALL {
            let bit = reg.permissions.bits() >> d.code() & 1 == 1;
            let direct = sys.monitor().authorize(Some(d), target).is_ok();
            check(direct == bit, || format!("{} on {}: authorized {direct}, bit {bit}", d.name(), reg.handler))?;
            // Through the gate, from the state that names `d` as caller.
            if let Some(state) = crediting_state(d) {
                let mut m = sys.monitor().clone();
                m.reset_state(state);
                let gate = match m.plan(2, target) {
                    Ok(_) => true,
                    Err(DispatchError::PermissionDenied { .. }) => false,
                    Err(e) => return Err(format!("{} on {}: {e}", d.name(), reg.handler)),
                };
                check(gate == bit, || format!("{} on {} via state {state:#x}", d.name(), reg.handler))?;
            }
        }
    }
    let nvme = regs.iter().find(|r| r.handler.table == DispatchTableId::NVME).ok_or("NVME not registered")?;
    let admitted: Vec<&str> =
        DomainCode::ALL.into_iter().filter(|d| nvme.permissions.contains(*d)).map(DomainCode::name).collect();
    let expected = DomainSet::from_bits(DomainCode::Txm.bit() | DomainCode::Sk.bit());
    check(nvme.permissions == expected, || {
        format!("NVME {:#x} admits {admitted:?}, not [TXM, SK]", nvme.permissions.bits())
    })
}

// ---- 5: GENTER event mapping ----

/// Transcribed from the gate's decompiled entry routine.
fn genter_oracle(domain: u64, table: u64, endpoint: u64) -> Option<u8> {
    if domain == 0 {
        if table != 0 {
            return Some(2);
        }
        return Some(match endpoint & 0xff {
            0x1b => 0xc,
            0x1c => 0xd,
            0x1e => 0xe,
            _ => 2,
        });
    }
    match domain {
        2 => Some(3),
        3 => Some(4),
        // The remaining branch logs a bad domain before falling through.
        _ => None,
    }
}

fn genter_mapping() -> Verdict {
    let mut n = 0;
    for domain in 0..=4u64 {
        for table in 0..=11u64 {
            for endpoint in 0..=0x21u64 {
                n += 1;
                let t = DispatchTarget::encode(domain, table, endpoint).map_err(|e| e.to_string())?;
                let got = event_for_genter(t).ok();
                let want = genter_oracle(domain, table, endpoint);
                check(got == want, || format!("({domain},{table},{endpoint:#x}): {got:?} vs {want:?}"))?;
            }
        }
    }
    check(n == 5 * 12 * 34, || format!("{n} targets"))
}

// ---- 6: conclave lifecycle ----

const CONCLAVE: &str = "com.apple.corespeechd.conclave";

fn conclave_fixture() -> Vec<ResourceInfo> {
    let r = |domain: &str, name: &str, kind| ResourceInfo { domain: domain.into(), name: name.into(), kind, id: None };
    vec![
        r(KERNEL_DOMAIN, "com.apple.service.ConclaveLauncherControl", ResourceKind::Service),
        r(KERNEL_DOMAIN, CONCLAVE, ResourceKind::ConclaveManager),
        r(CONCLAVE, "com.apple.corespeechd.SiriVoiceTriggerService", ResourceKind::Service),
        r(CONCLAVE, "com.apple.sensors.mic", ResourceKind::Sensor),
    ]
}

fn task(id: u32, name: &str, ents: &[&str], launchd: bool) -> TaskRecord {
    TaskRecord {
        task_id: id,
        name: name.into(),
        entitlements: ents.iter().map(|s| s.to_string()).collect(),
        is_launchd: launchd,
        is_kernel: false,
        conclave: None,
        space: IpcSpace::default(),
        thread: 100 + id,
    }
}

fn exclave_world() -> Result<System, String> {
    let mut s = System::new(Config::default(), RuleSet::builtin(), conclave_fixture());
    s.boot().map_err(|e| e.to_string())?;
    s.exclaves_boot().map_err(|e| e.to_string())?;
    Ok(s)
}

fn conclave_lifecycle() -> Verdict {
    use ConclaveRequest as R;
    use ConclaveState as S;
    let edges: BTreeSet<(&str, &str, &str)> = S::ALL
        .iter()
        .flat_map(|s| R::ALL.iter().map(move |r| (*s, *r)))
        .filter_map(|(s, r)| conclave_edge(s, r).map(|t| (s.name(), r.name(), t.name())))
        .collect();
    let want: BTreeSet<(&str, &str, &str)> = [
        (S::Attached, R::Launch, S::Running),
        (S::Running, R::Suspend, S::Suspended),
        (S::Suspended, R::Resume, S::Running),
        (S::Running, R::Stop, S::Stopped),
        (S::Suspended, R::Stop, S::Stopped),
    ]
    .iter()
    .map(|(a, r, b)| (a.name(), r.name(), b.name()))
    .collect();
    check(edges == want, || format!("edges {edges:?}"))?;

    // Every request from every reachable state, through the registry.
    let reach: [&[R]; 4] = [&[], &[R::Launch], &[R::Launch, R::Stop], &[R::Launch, R::Suspend]];
    for prefix in reach {
        for req in R::ALL {
            let mut s = exclave_world()?;
            s.add_task(task(1, "launchd", &[], true));
            s.add_task(task(2, "corespeechd", &[entitlement::CONCLAVE_HOST], false));
            s.conclave_attach(1, 2, CONCLAVE).map_err(|e| e.to_string())?;
            for p in prefix {
                s.conclave_request(2, *p).map_err(|e| e.to_string())?;
            }
            let m = s.registry().conclave_of_domain(CONCLAVE).ok_or("no manager")?;
            let from = s.registry().conclave(m).map_err(|e| e.to_string())?.state;
            let got = s.conclave_request(2, req).ok().map(|t| t.to);
            check(got == conclave_edge(from, req), || format!("{} on {}: {got:?}", req.name(), from.name()))?;
        }
    }

    // Caller {launchd, spawn-entitled, other} x target {host, spawn, none}.
    let callers: [(&str, &[&str], bool); 3] =
        [("launchd", &[], true), ("spawner", &[entitlement::CONCLAVE_SPAWN], false), ("other", &[], false)];
    let targets: [(&str, &[&str]); 3] =
        [("host", &[entitlement::CONCLAVE_HOST]), ("spawn", &[entitlement::CONCLAVE_SPAWN]), ("none", &[])];
    for (cname, cents, launchd) in callers {
        for (tname, tents) in targets {
            let mut s = exclave_world()?;
            s.add_task(task(1, cname, cents, launchd));
            s.add_task(task(2, tname, tents, false));
            let may_spawn = launchd || cents.contains(&entitlement::CONCLAVE_SPAWN);
            let may_host = !tents.is_empty();
            let want = match (may_spawn, may_host) {
                (false, _) => "CallerNotEntitled",
                (true, false) => "TargetNotEntitled",
                (true, true) => "ok",
            };
            let got = match s.conclave_attach(1, 2, CONCLAVE) {
                Ok(_) => "ok",
                Err(e) => e.status_name(),
            };
            check(got == want, || format!("{cname} attaching {tname}: {got}, want {want}"))?;
        }
    }
    Ok(())
}

// ---- 7: tightbeam ----

fn running_world() -> Result<System, String> {
    let mut s = exclave_world()?;
    s.add_task(task(1, "launchd", &[], true));
    s.add_task(task(2, "corespeechd", &[entitlement::CONCLAVE_HOST], false));
    s.conclave_attach(1, 2, CONCLAVE).map_err(|e| e.to_string())?;
    s.conclave_request(2, ConclaveRequest::Launch).map_err(|e| e.to_string())?;
    Ok(s)
}

fn tightbeam() -> Verdict {
    use MessageState as M;
    let allowed: Vec<(M, M)> = M::ALL
        .iter()
        .flat_map(|a| M::ALL.iter().map(move |b| (*a, *b)))
        .filter(|(a, b)| message_transition_allowed(*a, *b))
        .collect();
    let path =
        [(M::Uninitialized, M::Preparing), (M::Preparing, M::Ready), (M::Ready, M::Sent), (M::Sent, M::Received)];
    check(allowed == path, || format!("admitted {allowed:?}"))?;

    let mut runner = TestRunner::new_with_rng(
        PtConfig { cases: 1000, failure_persistence: None, ..PtConfig::default() },
        TestRng::deterministic_rng(RngAlgorithm::ChaCha),
    );
    runner
        .run(&(0u8..64, 0u8..8, 0u8..8, proptest::bool::ANY, proptest::num::u16::ANY), |(r, c, u, n, l)| {
            let tag = MessageTag::new(r, c, u, n, l).unwrap();
            let raw = tag.pack();
            // Hand layout: r 0..6, c 6..9, u 9..12, n 12, label 16..32.
            let hand = u64::from(r) | u64::from(c) << 6 | u64::from(u) << 9 | u64::from(n) << 12 | u64::from(l) << 16;
            proptest::prop_assert_eq!(raw, hand);
            proptest::prop_assert_eq!(MessageTag::unpack(raw), tag);
            Ok(())
        })
        .map_err(|e| e.to_string())?;

    let mut s = running_world()?;
    let svc = s
        .registry()
        .lookup_service(CONCLAVE, "com.apple.corespeechd.SiriVoiceTriggerService")
        .map_err(|e| e.to_string())?;
    let ep = s.tb_endpoint_create(2, EP_TYPE_XNU, svc, 0).map_err(|e| e.to_string())?;
    let conn = s.tb_connection_create(2, ep).map_err(|e| e.to_string())?;
    s.tb_activate(2, conn).map_err(|e| e.to_string())?;
    let mut rng = TestRng::deterministic_rng(RngAlgorithm::ChaCha);
    let mut first = true;
    let mut sent_calls = 0;
    for _ in 0..200 {
        let size = if first { 9 } else { u64::from(rng.next_u32() % 300) };
        let msg = match s.tb_message_construct(2, conn, size, 0, 0) {
            Ok(m) => m,
            // Oversize payloads are refused before anything reaches the wire.
            Err(e) if size > 256 => {
                check(s.trace().count("exclaves_endpoint_call") == sent_calls, || format!("size {size}: {e}"))?;
                first = false;
                continue;
            }
            Err(e) => return Err(format!("size {size}: {e}")),
        };
        if size > 0 {
            s.tb_message_encode(2, msg, &[0x5a]).map_err(|e| e.to_string())?;
        }
        s.tb_message_complete(2, msg).map_err(|e| e.to_string())?;
        let before = s.trace().count("exclaves_endpoint_call");
        let sent = s.tb_send_query(2, conn, msg, rng.next_u32() & 1 == 1);
        let calls = s.trace().count("exclaves_endpoint_call") - before;
        sent_calls += calls;
        if sent.is_ok() {
            check(calls == 1, || format!("size {size}: {calls} endpoint calls"))?;
            let rec = s.trace().records().iter().rev().find(|r| r.operation == "exclaves_endpoint_call").unwrap();
            let tag = int(rec.get("tag").ok_or("no tag")?);
            check(tag & 0x3f == size.div_ceil(8), || format!("size {size}: tag {tag:#x}"))?;
            if first {
                check(tag & 0x3f == 2, || format!("9-byte query tag {tag:#x}"))?;
            }
        } else {
            check(size > 256, || format!("size {size} refused: {:?}", sent.unwrap_err()))?;
        }
        first = false;
    }
    Ok(())
}

// ---- 8: golden scenarios ----

fn crate_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

fn golden_scenarios() -> Verdict {
    let mut seen = 0;
    for name in ["boot_registration", "xnu_retype_map", "conclave_tightbeam"] {
        let path = crate_dir().join("scenarios").join(format!("{name}.scn"));
        let golden = std::fs::read(crate_dir().join("tests/golden").join(format!("{name}.trace")))
            .map_err(|e| format!("{name}: {e}"))?;
        let mut traces = Vec::new();
        for _ in 0..2 {
            let (scenario, fixtures) = load_scenario(Path::new(&path), None).map_err(|e| e.to_string())?;
            let report = run(&scenario, &fixtures, Config::default());
            check(report.exit_code() == 0, || format!("{name}: {:?}", report.mismatches().collect::<Vec<_>>()))?;
            traces.push(report.trace.render().into_bytes());
        }
        check(traces[0] == traces[1], || format!("{name}: runs differ"))?;
        check(traces[0] == golden, || format!("{name}: trace differs from golden"))?;
        // Platform independence: ASCII with LF line ends only.
        check(golden.iter().all(|b| b.is_ascii() && *b != b'\r'), || format!("{name}: non-portable bytes"))?;
        seen += 1;
    }
    check(seen == 3, || "scenario count".into())
}

// ---- 9: ctl-trap guardrails ----

fn trap_guardrails() -> Verdict {
    let mut s = running_world()?;
    s.add_task(task(3, "untrusted", &[], false));
    let mic = || TrapRequest::Create { op: CreateOp::SensorCreate, name: "com.apple.sensors.mic".into() };
    for id in [192u64, 193, 255, 1 << 32, u64::MAX] {
        let r = s.ctl_trap(2, TrapRequest::EndpointCall { identifier: id, buffer: vec![0; IPC_BUFFER_SIZE] });
        check(r == Err(SimError::InvalidArgument("identifier")), || format!("id {id}: {r:?}"))?;
    }
    for req in [mic(), TrapRequest::Boot, TrapRequest::EndpointCall { identifier: 2, buffer: vec![0; IPC_BUFFER_SIZE] }]
    {
        let r = s.ctl_trap(3, req);
        check(r == Err(SimError::NotEntitled(3)), || format!("unentitled: {r:?}"))?;
    }
    let Ok(TrapResult::PortName(name)) = s.ctl_trap(2, mic()) else {
        return Err("sensor create returned no port name".into());
    };
    let res = s.registry().lookup(CONCLAVE, "com.apple.sensors.mic", None).map_err(|e| e.to_string())?;
    let port = s.registry().resource(res).map_err(|e| e.to_string())?.port.ok_or("no port")?;
    let rights = s.registry().port(port).ok_or("port missing")?.send_rights;
    let again = s.ctl_trap(2, mic());
    check(again == Ok(TrapResult::PortName(name)), || format!("repeat returned {again:?}"))?;
    let after = s.registry().port(port).ok_or("port missing")?.send_rights;
    check(rights == 1 && after == rights, || format!("send rights {rights} then {after}"))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 9] = [
        (1, "retype matrix fidelity", retype_matrix),
        (2, "mappable-mask consistency", mappable_masks),
        (3, "state-machine topology", state_machine),
        (4, "dispatch permission soundness", dispatch_permissions),
        (5, "GENTER event mapping", genter_mapping),
        (6, "conclave lifecycle", conclave_lifecycle),
        (7, "tightbeam lifecycle", tightbeam),
        (8, "golden scenario traces", golden_scenarios),
        (9, "ctl-trap guardrails", trap_guardrails),
    ];
    let mut unexpected = 0;
    for (n, name, f) in criteria {
        let known = KNOWN_FAILURES.iter().find(|(k, _)| *k == n).map(|(_, why)| *why);
        match (f(), known) {
            (Ok(()), None) => println!("PASS {n} {name}"),
            (Err(e), Some(why)) => println!("FAIL {n} {name}: {e} [known: {why}]"),
            (Err(e), None) => {
                unexpected += 1;
                println!("FAIL {n} {name}: {e}");
            }
            (Ok(()), Some(_)) => {
                unexpected += 1;
                println!("PASS {n} {name} [listed as a known failure; remove the entry]");
            }
        }
    }
    if unexpected == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
