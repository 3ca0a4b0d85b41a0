// SPDX-License-Identifier: Apache-2.0
//! Deterministic trace stream. Rendering depends only on record contents.

use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use crate::core_model::DomainCode;
use crate::exclave_resources::TaskId;

/// Who issued a traced operation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Actor {
    Domain(DomainCode),
    Task(TaskId),
}

impl fmt::Display for Actor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Domain(d) => f.write_str(d.name()),
            Self::Task(t) => write!(f, "task:{t}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceRecord {
    pub seq: u64,
    pub actor: Actor,
    pub operation: String,
    pub detail: Vec<(String, String)>,
    pub outcome: String,
}

impl TraceRecord {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.detail.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }
}

impl fmt::Display for TraceRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:04} {} {}", self.seq, self.actor, self.operation)?;
        for (k, v) in &self.detail {
            write!(f, " {k}={v}")?;
        }
        write!(f, " -> {}", self.outcome)
    }
}

/// Builder for one record's key=value fields.
#[derive(Debug, Default)]
pub struct Detail(Vec<(String, String)>);

impl Detail {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn kv(mut self, key: &str, value: impl fmt::Display) -> Self {
        self.0.push((key.to_string(), value.to_string()));
        self
    }

    pub fn hex(self, key: &str, value: u64) -> Self {
        self.kv(key, format_args!("{value:#x}"))
    }
}

/// Records in issue order; `seq` is strictly increasing.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Trace {
    records: Vec<TraceRecord>,
}

impl Trace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, actor: Actor, operation: &str, detail: Detail, outcome: &str) -> u64 {
        let seq = self.records.len() as u64;
        self.records.push(TraceRecord {
            seq,
            actor,
            operation: operation.to_string(),
            detail: detail.0,
            outcome: outcome.to_string(),
        });
        seq
    }

    pub fn records(&self) -> &[TraceRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn count(&self, operation: &str) -> usize {
        self.records.iter().filter(|r| r.operation == operation).count()
    }

    /// One line per record, newline terminated.
    pub fn render(&self) -> String {
        use fmt::Write;
        let mut out = String::new();
        for r in &self.records {
            let _ = writeln!(out, "{r}");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_format() {
        let mut t = Trace::new();
        t.push(Actor::Domain(DomainCode::Xnu), "genter", Detail::new().kv("table", 0).hex("ep", 0x1b), "ok");
        t.push(Actor::Task(7), "exclaves_ctl_trap", Detail::new(), "NotEntitled");
        assert_eq!(t.render(), "0000 XNU genter table=0 ep=0x1b -> ok\n0001 task:7 exclaves_ctl_trap -> NotEntitled\n");
        assert_eq!(t.records()[0].get("ep"), Some("0x1b"));
        assert_eq!(t.count("genter"), 1);
    }
}
