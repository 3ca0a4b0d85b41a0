// SPDX-License-Identifier: Apache-2.0
//! Tab-separated listings of the loaded rule tables, for diffing against
//! the data files they were read from.

use std::fmt::Write;

use sptm_model::frame_table::FrameType;
use sptm_model::page_mapper::xnu_mappable_set;
use sptm_model::rules::RuleSet;
use thiserror::Error;

/// Every name `dump` accepts, in listing order.
pub const TABLES: [&str; 9] = [
    "retype-matrix",
    "xnu-mappable",
    "table-map",
    "state-machine",
    "iommu",
    "sprr",
    "txm-selectors",
    "transports",
    "sk-retypes",
];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown table {0:?}; known tables: {known}", known = TABLES.join(", "))]
pub struct UnknownTable(pub String);

fn or_dash(s: String) -> String {
    if s.is_empty() {
        "-".into()
    } else {
        s
    }
}

/// One line per record, newline terminated.
pub fn dump(rules: &RuleSet, which: &str) -> Result<String, UnknownTable> {
    let mut out = String::new();
    let mut line = |args: std::fmt::Arguments<'_>| {
        let _ = writeln!(out, "{args}");
    };
    match which {
        "retype-matrix" => {
            for t in FrameType::all() {
                let owner = rules.frames.caller_rule(t).map_or("-", |r| r.allowed_domain.name());
                let allowed = or_dash(rules.frames.allowed_retypes(t).to_string());
                line(format_args!("{}\t{t}\t{owner}\t{allowed}", t.code()));
            }
        }
        "xnu-mappable" => {
            for t in xnu_mappable_set().iter() {
                line(format_args!("{}\t{t}", t.code()));
            }
        }
        "table-map" => {
            for r in rules.mapping.rules() {
                let t = r.table_type;
                let allowed = or_dash(r.allowed_frame_types.to_string());
                line(format_args!("{}\t{t}\t{:#x}\t{}\t{allowed}", t.code(), r.mask, r.status.name()));
            }
        }
        "state-machine" => {
            for e in rules.transitions.entries() {
                let domain = e.domain.map_or("-", |d| d.name());
                line(format_args!(
                    "{:#x}\t{:#x}\t{}\t{:#x}\t{domain}\t{:#x}",
                    e.state, e.event, e.action, e.next_state, e.flag
                ));
            }
        }
        "iommu" => {
            for r in &rules.iommus {
                let secondary = r.secondary.map_or("-".into(), |p| p.to_string());
                let flag = if r.unlisted { "unlisted" } else { "-" };
                line(format_args!("{}\t{}\t{}\t{secondary}\t{flag}", r.iommu_id, r.table.0, r.permissions));
            }
        }
        "sprr" => {
            for r in rules.sprr.populated() {
                line(format_args!("{}\t{}\t{}\t{}\t{}", r.index, r.el0, r.el2, r.gl2, r.usage));
            }
        }
        "txm-selectors" => {
            for s in rules.txm_selectors.iter() {
                line(format_args!("{}\t{}\t{}\t{}", s.selector, s.name, s.num_input_args, s.num_output_args));
            }
        }
        "transports" => {
            for r in rules.transports.rules() {
                let options = r.options.map_or("any".into(), |o| o.to_string());
                let role = r.role.map_or("-", |r| r.name());
                line(format_args!("{}\t{options}\t{}\t{role}\t{}", r.ep_type, r.kind.name(), r.mode.name()));
            }
        }
        "sk-retypes" => {
            for c in rules.sk_retypes.iter() {
                let current = c.current.map_or("-".into(), |t| t.to_string());
                line(format_args!("{}\t{}\t{current}\t{}", c.slot, c.function, c.new_type));
            }
        }
        other => return Err(UnknownTable(other.into())),
    }
    Ok(out)
}
