use std::fmt;

use super::score::{scored_items, table_matches, Item};
use super::{Facts, Phase};
use crate::decode::{decode_at, FlowKind};
use crate::image::BinaryImage;
use crate::symbolize::XrefKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ErrorKind {
    FalsePositive,
    FalseNegative,
}

impl ErrorKind {
    pub fn name(self) -> &'static str {
        match self {
            ErrorKind::FalsePositive => "FP",
            ErrorKind::FalseNegative => "FN",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct ErrorAttribution {
    pub phase: Phase,
    pub kind: ErrorKind,
    pub item: String,
    pub cause: &'static str,
}

impl fmt::Display for ErrorAttribution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {} cause={}", self.phase, self.kind.name(), self.item, self.cause)
    }
}

/// The cause vocabulary used for each phase and error kind.
pub fn causes_for(phase: Phase, kind: ErrorKind) -> &'static [&'static str] {
    use ErrorKind::*;
    match (phase, kind) {
        (Phase::Inst, FalsePositive) => &["Pad", "Data", "Func", "Scan", "Non-Ret", "Jump-Tbl", "Other"],
        (Phase::Inst, FalseNegative) => &["FP-Overlap", "Non-Ret", "Jump-Tbl", "Other"],
        (Phase::Xref, FalsePositive) => &["Align", "Type", "Extended-data", "Other"],
        (Phase::Xref, FalseNegative) => &["Align", "Type", "Extended-data", "Function", "Address-table", "Other"],
        (Phase::Func, FalsePositive) => &["Mismatch", "J-Tab", "Scan", "T-Call", "Mis-disa", "Other"],
        (Phase::Func, FalseNegative) => &["J-Tab", "T-Call", "Non-Ret", "FP-Overlap", "Other"],
        (Phase::Edge, FalsePositive) => &["Non-Ret", "Func", "T-Call", "Inst", "No-split", "Jump-Tab", "Other"],
        (Phase::Edge, FalseNegative) => &["Non-Ret", "Func", "T-Call", "Inst", "Jump-Tab", "Other"],
        (Phase::Cg, _) => &["Func", "T-Call", "Inst", "Other"],
        (Phase::Tailcall, FalsePositive) => &["Distance", "Span", "Known-Entry", "Teardown", "Stack-Height", "Other"],
        (Phase::Tailcall, FalseNegative) => &["Cond-Jump", "Unknown-Target", "Other"],
        (Phase::Nonret, FalsePositive) => &["Other"],
        (Phase::Nonret, FalseNegative) => &["Lib", "Cond-NonRet", "Exit-Inst", "Fake-Ret", "Propa", "Other"],
        (Phase::Jtab, FalsePositive) => &["Wrong-Targets", "Not-Table"],
        (Phase::Jtab, FalseNegative) => &[
            "No-Pattern",
            "No-Bound",
            "Bound-Exceeded",
            "Slice-Depth",
            "Outside-Code",
            "Wrong-Targets",
            "Other",
        ],
    }
}

fn truth_covers(truth: &Facts, addr: u64) -> bool {
    truth.covering_instruction(addr).is_some()
}

/// Result instruction ending exactly at `addr`.
fn result_prev(result: &Facts, addr: u64) -> Option<u64> {
    result
        .instructions
        .range(addr.saturating_sub(16)..addr)
        .rev()
        .find(|(&a, i)| a + i.size == addr)
        .map(|(&a, _)| a)
}

/// Truth instruction (skipping padding) ending at `addr`.
fn truth_prev(truth: &Facts, addr: u64) -> Option<u64> {
    let mut at = addr;
    for _ in 0..8 {
        if let Some((&a, _)) = truth
            .instructions
            .range(at.saturating_sub(16)..at)
            .rev()
            .find(|(&a, i)| a + i.size == at)
        {
            return Some(a);
        }
        let (&p, _) = truth.padding.range(..at).next_back().filter(|(&p, &s)| p + s == at)?;
        at = p;
    }
    None
}

fn truth_nonret_call(truth: &Facts, site: u64) -> Option<u64> {
    truth
        .calls
        .range((site, 0)..=(site, u64::MAX))
        .map(|&(_, c)| c)
        .find(|c| truth.nonret.contains(c))
}

fn wrong_table_target(truth: &Facts, result: &Facts, addr: u64) -> bool {
    result.jump_tables.iter().any(|(site, t)| {
        t.targets.contains(&addr)
            && !truth
                .jump_tables
                .get(site)
                .is_some_and(|tt| tt.targets.contains(&addr))
    })
}

/// Walks backwards over non-truth result instructions to find what led
/// the descent into the false instruction at `addr`.
fn inst_fp_origin(truth: &Facts, result: &Facts, addr: u64) -> Option<&'static str> {
    let mut at = addr;
    for _ in 0..64 {
        if wrong_table_target(truth, result, at) {
            return Some("Jump-Tbl");
        }
        let prev = result_prev(result, at)?;
        if truth.instructions.contains_key(&prev) {
            return truth_nonret_call(truth, prev).map(|_| "Non-Ret");
        }
        at = prev;
    }
    None
}

fn inst_fp(truth: &Facts, result: &Facts, addr: u64) -> &'static str {
    if truth.pad_containing(addr).is_some() {
        return "Pad";
    }
    if !truth_covers(truth, addr) {
        return "Data";
    }
    match result.instructions.get(&addr).and_then(|i| i.provenance.as_deref()) {
        Some("prologue_match") => return "Func",
        Some("gap_scan") => return "Scan",
        _ => {}
    }
    inst_fp_origin(truth, result, addr).unwrap_or("Other")
}

fn inst_fn(truth: &Facts, result: &Facts, addr: u64) -> &'static str {
    if result.covering_instruction(addr).is_some() {
        return "FP-Overlap";
    }
    if truth.jump_tables.iter().any(|(site, t)| t.targets.contains(&addr) && !table_matches(truth, result, *site)) {
        return "Jump-Tbl";
    }
    let cut = truth_prev(truth, addr).is_some_and(|p| {
        truth
            .calls
            .range((p, 0)..=(p, u64::MAX))
            .any(|&(_, c)| result.nonret.contains(&c) && !truth.nonret.contains(&c))
    });
    if cut {
        "Non-Ret"
    } else {
        "Other"
    }
}

fn pointer_size(truth: &Facts, image: Option<&BinaryImage>) -> u64 {
    match image {
        Some(img) => img.mode.pointer_size(),
        None => match truth.header_value("mode") {
            Some("x86") => 4,
            _ => 8,
        },
    }
}

fn xref_fp(truth: &Facts, result: &Facts, item: Item, image: Option<&BinaryImage>) -> &'static str {
    let (from, to, _) = item;
    let from_data = !result.instructions.contains_key(&from);
    if from_data && from % pointer_size(truth, image) != 0 {
        return "Align";
    }
    if let Some(img) = image {
        if !img.is_mapped(to) {
            return "Extended-data";
        }
    }
    if image.is_some_and(|img| img.is_data(from)) && truth_covers(truth, to) && !truth.instructions.contains_key(&to) {
        return "Type";
    }
    "Other"
}

fn xref_fn(truth: &Facts, result: &Facts, item: Item, image: Option<&BinaryImage>) -> &'static str {
    let (from, to, _) = item;
    if let Some(reason) = result.rejections.get(&(from, to)) {
        return match reason.as_str() {
            "string_overlap" | "float_typed" => "Type",
            "not_entry" => "Function",
            "table_too_small" => "Address-table",
            "out_of_region" => "Extended-data",
            _ => "Other",
        };
    }
    let from_data = !truth.instructions.contains_key(&from);
    if from_data && from % pointer_size(truth, image) != 0 {
        return "Align";
    }
    "Other"
}

fn func_fp(truth: &Facts, result: &Facts, entry: u64) -> &'static str {
    match result.functions.get(&entry).cloned().flatten().as_deref() {
        Some("prologue") => return "Mismatch",
        Some("scan_begin") => return "Scan",
        Some("tail_call_target") => return "T-Call",
        _ => {}
    }
    if truth.jump_tables.values().any(|t| t.targets.contains(&entry)) {
        return "J-Tab";
    }
    if !truth.instructions.contains_key(&entry) {
        return "Mis-disa";
    }
    "Other"
}

fn func_fn(truth: &Facts, result: &Facts, entry: u64) -> &'static str {
    let table_site = truth
        .jump_tables
        .iter()
        .find(|(_, t)| t.targets.contains(&entry))
        .map(|(s, _)| *s);
    if let Some(site) = table_site {
        if !table_matches(truth, result, site) {
            return "J-Tab";
        }
    }
    if truth.tail_calls.keys().any(|&(_, t)| t == entry) {
        return "T-Call";
    }
    if let Some(p) = truth_prev(truth, entry) {
        if truth_nonret_call(truth, p).is_some_and(|c| !result.nonret.contains(&c)) {
            return "Non-Ret";
        }
    }
    if result.covering_instruction(entry).is_some_and(|a| a != entry) {
        return "FP-Overlap";
    }
    "Other"
}

fn block_starts(f: &Facts) -> impl Fn(u64) -> bool + '_ {
    move |a| f.functions.contains_key(&a) || f.edges.iter().any(|&(x, y)| x == a || y == a)
}

fn edge_cause(
    truth: &Facts,
    result: &Facts,
    (from, to, _): Item,
    kind: ErrorKind,
) -> &'static str {
    let other = match kind {
        ErrorKind::FalsePositive => truth,
        ErrorKind::FalseNegative => result,
    };
    let this = match kind {
        ErrorKind::FalsePositive => result,
        ErrorKind::FalseNegative => truth,
    };
    if !other.instructions.contains_key(&from) || !other.instructions.contains_key(&to) {
        return "Inst";
    }
    let nonret_cut = |f: &Facts, g: &Facts| {
        truth_prev(f, to).is_some_and(|p| {
            f.calls
                .range((p, 0)..=(p, u64::MAX))
                .any(|&(_, c)| f.nonret.contains(&c) != g.nonret.contains(&c))
        })
    };
    if nonret_cut(this, other) {
        return "Non-Ret";
    }
    let tails = |f: &Facts| f.tail_calls.keys().any(|&(_, t)| t == to);
    if tails(this) != tails(other) {
        return "T-Call";
    }
    let table = |f: &Facts| f.jump_tables.values().any(|t| t.targets.contains(&to));
    if table(this) != table(other) {
        return "Jump-Tab";
    }
    if other.functions.contains_key(&to) != this.functions.contains_key(&to) {
        return "Func";
    }
    if kind == ErrorKind::FalsePositive && !block_starts(truth)(from) {
        return "No-split";
    }
    "Other"
}

fn cg_cause(truth: &Facts, result: &Facts, (caller, callee, _): Item, kind: ErrorKind) -> &'static str {
    let other = match kind {
        ErrorKind::FalsePositive => truth,
        ErrorKind::FalseNegative => result,
    };
    let this = match kind {
        ErrorKind::FalsePositive => result,
        ErrorKind::FalseNegative => truth,
    };
    if !other.functions.contains_key(&caller) || !other.functions.contains_key(&callee) {
        return "Func";
    }
    let via_tail = this
        .tail_calls
        .keys()
        .any(|&(s, t)| t == callee && this.function_of(s) == Some(caller));
    if via_tail {
        return "T-Call";
    }
    let sites_known = this
        .calls
        .iter()
        .filter(|&&(s, c)| c == callee && this.function_of(s) == Some(caller))
        .all(|&(s, _)| other.instructions.contains_key(&s));
    if !sites_known {
        return "Inst";
    }
    "Other"
}

fn tailcall_fp(result: &Facts, target: u64) -> &'static str {
    let rule = result
        .tail_calls
        .iter()
        .find(|(&(_, t), _)| t == target)
        .and_then(|(_, r)| r.as_deref());
    match rule {
        Some("distance") => "Distance",
        Some("span") => "Span",
        Some("known_entry") => "Known-Entry",
        Some("teardown") => "Teardown",
        Some("angr_conditions") => "Stack-Height",
        _ => "Other",
    }
}

fn tailcall_fn(truth: &Facts, result: &Facts, target: u64, image: Option<&BinaryImage>) -> &'static str {
    let sites: Vec<u64> = truth
        .tail_calls
        .keys()
        .filter(|&&(_, t)| t == target)
        .map(|&(s, _)| s)
        .collect();
    if let Some(img) = image {
        let conditional = sites
            .iter()
            .any(|&s| decode_at(img, s, img.mode).is_ok_and(|i| i.flow == FlowKind::CondJump));
        if conditional {
            return "Cond-Jump";
        }
    }
    if !result.functions.contains_key(&target) {
        return "Unknown-Target";
    }
    "Other"
}

fn nonret_fn(truth: &Facts, result: &Facts, entry: u64, image: Option<&BinaryImage>) -> &'static str {
    let Some(img) = image else {
        return "Other";
    };
    if img.symbols_at(entry).next().is_some() && !truth.instructions.contains_key(&entry) {
        return "Lib";
    }
    let end = truth
        .functions
        .range(entry + 1..)
        .next()
        .map(|(&a, _)| a)
        .unwrap_or(u64::MAX);
    let body: Vec<_> = truth
        .instructions
        .range(entry..end)
        .filter_map(|(&a, _)| decode_at(img, a, img.mode).ok())
        .collect();
    if body.is_empty() {
        return "Lib";
    }
    if body.iter().any(|i| i.flow == FlowKind::Ret) {
        return "Fake-Ret";
    }
    if body.iter().any(|i| i.flow == FlowKind::Halt) {
        return "Exit-Inst";
    }
    let calls_missed = body.iter().any(|i| {
        truth
            .calls
            .range((i.vaddr, 0)..=(i.vaddr, u64::MAX))
            .any(|&(_, c)| truth.nonret.contains(&c) && !result.nonret.contains(&c))
    });
    if calls_missed {
        return "Propa";
    }
    if body.iter().any(|i| i.flow == FlowKind::CondJump) {
        return "Cond-NonRet";
    }
    "Other"
}

fn jtab_fn(truth: &Facts, result: &Facts, site: u64) -> &'static str {
    if result.jump_tables.contains_key(&site) && !table_matches(truth, result, site) {
        return "Wrong-Targets";
    }
    match result.unresolved.get(&site).map(String::as_str) {
        Some("no_pattern") => "No-Pattern",
        Some("no_bound") => "No-Bound",
        Some("bound_exceeds_threshold") => "Bound-Exceeded",
        Some("slice_depth_exhausted") => "Slice-Depth",
        Some("target_outside_code") => "Outside-Code",
        _ => "Other",
    }
}

fn describe(phase: Phase, (a, b, c): Item) -> String {
    match phase {
        Phase::Xref => {
            let kind = [XrefKind::C2c, XrefKind::C2d, XrefKind::D2c, XrefKind::D2d]
                .into_iter()
                .find(|k| *k as u64 == c)
                .map_or("?", |k| k.name());
            format!("{kind} {a:x} {b:x}")
        }
        Phase::Edge | Phase::Cg => format!("{a:x} {b:x}"),
        _ => format!("{a:x}"),
    }
}

/// Labels every false positive and false negative of `phase` with one
/// cause. The image, when given, enables byte-level checks.
pub fn attribute_errors(
    truth: &Facts,
    result: &Facts,
    phase: Phase,
    image: Option<&BinaryImage>,
) -> Vec<ErrorAttribution> {
    let (t, r) = scored_items(truth, result, phase);
    let (fps, fns): (Vec<Item>, Vec<Item>) = if phase == Phase::Jtab {
        let good = |i: &&Item| table_matches(truth, result, i.0);
        (
            r.iter().filter(|i| !good(i)).copied().collect(),
            t.iter().filter(|i| !(r.contains(i) && good(i))).copied().collect(),
        )
    } else {
        (r.difference(&t).copied().collect(), t.difference(&r).copied().collect())
    };
    let mut out = Vec::with_capacity(fps.len() + fns.len());
    for item in fps {
        let cause = match phase {
            Phase::Inst => inst_fp(truth, result, item.0),
            Phase::Xref => xref_fp(truth, result, item, image),
            Phase::Func => func_fp(truth, result, item.0),
            Phase::Edge => edge_cause(truth, result, item, ErrorKind::FalsePositive),
            Phase::Cg => cg_cause(truth, result, item, ErrorKind::FalsePositive),
            Phase::Tailcall => tailcall_fp(result, item.0),
            Phase::Nonret => "Other",
            Phase::Jtab => {
                if truth.jump_tables.contains_key(&item.0) {
                    "Wrong-Targets"
                } else {
                    "Not-Table"
                }
            }
        };
        out.push(ErrorAttribution {
            phase,
            kind: ErrorKind::FalsePositive,
            item: describe(phase, item),
            cause,
        });
    }
    for item in fns {
        let cause = match phase {
            Phase::Inst => inst_fn(truth, result, item.0),
            Phase::Xref => xref_fn(truth, result, item, image),
            Phase::Func => func_fn(truth, result, item.0),
            Phase::Edge => edge_cause(truth, result, item, ErrorKind::FalseNegative),
            Phase::Cg => cg_cause(truth, result, item, ErrorKind::FalseNegative),
            Phase::Tailcall => tailcall_fn(truth, result, item.0, image),
            Phase::Nonret => nonret_fn(truth, result, item.0, image),
            Phase::Jtab => jtab_fn(truth, result, item.0),
        };
        out.push(ErrorAttribution {
            phase,
            kind: ErrorKind::FalseNegative,
            item: describe(phase, item),
            cause,
        });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pad_and_data_causes() {
        let truth = Facts::parse_truth("[inst] 1000 1\n[pad] 1001 3\n[inst] 1008 1\n").unwrap();
        let result = Facts::parse("[inst] 1000 1\n[inst] 1001 5\n[inst] 1006 2\n[inst] 1008 1\n").unwrap();
        let a = attribute_errors(&truth, &result, Phase::Inst, None);
        let causes: Vec<_> = a.iter().map(|e| (e.item.as_str(), e.cause)).collect();
        assert_eq!(causes, vec![("1001", "Pad"), ("1006", "Data")]);
    }

    #[test]
    fn non_ret_cascade_is_traced_through_padding() {
        // call exit; pad; misaligned instruction inside g's first one.
        let truth = Facts::parse_truth(
            "[inst] 1000 5\n[pad] 1005 3\n[inst] 1008 5\n[call] 1000 2000\n[noret] 2000\n",
        )
        .unwrap();
        let result = Facts::parse("[inst] 1000 5\n[inst] 1005 4\n[inst] 1009 3\n").unwrap();
        let a = attribute_errors(&truth, &result, Phase::Inst, None);
        let causes: Vec<_> = a.iter().map(|e| (e.kind, e.cause)).collect();
        assert_eq!(
            causes,
            vec![
                (ErrorKind::FalsePositive, "Pad"),
                (ErrorKind::FalsePositive, "Non-Ret"),
                (ErrorKind::FalseNegative, "FP-Overlap"),
            ]
        );
    }

    #[test]
    fn unresolved_table_target_function_is_jtab() {
        let truth = Facts::parse_truth("[func] 10\n[func] 40\n[jtab] 20 100 4 40\n").unwrap();
        let result = Facts::parse("[func] 10\n[unres] 20 no_bound\n").unwrap();
        let a = attribute_errors(&truth, &result, Phase::Func, None);
        assert_eq!(a.len(), 1);
        assert_eq!(a[0].cause, "J-Tab");
        let j = attribute_errors(&truth, &result, Phase::Jtab, None);
        assert_eq!(j[0].cause, "No-Bound");
    }

    #[test]
    fn rejected_by_string_preference_is_type() {
        let truth = Facts::parse_truth("[xref] d2d 2004 2100 4\n").unwrap();
        let result = Facts::parse("[reject] 2004 2100 string_overlap\n").unwrap();
        let a = attribute_errors(&truth, &result, Phase::Xref, None);
        assert_eq!(a[0].cause, "Type");
    }
}
