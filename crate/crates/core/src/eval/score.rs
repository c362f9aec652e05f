use std::collections::BTreeSet;
use std::fmt;

use super::{Facts, Phase};
use crate::image::Span;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub phase: Phase,
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub precision: f64,
    pub recall: f64,
}

impl Metrics {
    pub fn from_counts(phase: Phase, tp: u64, fp: u64, fn_: u64) -> Self {
        let precision = if tp + fp == 0 { 1.0 } else { tp as f64 / (tp + fp) as f64 };
        let recall = if tp + fn_ == 0 { 1.0 } else { tp as f64 / (tp + fn_) as f64 };
        Metrics {
            phase,
            tp,
            fp,
            fn_,
            precision,
            recall,
        }
    }
}

impl fmt::Display for Metrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<8} tp={} fp={} fn={} precision={:.4} recall={:.4}",
            self.phase.name(),
            self.tp,
            self.fp,
            self.fn_,
            self.precision,
            self.recall
        )
    }
}

/// A scored item: up to three numbers, meaning depends on the phase.
pub type Item = (u64, u64, u64);

fn in_pad(truth: &Facts, span: Span) -> bool {
    truth.pad_containing(span.start).is_some_and(|p| p.covers(&span))
}

fn side_items(truth: &Facts, side: &Facts, result: &Facts, phase: Phase) -> BTreeSet<Item> {
    match phase {
        Phase::Inst => side
            .instructions
            .iter()
            .filter(|(&a, i)| !in_pad(truth, Span::with_size(a, i.size)))
            .map(|(&a, _)| (a, 0, 0))
            .collect(),
        Phase::Xref => side
            .xrefs
            .iter()
            .filter(|x| {
                let fp_source =
                    result.instructions.contains_key(&x.from) && !truth.instructions.contains_key(&x.from);
                !fp_source
            })
            .map(|x| (x.from, x.to, x.kind as u64))
            .collect(),
        Phase::Func => side
            .functions
            .keys()
            .filter(|&&a| truth.pad_containing(a).is_none())
            .map(|&a| (a, 0, 0))
            .collect(),
        Phase::Edge => side.edges.iter().map(|&(a, b)| (a, b, 0)).collect(),
        Phase::Cg => side
            .calls
            .iter()
            .filter_map(|&(site, callee)| Some((side.function_of(site)?, callee, 0)))
            .collect(),
        Phase::Tailcall => side
            .tail_calls
            .keys()
            .filter(|&&(site, target)| side.function_of(site) != Some(target))
            .map(|&(_, target)| (target, 0, 0))
            .collect(),
        Phase::Nonret => side.nonret.iter().map(|&a| (a, 0, 0)).collect(),
        Phase::Jtab => side.jump_tables.keys().map(|&a| (a, 0, 0)).collect(),
    }
}

/// Truth and result item sets for `phase` after exclusions.
pub fn scored_items(truth: &Facts, result: &Facts, phase: Phase) -> (BTreeSet<Item>, BTreeSet<Item>) {
    (
        side_items(truth, truth, result, phase),
        side_items(truth, result, result, phase),
    )
}

/// Whether the result table at `site` matches the truth exactly.
pub(super) fn table_matches(truth: &Facts, result: &Facts, site: u64) -> bool {
    match (truth.jump_tables.get(&site), result.jump_tables.get(&site)) {
        (Some(t), Some(r)) => t.target_set() == r.target_set(),
        _ => false,
    }
}

pub fn score(truth: &Facts, result: &Facts, phase: Phase) -> Metrics {
    let (t, r) = scored_items(truth, result, phase);
    let tp = if phase == Phase::Jtab {
        r.iter().filter(|i| table_matches(truth, result, i.0)).count()
    } else {
        t.intersection(&r).count()
    } as u64;
    Metrics::from_counts(phase, tp, r.len() as u64 - tp, t.len() as u64 - tp)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arithmetic() {
        let m = Metrics::from_counts(Phase::Inst, 9, 1, 1);
        assert!((m.precision - 0.9).abs() < 1e-12);
        assert!((m.recall - 0.9).abs() < 1e-12);
        let empty = Metrics::from_counts(Phase::Inst, 0, 0, 3);
        assert_eq!((empty.precision, empty.recall), (1.0, 0.0));
    }

    #[test]
    fn pad_instructions_are_excluded() {
        let truth = Facts::parse_truth("[inst] 1000 1\n[pad] 1001 4\n").unwrap();
        let result = Facts::parse("[inst] 1000 1\n[inst] 1001 2\n[inst] 1003 3\n").unwrap();
        let m = score(&truth, &result, Phase::Inst);
        // 1001 lies inside the pad; 1003 leaves it and counts.
        assert_eq!((m.tp, m.fp, m.fn_), (1, 1, 0));
    }

    #[test]
    fn xrefs_from_false_instructions_are_excluded() {
        let truth = Facts::parse_truth("[inst] 1000 5\n[xref] c2d 1000 2000 8\n").unwrap();
        let result = Facts::parse("[inst] 1000 5\n[inst] 1008 5\n[xref] c2d 1000 2000 8\n[xref] c2d 1008 2000 8\n").unwrap();
        let m = score(&truth, &result, Phase::Xref);
        assert_eq!((m.tp, m.fp, m.fn_), (1, 0, 0));
    }

    #[test]
    fn jump_tables_need_full_match() {
        let truth = Facts::parse_truth("[jtab] 10 100 4 20 30\n[jtab] 40 200 4 50\n").unwrap();
        let result = Facts::parse("[jtab] 10 100 4 20\n[unres] 40 no_bound\n").unwrap();
        let m = score(&truth, &result, Phase::Jtab);
        assert_eq!((m.tp, m.fp, m.fn_), (0, 1, 2));
    }

    #[test]
    fn recursion_is_not_a_tail_call() {
        let truth = Facts::parse_truth("[func] 10\n[func] 50\n[tcall] 20 50\n").unwrap();
        let result = Facts::parse("[func] 10\n[func] 50\n[tcall] 20 50\n[tcall] 30 10\n[tcall] 60 50\n").unwrap();
        let m = score(&truth, &result, Phase::Tailcall);
        assert_eq!((m.tp, m.fp, m.fn_), (1, 0, 0));
    }
}
