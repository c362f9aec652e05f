//! Non-returning function detection.

use std::collections::{BTreeMap, BTreeSet};

use super::{Functions, TailCall};
use crate::config::{NonRetMode, StrategyConfig};
use crate::decode::{decode_at, FlowKind};
use crate::image::BinaryImage;
use crate::recursive::DisasmResult;

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct NonRetSet {
    pub members: BTreeSet<u64>,
    pub seeds: BTreeSet<String>,
}

impl NonRetSet {
    pub fn contains(&self, entry: u64) -> bool {
        self.members.contains(&entry)
    }
}

/// Addresses of symbols whose names are in `seeds`.
pub fn seed_addresses(image: &BinaryImage, seeds: &[String]) -> BTreeSet<u64> {
    image
        .symbols
        .iter()
        .filter(|s| seeds.iter().any(|n| n == &s.name))
        .map(|s| s.vaddr)
        .collect()
}

/// Everything the propagation needs about the program.
pub struct Program<'a> {
    pub result: &'a DisasmResult,
    pub image: &'a BinaryImage,
    pub functions: &'a Functions,
    pub tail_calls: &'a [TailCall],
    pub xref_targets: &'a BTreeSet<u64>,
}

/// How a function's reachable exits relate to its callees.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
struct Exits {
    /// A `ret` or an unresolved indirect jump is reachable.
    returns: bool,
    /// Terminal blocks that end at a call (or tail jump) to these entries.
    terminal_calls: BTreeSet<u64>,
    /// Other terminal blocks (halts, jumps to unknown code).
    other_terminal: bool,
    /// Functions reached by a tail jump or fallthrough into their entry.
    tails: BTreeSet<u64>,
}

impl Program<'_> {
    fn callees(&self, entry: u64) -> BTreeSet<u64> {
        let mut out = BTreeSet::new();
        let Some(blocks) = self.functions.blocks.get(&entry) else {
            return out;
        };
        for &b in blocks {
            let Some(block) = self.result.block_at(b) else { continue };
            if let Some(last) = self.result.instructions.get(&block.last) {
                if last.flow == FlowKind::CallDirect {
                    out.extend(last.branch_target);
                }
            }
            for s in &block.successors {
                if *s != entry && self.functions.blocks.contains_key(s) {
                    out.insert(*s);
                }
            }
        }
        for tc in self.tail_calls {
            if self.functions.owner_of(self.result, tc.site) == Some(entry) {
                out.insert(tc.target);
            }
        }
        out
    }

    /// Walks the function, cutting fallthrough after calls into `nonret`.
    fn exits(&self, entry: u64, nonret: &BTreeSet<u64>) -> Exits {
        let mut ex = Exits::default();
        let Some(blocks) = self.functions.blocks.get(&entry) else {
            ex.returns = true;
            return ex;
        };
        let tail_sites: BTreeMap<u64, u64> = self.tail_calls.iter().map(|t| (t.site, t.target)).collect();
        let Some(start) = self.result.block_containing(entry).map(|b| b.start) else {
            ex.returns = true;
            return ex;
        };
        let mut seen = BTreeSet::from([start]);
        let mut stack = vec![start];
        while let Some(b) = stack.pop() {
            let Some(block) = self.result.block_at(b) else { continue };
            let Some(last) = self.result.instructions.get(&block.last) else { continue };
            let mut succs: Vec<u64> = block.successors.clone();
            match last.flow {
                FlowKind::Ret => ex.returns = true,
                FlowKind::JumpIndirect if succs.is_empty() => ex.returns = true,
                FlowKind::CallDirect => {
                    if let Some(t) = last.branch_target {
                        if nonret.contains(&t) {
                            succs.clear();
                            ex.terminal_calls.insert(t);
                        }
                    }
                }
                FlowKind::Halt => ex.other_terminal = true,
                _ => {}
            }
            if let Some(&t) = tail_sites.get(&last.vaddr) {
                succs.retain(|&s| s != t);
                ex.tails.insert(t);
            }
            let mut any = false;
            for s in succs {
                if s != entry && self.functions.blocks.contains_key(&s) {
                    ex.tails.insert(s);
                    any = true;
                    continue;
                }
                if blocks.contains(&s) {
                    any = true;
                    if seen.insert(s) {
                        stack.push(s);
                    }
                }
            }
            let terminal = !any && !matches!(last.flow, FlowKind::Ret | FlowKind::CallDirect | FlowKind::Halt);
            if terminal && !(last.flow == FlowKind::JumpIndirect) {
                ex.other_terminal = true;
            }
        }
        ex
    }

    /// A function returns unless every exit is cut off.
    fn returns(&self, entry: u64, nonret: &BTreeSet<u64>) -> bool {
        let ex = self.exits(entry, nonret);
        ex.returns || ex.tails.iter().any(|t| !nonret.contains(t))
    }

    fn all_paths_nonret(&self, entry: u64, nonret: &BTreeSet<u64>) -> bool {
        let ex = self.exits(entry, nonret);
        let tails_nonret = ex.tails.iter().all(|t| nonret.contains(t));
        !ex.returns
            && !ex.other_terminal
            && tails_nonret
            && (!ex.terminal_calls.is_empty() || !ex.tails.is_empty())
    }

    fn unsafe_fallthrough(&self, site_end: u64) -> bool {
        if !self.image.is_executable(site_end) || self.xref_targets.contains(&site_end) {
            return true;
        }
        if self.functions.blocks.contains_key(&site_end) {
            return true;
        }
        decode_at(self.image, site_end, self.image.mode).is_err()
    }
}

fn worklist(p: &Program<'_>, mut members: BTreeSet<u64>, test: impl Fn(u64, &BTreeSet<u64>) -> bool) -> BTreeSet<u64> {
    let entries: Vec<u64> = p.functions.blocks.keys().copied().collect();
    let mut callers: BTreeMap<u64, BTreeSet<u64>> = BTreeMap::new();
    for &e in &entries {
        for c in p.callees(e) {
            callers.entry(c).or_default().insert(e);
        }
    }
    let mut work: BTreeSet<u64> = entries.iter().copied().collect();
    while let Some(f) = work.pop_first() {
        if members.contains(&f) || !test(f, &members) {
            continue;
        }
        members.insert(f);
        if let Some(cs) = callers.get(&f) {
            work.extend(cs.iter().copied());
        }
    }
    members
}

/// Strongly connected components of the call graph, callees first.
fn sccs(p: &Program<'_>) -> Vec<Vec<u64>> {
    struct Tarjan<'a> {
        graph: &'a BTreeMap<u64, Vec<u64>>,
        index: BTreeMap<u64, usize>,
        low: BTreeMap<u64, usize>,
        on_stack: BTreeSet<u64>,
        stack: Vec<u64>,
        next: usize,
        out: Vec<Vec<u64>>,
    }
    impl Tarjan<'_> {
        fn visit(&mut self, v: u64) {
            self.index.insert(v, self.next);
            self.low.insert(v, self.next);
            self.next += 1;
            self.stack.push(v);
            self.on_stack.insert(v);
            let succs = self.graph.get(&v).cloned().unwrap_or_default();
            for w in succs {
                if !self.index.contains_key(&w) {
                    self.visit(w);
                    let lw = self.low[&w];
                    let lv = self.low.get_mut(&v).expect("visited");
                    *lv = (*lv).min(lw);
                } else if self.on_stack.contains(&w) {
                    let iw = self.index[&w];
                    let lv = self.low.get_mut(&v).expect("visited");
                    *lv = (*lv).min(iw);
                }
            }
            if self.low[&v] == self.index[&v] {
                let mut comp = Vec::new();
                while let Some(w) = self.stack.pop() {
                    self.on_stack.remove(&w);
                    comp.push(w);
                    if w == v {
                        break;
                    }
                }
                comp.sort_unstable();
                self.out.push(comp);
            }
        }
    }
    let graph: BTreeMap<u64, Vec<u64>> = p
        .functions
        .blocks
        .keys()
        .map(|&e| {
            let cs = p
                .callees(e)
                .into_iter()
                .filter(|c| p.functions.blocks.contains_key(c))
                .collect();
            (e, cs)
        })
        .collect();
    let mut t = Tarjan {
        graph: &graph,
        index: BTreeMap::new(),
        low: BTreeMap::new(),
        on_stack: BTreeSet::new(),
        stack: Vec::new(),
        next: 0,
        out: Vec::new(),
    };
    for &v in graph.keys() {
        if !t.index.contains_key(&v) {
            t.visit(v);
        }
    }
    t.out
}

fn depth_first(p: &Program<'_>, mut members: BTreeSet<u64>) -> BTreeSet<u64> {
    for comp in sccs(p) {
        loop {
            let mut changed = false;
            for &f in &comp {
                if !members.contains(&f) && !p.returns(f, &members) {
                    members.insert(f);
                    changed = true;
                }
            }
            if !changed {
                break;
            }
        }
    }
    members
}

fn single_pass(p: &Program<'_>, members: &mut BTreeSet<u64>) {
    let entries: Vec<u64> = p.functions.blocks.keys().copied().collect();
    for f in entries {
        if !members.contains(&f) && !p.returns(f, members) {
            members.insert(f);
        }
    }
}

fn evidence_pass(p: &Program<'_>, members: &mut BTreeSet<u64>, threshold: u64) {
    let mut counts: BTreeMap<u64, u64> = BTreeMap::new();
    for ins in p.result.instructions.values() {
        if ins.flow != FlowKind::CallDirect {
            continue;
        }
        let Some(t) = ins.branch_target else { continue };
        if members.contains(&t) {
            continue;
        }
        if p.unsafe_fallthrough(ins.end()) {
            *counts.entry(t).or_insert(0) += 1;
        }
    }
    for (t, n) in counts {
        if n >= threshold {
            members.insert(t);
        }
    }
}

/// Runs the detection variant `mode` starting from the seed routines.
pub fn detect_nonreturning(p: &Program<'_>, mode: NonRetMode, config: &StrategyConfig) -> NonRetSet {
    let seeds: BTreeSet<String> = config.nonret_seeds.iter().cloned().collect();
    let seed_addrs = if mode == NonRetMode::Off {
        BTreeSet::new()
    } else {
        seed_addresses(p.image, &config.nonret_seeds)
    };
    let members = match mode {
        NonRetMode::Off => BTreeSet::new(),
        NonRetMode::SeedsOnly => seed_addrs,
        NonRetMode::AssumeFallthrough => {
            let mut m = seed_addrs;
            single_pass(p, &mut m);
            m
        }
        NonRetMode::WorklistPropagate => worklist(p, seed_addrs, |f, n| !p.returns(f, n)),
        NonRetMode::DepthFirst => depth_first(p, seed_addrs),
        NonRetMode::AllPaths => worklist(p, seed_addrs, |f, n| p.all_paths_nonret(f, n)),
        NonRetMode::FallthroughEvidence => {
            let mut m = seed_addrs;
            for _ in 0..config.nonret_rounds {
                single_pass(p, &mut m);
                evidence_pass(p, &mut m, config.nonret_evidence);
            }
            m
        }
    };
    NonRetSet { members, seeds }
}

/// Least fixed point of "no exit survives" by naive re-evaluation; used by
/// the propagation variants as a reference.
pub fn fixed_point(p: &Program<'_>, seeds: &BTreeSet<u64>) -> BTreeSet<u64> {
    let mut members = seeds.clone();
    loop {
        let next: BTreeSet<u64> = p
            .functions
            .blocks
            .keys()
            .copied()
            .filter(|&f| !p.returns(f, &members))
            .chain(seeds.iter().copied())
            .collect();
        if next == members {
            return members;
        }
        members = next;
    }
}
