//! Control-flow graph reconstruction: edges, call graph, jump tables,
//! indirect calls, tail calls and non-returning functions.

use std::collections::{BTreeMap, BTreeSet};

use crate::config::ConstPropScope;
use crate::decode::{FlowKind, Operand};
use crate::image::BinaryImage;
use crate::recursive::{BasicBlock, DisasmResult};

pub mod jumptable;
pub mod nonret;
pub mod tailcall;
pub mod vsa;

pub use jumptable::{resolve_jump_table, JumpTable, TableEncoding, Unresolved};
pub use nonret::{detect_nonreturning, seed_addresses, NonRetSet};
pub use tailcall::{detect_tail_calls, TailCall, TailRule};

/// Blocks owned by each function, found by walking intra-procedural
/// successors from the entry without entering other entries.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Functions {
    pub entries: Vec<u64>,
    pub blocks: BTreeMap<u64, BTreeSet<u64>>,
    owner: BTreeMap<u64, u64>,
}

impl Functions {
    pub fn compute(result: &DisasmResult, entries: &[u64]) -> Self {
        let entry_set: BTreeSet<u64> = entries.iter().copied().collect();
        let mut blocks: BTreeMap<u64, BTreeSet<u64>> = BTreeMap::new();
        let mut claimers: BTreeMap<u64, Vec<u64>> = BTreeMap::new();
        for &e in &entry_set {
            let Some(start) = result.block_containing(e).map(|b| b.start) else {
                continue;
            };
            let mut seen = BTreeSet::from([start]);
            let mut stack = vec![start];
            while let Some(b) = stack.pop() {
                let Some(block) = result.block_at(b) else { continue };
                for &s in &block.successors {
                    if entry_set.contains(&s) && s != e {
                        continue;
                    }
                    if result.block_at(s).is_some() && seen.insert(s) {
                        stack.push(s);
                    }
                }
            }
            for &b in &seen {
                claimers.entry(b).or_default().push(e);
            }
            blocks.insert(e, seen);
        }
        let owner = claimers
            .into_iter()
            .map(|(b, cs)| {
                let best = cs
                    .iter()
                    .copied()
                    .filter(|&c| c <= b)
                    .max()
                    .unwrap_or_else(|| cs[0]);
                (b, best)
            })
            .collect();
        Functions {
            entries: entry_set.into_iter().collect(),
            blocks,
            owner,
        }
    }

    /// Entry of the function whose blocks contain `addr`, falling back to
    /// the nearest entry at or below it.
    pub fn owner_of(&self, result: &DisasmResult, addr: u64) -> Option<u64> {
        if let Some(b) = result.block_containing(addr) {
            if let Some(&o) = self.owner.get(&b.start) {
                return Some(o);
            }
        }
        let idx = self.entries.partition_point(|&e| e <= addr);
        idx.checked_sub(1).map(|i| self.entries[i])
    }

    pub fn owner_of_block(&self, block: u64) -> Option<u64> {
        self.owner.get(&block).copied()
    }

    /// Blocks of the function owning `site`.
    pub fn owner_blocks(&self, result: &DisasmResult, site: u64) -> Option<&BTreeSet<u64>> {
        self.owner_of(result, site).and_then(|e| self.blocks.get(&e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EdgeKind {
    Fallthrough,
    Taken,
    NotTaken,
    Jump,
    Table,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Edge {
    pub from: u64,
    pub to: u64,
    pub kind: EdgeKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CallSite {
    pub site: u64,
    pub callee: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CallGraphEdge {
    pub caller: u64,
    pub callee: u64,
    pub site: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Cfg {
    pub blocks: Vec<BasicBlock>,
    pub edges: Vec<Edge>,
    /// Direct call sites.
    pub calls: Vec<CallSite>,
    /// Indirect jumps and calls awaiting resolution.
    pub pending: Vec<u64>,
    pub call_graph: Vec<CallGraphEdge>,
}

/// Intra-procedural edges between normalized blocks. Calls never produce a
/// fallthrough edge.
pub fn build_edges(result: &DisasmResult) -> Cfg {
    let mut cfg = Cfg {
        blocks: result.blocks.clone(),
        ..Cfg::default()
    };
    let is_block = |a: u64| result.block_at(a).is_some();
    for b in &result.blocks {
        let Some(last) = result.instructions.get(&b.last) else {
            continue;
        };
        let mut push = |to: u64, kind: EdgeKind| {
            if is_block(to) {
                cfg.edges.push(Edge { from: b.start, to, kind });
            }
        };
        match last.flow {
            FlowKind::Fallthrough => push(last.end(), EdgeKind::Fallthrough),
            FlowKind::CondJump => {
                if let Some(t) = last.branch_target {
                    push(t, EdgeKind::Taken);
                }
                push(last.end(), EdgeKind::NotTaken);
            }
            FlowKind::JumpDirect => {
                if let Some(t) = last.branch_target {
                    push(t, EdgeKind::Jump);
                }
            }
            FlowKind::CallDirect => {
                if let Some(t) = last.branch_target {
                    cfg.calls.push(CallSite { site: last.vaddr, callee: t });
                }
            }
            FlowKind::CallIndirect | FlowKind::JumpIndirect => cfg.pending.push(last.vaddr),
            FlowKind::Ret | FlowKind::Halt => {}
        }
    }
    cfg.edges.sort();
    cfg.edges.dedup();
    cfg
}

/// Constants reaching the operand of the indirect transfer at `site`.
pub fn constant_prop_call_targets(
    result: &DisasmResult,
    image: &BinaryImage,
    functions: &Functions,
    site: u64,
    scope: ConstPropScope,
) -> Vec<u64> {
    let Some(ins) = result.instructions.get(&site) else {
        return Vec::new();
    };
    let Some(block) = result.block_containing(site).map(|b| b.start) else {
        return Vec::new();
    };
    let sem = vsa::Semantics {
        memory_loads: true,
        ..vsa::Semantics::default()
    };
    let entry = match scope {
        ConstPropScope::Off => return Vec::new(),
        ConstPropScope::Block => vsa::State::new(),
        ConstPropScope::Function => {
            let region = functions
                .owner_of(result, site)
                .and_then(|e| functions.blocks.get(&e))
                .cloned()
                .unwrap_or_else(|| BTreeSet::from([block]));
            vsa::analyze_region(result, image, &region, sem)
                .remove(&block)
                .unwrap_or_default()
        }
    };
    let st = vsa::state_before(result, image, block, &entry, site, sem);
    let ptr = image.mode.pointer_size();
    let value = match ins.operands.first() {
        Some(Operand::Reg { reg, .. }) => vsa::get(&st, *reg).as_const(),
        Some(Operand::Mem(m)) => vsa::address_of(&st, m)
            .filter(|&a| image.is_mapped(a))
            .and_then(|a| image.read_uint(a, ptr)),
        _ => None,
    };
    value
        .filter(|&v| image.is_executable(v))
        .into_iter()
        .collect()
}

/// Stitches resolved tables, tail calls and non-returning knowledge into
/// the final graph.
pub fn finalize_cfg(
    mut cfg: Cfg,
    result: &DisasmResult,
    functions: &Functions,
    tables: &[JumpTable],
    tail_calls: &[TailCall],
    nonret: &NonRetSet,
    indirect_calls: &BTreeMap<u64, Vec<u64>>,
) -> Cfg {
    for t in tables {
        let Some(from) = result.block_containing(t.site).map(|b| b.start) else {
            continue;
        };
        for target in t.unique_targets() {
            if result.block_at(target).is_some() {
                cfg.edges.push(Edge {
                    from,
                    to: target,
                    kind: EdgeKind::Table,
                });
            }
        }
    }
    let tails: BTreeSet<(u64, u64)> = tail_calls
        .iter()
        .filter_map(|tc| Some((result.block_containing(tc.site)?.start, tc.target)))
        .collect();
    cfg.edges.retain(|e| {
        if matches!(e.kind, EdgeKind::Jump | EdgeKind::Taken) && tails.contains(&(e.from, e.to)) {
            return false;
        }
        let ends_in_nonret_call = result
            .block_at(e.from)
            .and_then(|b| result.instructions.get(&b.last))
            .is_some_and(|i| {
                i.flow == FlowKind::CallDirect && i.branch_target.is_some_and(|t| nonret.members.contains(&t))
            });
        !(ends_in_nonret_call && e.kind == EdgeKind::Fallthrough)
    });
    cfg.edges.sort();
    cfg.edges.dedup();

    let mut graph = Vec::new();
    let mut add = |site: u64, callee: u64| {
        if let Some(caller) = functions.owner_of(result, site) {
            graph.push(CallGraphEdge { caller, callee, site });
        }
    };
    for c in &cfg.calls {
        add(c.site, c.callee);
    }
    for (&site, targets) in indirect_calls {
        for &t in targets {
            add(site, t);
        }
    }
    for tc in tail_calls {
        add(tc.site, tc.target);
    }
    graph.sort();
    graph.dedup();
    cfg.call_graph = graph;
    cfg
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::{Mode, Section, SectionKind};
    use crate::recursive::{recursive_descent, NoHooks};

    fn image(code: &[u8]) -> BinaryImage {
        BinaryImage::new(
            "t",
            Mode::X64,
            vec![Section {
                name: ".text".into(),
                vaddr: 0x1000,
                size: code.len() as u64,
                bytes: code.to_vec(),
                kind: SectionKind::Code,
                executable: true,
            }],
            vec![],
            0x1000,
        )
        .unwrap()
    }

    #[test]
    fn conditional_and_return_edges() {
        // je +1; nop; ret
        let img = image(&[0x74, 0x01, 0x90, 0xc3]);
        let r = recursive_descent(&img, &[0x1000], &NoHooks);
        let cfg = build_edges(&r);
        let from_je: Vec<_> = cfg.edges.iter().filter(|e| e.from == 0x1000).collect();
        assert_eq!(from_je.len(), 2);
        assert!(cfg.edges.iter().all(|e| e.from != 0x1003));
    }

    #[test]
    fn calls_have_no_fallthrough_edge() {
        // call +0 ; ret
        let img = image(&[0xe8, 0x00, 0x00, 0x00, 0x00, 0xc3]);
        let r = recursive_descent(&img, &[0x1000], &NoHooks);
        let cfg = build_edges(&r);
        assert!(cfg.edges.is_empty());
        assert_eq!(cfg.calls, vec![CallSite { site: 0x1000, callee: 0x1005 }]);
    }

    #[test]
    fn block_scope_constant_call() {
        // mov $0x1200,%eax ; call *%rax ; ret
        let mut code = vec![0xb8, 0x00, 0x12, 0x00, 0x00, 0xff, 0xd0, 0xc3];
        code.resize(0x300, 0xc3);
        let img = image(&code);
        let r = recursive_descent(&img, &[0x1000], &NoHooks);
        let f = Functions::compute(&r, &[0x1000]);
        assert_eq!(
            constant_prop_call_targets(&r, &img, &f, 0x1005, ConstPropScope::Block),
            vec![0x1200]
        );
    }
}
