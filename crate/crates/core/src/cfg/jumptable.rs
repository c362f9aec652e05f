//! Jump-table resolution strategies.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use super::vsa::{self, Interval, Semantics, State};
use super::Functions;
use crate::config::{JtStrategy, StrategyConfig};
use crate::decode::{FlowKind, Instruction, Operand, Reg};
use crate::image::BinaryImage;
use crate::recursive::DisasmResult;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TableEncoding {
    Absolute,
    BaseRelativeSigned,
}

impl TableEncoding {
    pub fn name(self) -> &'static str {
        match self {
            TableEncoding::Absolute => "absolute",
            TableEncoding::BaseRelativeSigned => "base_relative_signed",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct JumpTable {
    pub site: u64,
    /// Address of the first entry.
    pub base: u64,
    /// Value added to relative entries; equal to `base` unless the table
    /// is addressed through another register (e.g. a GOT pointer).
    pub entry_base: u64,
    pub entry_width: u8,
    pub index_low: u64,
    pub index_bound: u64,
    /// One target per index in `index_low..=index_bound`.
    pub targets: Vec<u64>,
    pub encoding: TableEncoding,
}

impl JumpTable {
    pub fn unique_targets(&self) -> Vec<u64> {
        let set: BTreeSet<u64> = self.targets.iter().copied().collect();
        set.into_iter().collect()
    }

    /// Bytes occupied by the entries.
    pub fn extent(&self) -> (u64, u64) {
        let w = u64::from(self.entry_width);
        (
            self.base.wrapping_add(self.index_low * w),
            self.base.wrapping_add((self.index_bound + 1) * w),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Unresolved {
    NoPattern,
    NoBound,
    BoundExceedsThreshold,
    SliceDepthExhausted,
    TargetOutsideCode,
}

impl Unresolved {
    pub fn name(self) -> &'static str {
        match self {
            Unresolved::NoPattern => "no_pattern",
            Unresolved::NoBound => "no_bound",
            Unresolved::BoundExceedsThreshold => "bound_exceeds_threshold",
            Unresolved::SliceDepthExhausted => "slice_depth_exhausted",
            Unresolved::TargetOutsideCode => "target_outside_code",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [
            Unresolved::NoPattern,
            Unresolved::NoBound,
            Unresolved::BoundExceedsThreshold,
            Unresolved::SliceDepthExhausted,
            Unresolved::TargetOutsideCode,
        ]
        .into_iter()
        .find(|u| u.name() == s)
    }
}

impl fmt::Display for Unresolved {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// The memory read that fetches the table entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct TableRead {
    load_site: u64,
    base: u64,
    entry_base: u64,
    index: Reg,
    width: u8,
    encoding: TableEncoding,
}

fn predecessors(result: &DisasmResult) -> BTreeMap<u64, Vec<u64>> {
    let mut preds: BTreeMap<u64, Vec<u64>> = BTreeMap::new();
    for b in &result.blocks {
        for s in &b.successors {
            preds.entry(*s).or_default().push(b.start);
        }
    }
    preds
}

/// Instructions of the jump block up to and including `site`.
fn block_prefix(result: &DisasmResult, block: u64, site: u64) -> Vec<&Instruction> {
    let Some(b) = result.block_at(block) else {
        return Vec::new();
    };
    let mut out = Vec::new();
    for ins in result.block_instructions(b) {
        out.push(ins);
        if ins.vaddr == site {
            break;
        }
    }
    out
}

/// Walks back from the jump through its block to the table load.
fn find_table_read(
    result: &DisasmResult,
    image: &BinaryImage,
    block: u64,
    site: u64,
    entry: &State,
    sem: Semantics,
) -> Option<TableRead> {
    let instrs = block_prefix(result, block, site);
    let jump = *instrs.last()?;
    let before = |addr: u64| vsa::state_before(result, image, block, entry, addr, sem);
    let ptr = image.mode.pointer_size() as u8;
    match jump.operands.first()? {
        Operand::Mem(m) => {
            let index = m.index?;
            let st = before(jump.vaddr);
            let base = match m.base {
                None => m.displacement as u64,
                Some(b) => vsa::get(&st, b).as_const()?.wrapping_add(m.displacement as u64),
            };
            Some(TableRead {
                load_site: jump.vaddr,
                base,
                entry_base: base,
                index,
                width: if m.size == 0 { ptr } else { m.size },
                encoding: TableEncoding::Absolute,
            })
        }
        Operand::Reg { reg, .. } => {
            let mut target = *reg;
            let mut added: Option<Reg> = None;
            let mut add_site = 0;
            for ins in instrs[..instrs.len() - 1].iter().rev() {
                if ins.reg_operand(0) != Some(target) {
                    continue;
                }
                match (ins.mnemonic.as_str(), ins.operands.get(1)) {
                    ("add", Some(Operand::Reg { reg, .. })) if added.is_none() => {
                        added = Some(*reg);
                        add_site = ins.vaddr;
                    }
                    ("mov", Some(Operand::Reg { reg, .. })) => target = *reg,
                    ("mov" | "movsxd" | "movsx", Some(Operand::Mem(m))) => {
                        let index = m.index?;
                        let st = before(ins.vaddr);
                        let mem_base = match m.base {
                            None => Some(m.displacement as u64),
                            Some(b) => vsa::get(&st, b)
                                .as_const()
                                .map(|v| v.wrapping_add(m.displacement as u64)),
                        };
                        return match added {
                            Some(areg) => {
                                let entry_base = vsa::get(&before(add_site), areg).as_const()?;
                                Some(TableRead {
                                    load_site: ins.vaddr,
                                    base: mem_base?,
                                    entry_base,
                                    index,
                                    width: m.size,
                                    encoding: TableEncoding::BaseRelativeSigned,
                                })
                            }
                            None => Some(TableRead {
                                load_site: ins.vaddr,
                                base: mem_base?,
                                entry_base: mem_base?,
                                index,
                                width: m.size,
                                encoding: TableEncoding::Absolute,
                            }),
                        };
                    }
                    _ => return None,
                }
            }
            None
        }
        _ => None,
    }
}

fn read_targets(
    image: &BinaryImage,
    read: &TableRead,
    lo: u64,
    hi: u64,
) -> Result<Vec<u64>, Unresolved> {
    let w = u64::from(read.width);
    let mut out = Vec::with_capacity((hi - lo + 1) as usize);
    for i in lo..=hi {
        let addr = read.base.wrapping_add(i.wrapping_mul(w));
        let raw = image.read_uint(addr, w).ok_or(Unresolved::TargetOutsideCode)?;
        let t = match read.encoding {
            TableEncoding::Absolute => raw,
            TableEncoding::BaseRelativeSigned => {
                let shift = 64 - 8 * w as u32;
                let off = ((raw << shift) as i64) >> shift;
                read.entry_base.wrapping_add(off as u64)
            }
        };
        let t = if image.mode == crate::image::Mode::X86 { t & 0xffff_ffff } else { t };
        if !image.is_executable(t) {
            return Err(Unresolved::TargetOutsideCode);
        }
        out.push(t);
    }
    Ok(out)
}

fn finish(
    image: &BinaryImage,
    site: u64,
    read: &TableRead,
    lo: u64,
    hi: u64,
    threshold: u64,
) -> Result<JumpTable, Unresolved> {
    if hi > threshold {
        return Err(Unresolved::BoundExceedsThreshold);
    }
    let targets = read_targets(image, read, lo, hi)?;
    Ok(JumpTable {
        site,
        base: read.base,
        entry_base: read.entry_base,
        entry_width: read.width,
        index_low: lo,
        index_bound: hi,
        targets,
        encoding: read.encoding,
    })
}

/// Blocks reaching `block` backwards, restricted to `within`, visited
/// breadth first. Returns the blocks in visit order with their depth.
fn backward_bfs(
    preds: &BTreeMap<u64, Vec<u64>>,
    block: u64,
    within: Option<&BTreeSet<u64>>,
) -> Vec<(u64, u32)> {
    let mut seen = BTreeSet::from([block]);
    let mut order = vec![(block, 0)];
    let mut i = 0;
    while i < order.len() {
        let (b, d) = order[i];
        i += 1;
        for &p in preds.get(&b).map(Vec::as_slice).unwrap_or(&[]) {
            if within.is_some_and(|w| !w.contains(&p)) || !seen.insert(p) {
                continue;
            }
            order.push((p, d + 1));
        }
    }
    order
}

fn is_assignment(ins: &Instruction) -> bool {
    ins.flow == FlowKind::Fallthrough
        && ins.reg_operand(0).is_some()
        && !matches!(ins.mnemonic.as_str(), "cmp" | "test" | "push" | "bt")
}

/// Radare2-style: a table read plus a compare in a preceding block.
fn resolve_pattern(
    result: &DisasmResult,
    image: &BinaryImage,
    preds: &BTreeMap<u64, Vec<u64>>,
    block: u64,
    site: u64,
    threshold: u64,
) -> Result<JumpTable, Unresolved> {
    let sem = Semantics {
        model_sub: true,
        model_and: false,
        pc_thunk: true,
        memory_loads: false,
    };
    let mut entry = State::new();
    let mut chain = vec![block];
    let mut cur = block;
    while let Some([p]) = preds.get(&cur).map(Vec::as_slice) {
        if chain.contains(p) || chain.len() > 8 {
            break;
        }
        chain.push(*p);
        cur = *p;
    }
    if let Some(&prev) = chain.get(1) {
        if let Some(b) = result.block_at(prev) {
            let mut st = State::new();
            for ins in result.block_instructions(b) {
                vsa::transfer(&mut st, ins, image, sem);
            }
            entry = st;
        }
    }
    let read = find_table_read(result, image, block, site, &entry, sem).ok_or(Unresolved::NoPattern)?;
    for w in chain.windows(2) {
        let (succ, b) = (w[0], w[1]);
        let Some(blk) = result.block_at(b) else { continue };
        let instrs: Vec<&Instruction> = result.block_instructions(blk).collect();
        let Some(last) = instrs.last() else { continue };
        if last.flow != FlowKind::CondJump || instrs.len() < 2 {
            continue;
        }
        let setter = instrs[instrs.len() - 2];
        let Some((_, imm)) = vsa::flag_setter(setter) else {
            continue;
        };
        let taken = last.branch_target == Some(succ);
        if let Some((_, hi)) = vsa::implied_range(&last.mnemonic, imm, taken, &Interval::TOP) {
            if hi != u64::MAX && hi != i64::MAX as u64 {
                return finish(image, site, &read, 0, hi, threshold);
            }
        }
    }
    Err(Unresolved::NoBound)
}

/// Interval-based strategies over a backward region.
fn resolve_interval(
    result: &DisasmResult,
    image: &BinaryImage,
    preds: &BTreeMap<u64, Vec<u64>>,
    functions: &Functions,
    block: u64,
    site: u64,
    strategy: JtStrategy,
    config: &StrategyConfig,
) -> Result<JumpTable, Unresolved> {
    let within = functions.owner_blocks(result, site);
    let order = backward_bfs(preds, block, within);
    let full = order.len();
    let region: Vec<u64> = match strategy {
        JtStrategy::SliceDyninst => {
            let mut count = 0usize;
            let mut keep = Vec::new();
            for &(b, _) in &order {
                let n = result
                    .block_at(b)
                    .map(|blk| result.block_instructions(blk).filter(|i| is_assignment(i)).count())
                    .unwrap_or(0);
                if !keep.is_empty() && count + n > config.slice_assign_limit as usize {
                    break;
                }
                count += n;
                keep.push(b);
            }
            keep
        }
        JtStrategy::SliceAngr => order
            .iter()
            .filter(|(_, d)| *d < config.slice_block_levels as u32)
            .map(|(b, _)| *b)
            .collect(),
        _ => order.iter().map(|(b, _)| *b).collect(),
    };
    let truncated = region.len() < full;
    let region: BTreeSet<u64> = region.into_iter().collect();
    let sem = Semantics {
        model_sub: strategy != JtStrategy::PathGhidra,
        model_and: true,
        pc_thunk: config.pc_thunk,
        memory_loads: false,
    };
    let states = vsa::analyze_region(result, image, &region, sem);
    let entry = states.get(&block).cloned().unwrap_or_default();
    let read = find_table_read(result, image, block, site, &entry, sem).ok_or(if truncated {
        Unresolved::SliceDepthExhausted
    } else {
        Unresolved::NoPattern
    })?;
    let st = vsa::state_before(result, image, block, &entry, read.load_site, sem);
    let idx = vsa::get(&st, read.index);
    if idx.is_top() || !idx.guarded {
        return Err(if truncated {
            Unresolved::SliceDepthExhausted
        } else {
            Unresolved::NoBound
        });
    }
    finish(image, site, &read, idx.lo, idx.hi, config.jt_bound_threshold)
}

/// Resolves the indirect jump at `site` with `strategy`.
pub fn resolve_jump_table(
    result: &DisasmResult,
    image: &BinaryImage,
    functions: &Functions,
    site: u64,
    strategy: JtStrategy,
    config: &StrategyConfig,
) -> Result<JumpTable, Unresolved> {
    let Some(ins) = result.instructions.get(&site) else {
        return Err(Unresolved::NoPattern);
    };
    if ins.flow != FlowKind::JumpIndirect {
        return Err(Unresolved::NoPattern);
    }
    let Some(block) = result.block_containing(site).map(|b| b.start) else {
        return Err(Unresolved::NoPattern);
    };
    let preds = predecessors(result);
    match strategy {
        JtStrategy::Off => Err(Unresolved::NoPattern),
        JtStrategy::PatternRadare2 => {
            resolve_pattern(result, image, &preds, block, site, config.jt_bound_threshold)
        }
        _ => resolve_interval(result, image, &preds, functions, block, site, strategy, config),
    }
}
