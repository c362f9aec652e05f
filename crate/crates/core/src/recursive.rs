//! Recursive descent and the gap-filling heuristics.

use std::collections::{BTreeMap, BTreeSet};

use crate::config::StrategyConfig;
use crate::decode::{decode_at, decode_bytes, FlowKind, Instruction};
use crate::image::{merge_spans, subtract_spans, BinaryImage, ByteSource, Span};
use crate::sweep::detect_padding;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Provenance {
    SeedReachable,
    PrologueMatch,
    GapScan,
    XrefSeed,
}

impl Provenance {
    pub fn name(self) -> &'static str {
        match self {
            Provenance::SeedReachable => "seed_reachable",
            Provenance::PrologueMatch => "prologue_match",
            Provenance::GapScan => "gap_scan",
            Provenance::XrefSeed => "xref_seed",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "seed_reachable" => Some(Provenance::SeedReachable),
            "prologue_match" => Some(Provenance::PrologueMatch),
            "gap_scan" => Some(Provenance::GapScan),
            "xref_seed" => Some(Provenance::XrefSeed),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BasicBlock {
    pub start: u64,
    pub end: u64,
    /// Address of the last instruction.
    pub last: u64,
    pub successors: Vec<u64>,
}

/// Knowledge fed back from CFG analysis into descent.
pub trait CfgHooks {
    fn is_non_returning(&self, _callee: u64) -> bool {
        false
    }

    /// Resolved targets of an indirect jump.
    fn indirect_targets(&self, _site: u64) -> &[u64] {
        &[]
    }
}

/// Hooks that know nothing.
#[derive(Debug, Default, Clone, Copy)]
pub struct NoHooks;

impl CfgHooks for NoHooks {}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DisasmResult {
    pub instructions: BTreeMap<u64, Instruction>,
    pub provenance: BTreeMap<u64, Provenance>,
    pub blocks: Vec<BasicBlock>,
    pub pending_indirect: Vec<u64>,
    /// Addresses where a descent path hit an undecodable byte.
    pub failures: Vec<u64>,
    pub seeds: Vec<u64>,
    pub prologue_hits: Vec<u64>,
    pub scan_begins: Vec<u64>,
    pub xref_seeds: Vec<u64>,
    pub rolled_back: Vec<u64>,
}

/// Whether some instruction's bytes cover `addr`.
pub fn covers(instructions: &BTreeMap<u64, Instruction>, addr: u64) -> bool {
    instructions
        .range(addr.saturating_sub(15)..=addr)
        .any(|(_, i)| i.end() > addr)
}

impl DisasmResult {
    pub fn instruction_spans(&self) -> Vec<Span> {
        merge_spans(
            self.instructions
                .values()
                .map(|i| Span::new(i.vaddr, i.end()))
                .collect(),
        )
    }

    pub fn block_at(&self, start: u64) -> Option<&BasicBlock> {
        let idx = self.blocks.partition_point(|b| b.start < start);
        self.blocks.get(idx).filter(|b| b.start == start)
    }

    /// The block containing the instruction at `addr`.
    pub fn block_containing(&self, addr: u64) -> Option<&BasicBlock> {
        let idx = self.blocks.partition_point(|b| b.start <= addr);
        let b = self.blocks.get(idx.checked_sub(1)?)?;
        (addr < b.end).then_some(b)
    }

    /// Instructions of a block in address order.
    pub fn block_instructions<'a>(&'a self, b: &BasicBlock) -> impl Iterator<Item = &'a Instruction> {
        let mut next = Some(b.start);
        let last = b.last;
        std::iter::from_fn(move || {
            let a = next?;
            let ins = self.instructions.get(&a)?;
            next = (a != last).then(|| ins.end());
            Some(ins)
        })
    }

    pub fn count_by_provenance(&self) -> BTreeMap<Provenance, usize> {
        let mut out = BTreeMap::new();
        for p in self.provenance.values() {
            *out.entry(*p).or_insert(0) += 1;
        }
        out
    }

    /// Follows control flow from `seeds`, tagging new instructions with
    /// `prov`. Returns the addresses added.
    pub fn descend(
        &mut self,
        image: &BinaryImage,
        seeds: &[u64],
        prov: Provenance,
        hooks: &dyn CfgHooks,
    ) -> Vec<u64> {
        let mut added = Vec::new();
        let mut stack: Vec<u64> = seeds.iter().rev().copied().collect();
        while let Some(a) = stack.pop() {
            if self.instructions.contains_key(&a) || !image.is_executable(a) {
                continue;
            }
            let ins = match decode_at(image, a, image.mode) {
                Ok(i) => i,
                Err(_) => {
                    if !self.failures.contains(&a) {
                        self.failures.push(a);
                    }
                    continue;
                }
            };
            let mut next = explore_successors(&ins, hooks);
            next.reverse();
            stack.extend(next);
            self.instructions.insert(a, ins);
            self.provenance.insert(a, prov);
            added.push(a);
        }
        added
    }

    /// Rebuilds normalized blocks and the pending indirect list.
    pub fn normalize(&mut self, hooks: &dyn CfgHooks) {
        let mut leaders: BTreeSet<u64> = BTreeSet::new();
        leaders.extend(self.seeds.iter().copied());
        leaders.extend(self.prologue_hits.iter().copied());
        leaders.extend(self.scan_begins.iter().copied());
        leaders.extend(self.xref_seeds.iter().copied());
        for ins in self.instructions.values() {
            if ins.flow.ends_block() {
                leaders.insert(ins.end());
            }
            if let Some(t) = ins.branch_target {
                leaders.insert(t);
            }
            if ins.flow == FlowKind::JumpIndirect {
                leaders.extend(hooks.indirect_targets(ins.vaddr).iter().copied());
            }
        }
        let mut assigned: BTreeSet<u64> = BTreeSet::new();
        let mut blocks = Vec::new();
        for &start in self.instructions.keys() {
            if assigned.contains(&start) {
                continue;
            }
            let mut cur = &self.instructions[&start];
            assigned.insert(start);
            loop {
                if cur.flow.ends_block() {
                    break;
                }
                let n = cur.end();
                match self.instructions.get(&n) {
                    Some(next) if !leaders.contains(&n) && !assigned.contains(&n) => {
                        assigned.insert(n);
                        cur = next;
                    }
                    _ => break,
                }
            }
            let successors = block_successors(cur, hooks)
                .into_iter()
                .filter(|s| self.instructions.contains_key(s))
                .collect();
            blocks.push(BasicBlock {
                start,
                end: cur.end(),
                last: cur.vaddr,
                successors,
            });
        }
        self.blocks = blocks;
        self.pending_indirect = self
            .instructions
            .values()
            .filter(|i| matches!(i.flow, FlowKind::JumpIndirect | FlowKind::CallIndirect))
            .map(|i| i.vaddr)
            .collect();
        self.failures.sort_unstable();
        self.failures.dedup();
        self.failures.retain(|f| !self.instructions.contains_key(f));
    }
}

/// Every address descent should visit after `ins`, including call targets.
fn explore_successors(ins: &Instruction, hooks: &dyn CfgHooks) -> Vec<u64> {
    let mut out = Vec::new();
    match ins.flow {
        FlowKind::Fallthrough | FlowKind::CallIndirect => out.push(ins.end()),
        FlowKind::CondJump => {
            out.extend(ins.branch_target);
            out.push(ins.end());
        }
        FlowKind::JumpDirect => out.extend(ins.branch_target),
        FlowKind::CallDirect => {
            out.extend(ins.branch_target);
            if !ins.branch_target.is_some_and(|t| hooks.is_non_returning(t)) {
                out.push(ins.end());
            }
        }
        FlowKind::JumpIndirect => out.extend(hooks.indirect_targets(ins.vaddr).iter().copied()),
        FlowKind::Ret | FlowKind::Halt => {}
    }
    out
}

/// Intra-procedural successors of a block ending in `last`.
fn block_successors(last: &Instruction, hooks: &dyn CfgHooks) -> Vec<u64> {
    match last.flow {
        FlowKind::CallDirect => {
            if last.branch_target.is_some_and(|t| hooks.is_non_returning(t)) {
                vec![]
            } else {
                vec![last.end()]
            }
        }
        FlowKind::CallIndirect => vec![last.end()],
        FlowKind::Fallthrough => vec![last.end()],
        _ => explore_successors(last, hooks),
    }
}

/// Runs descent from `seeds` and normalizes the result.
pub fn recursive_descent(image: &BinaryImage, seeds: &[u64], hooks: &dyn CfgHooks) -> DisasmResult {
    let mut r = DisasmResult {
        seeds: seeds.to_vec(),
        ..DisasmResult::default()
    };
    r.descend(image, seeds, Provenance::SeedReachable, hooks);
    r.normalize(hooks);
    r
}

/// Executable bytes not covered by any decoded instruction.
pub fn gap_regions(result: &DisasmResult, image: &BinaryImage) -> Vec<Span> {
    subtract_spans(&merge_spans(image.executable_spans()), &result.instruction_spans())
}

fn gap_bytes(result: &DisasmResult, image: &BinaryImage) -> u64 {
    gap_regions(result, image).iter().map(Span::size).sum()
}

/// Applies prologue matching, gap scanning and xref seeding until the gaps
/// stop shrinking.
pub fn apply_gap_heuristics(
    mut result: DisasmResult,
    image: &BinaryImage,
    config: &StrategyConfig,
    hooks: &dyn CfgHooks,
) -> DisasmResult {
    if !(config.prologue_match || config.gap_scan || config.xref_seed) {
        return result;
    }
    loop {
        let before = gap_bytes(&result, image);
        if config.prologue_match {
            prologue_round(&mut result, image, hooks);
        }
        if config.gap_scan {
            gap_scan_round(&mut result, image, hooks);
        }
        if config.xref_seed {
            xref_round(&mut result, image, config, hooks);
        }
        result.normalize(hooks);
        if gap_bytes(&result, image) >= before {
            return result;
        }
    }
}

fn prologue_round(result: &mut DisasmResult, image: &BinaryImage, hooks: &dyn CfgHooks) {
    let gaps = gap_regions(result, image);
    for hit in crate::funcid::match_prologues(image, &gaps) {
        if covers(&result.instructions, hit) {
            continue;
        }
        result.prologue_hits.push(hit);
        result.descend(image, &[hit], Provenance::PrologueMatch, hooks);
    }
}

fn decode_within(image: &BinaryImage, a: u64, end: u64) -> Option<Instruction> {
    let bytes = image.bytes_at(a)?;
    let n = bytes.len().min((end - a) as usize);
    decode_bytes(&bytes[..n], a, image.mode).ok()
}

fn gap_scan_round(result: &mut DisasmResult, image: &BinaryImage, hooks: &dyn CfgHooks) {
    for gap in gap_regions(result, image) {
        let mut a = gap.start;
        while a < gap.end {
            if covers(&result.instructions, a) {
                a += 1;
                continue;
            }
            if let Some(pad) = detect_padding(image, a, image.mode) {
                a = pad.end.min(gap.end);
                continue;
            }
            let mut b = a;
            let mut failed_at = None;
            while b < gap.end {
                match decode_within(image, b, gap.end) {
                    Some(ins) => {
                        b = ins.end();
                        if ins.flow.ends_block() {
                            break;
                        }
                    }
                    None => {
                        failed_at = Some(b);
                        break;
                    }
                }
            }
            match failed_at {
                Some(f) => a = f + 1,
                None => {
                    result.scan_begins.push(a);
                    result.descend(image, &[a], Provenance::GapScan, hooks);
                    a = b;
                }
            }
        }
    }
}

/// Descends from `seed` without touching `existing`; `None` on any decode
/// failure, invalid transfer or overlap with known code.
fn speculative_descent(
    image: &BinaryImage,
    existing: &BTreeMap<u64, Instruction>,
    seed: u64,
    hooks: &dyn CfgHooks,
) -> Option<BTreeMap<u64, Instruction>> {
    let mut new: BTreeMap<u64, Instruction> = BTreeMap::new();
    let mut stack = vec![seed];
    while let Some(a) = stack.pop() {
        if existing.contains_key(&a) || new.contains_key(&a) {
            continue;
        }
        if !image.is_executable(a) || covers(existing, a) || covers(&new, a) {
            return None;
        }
        let ins = decode_at(image, a, image.mode).ok()?;
        if existing.range(a + 1..ins.end()).next().is_some()
            || new.range(a + 1..ins.end()).next().is_some()
        {
            return None;
        }
        let mut next = explore_successors(&ins, hooks);
        next.reverse();
        stack.extend(next);
        new.insert(a, ins);
    }
    Some(new)
}

fn xref_round(
    result: &mut DisasmResult,
    image: &BinaryImage,
    config: &StrategyConfig,
    hooks: &dyn CfgHooks,
) {
    let mut targets: Vec<u64> = crate::symbolize::extract_candidates(image, result, config)
        .into_iter()
        .map(|c| c.value)
        .filter(|&v| image.is_executable(v) && !covers(&result.instructions, v))
        .collect();
    targets.sort_unstable();
    targets.dedup();
    for t in targets {
        if covers(&result.instructions, t) || result.rolled_back.contains(&t) {
            continue;
        }
        match speculative_descent(image, &result.instructions, t, hooks) {
            Some(new) => {
                result.xref_seeds.push(t);
                for (a, ins) in new {
                    result.provenance.insert(a, Provenance::XrefSeed);
                    result.instructions.insert(a, ins);
                }
            }
            None => result.rolled_back.push(t),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::{Mode, Section, SectionKind};

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
    fn single_ret() {
        let img = image(&[0xc3]);
        let r = recursive_descent(&img, &[0x1000], &NoHooks);
        assert_eq!(r.blocks.len(), 1);
        assert_eq!(r.blocks[0].start, 0x1000);
        assert_eq!(r.blocks[0].end, 0x1001);
        assert!(r.blocks[0].successors.is_empty());
        assert!(gap_regions(&r, &img).is_empty());
    }

    #[test]
    fn branches_split_blocks() {
        // je +1; nop; nop; ret
        let img = image(&[0x74, 0x01, 0x90, 0x90, 0xc3]);
        let r = recursive_descent(&img, &[0x1000], &NoHooks);
        let starts: Vec<u64> = r.blocks.iter().map(|b| b.start).collect();
        assert_eq!(starts, vec![0x1000, 0x1002, 0x1003]);
        assert_eq!(r.blocks[0].successors, vec![0x1003, 0x1002]);
        assert_eq!(r.blocks[1].successors, vec![0x1003]);
    }

    #[test]
    fn unreached_function_is_gap() {
        // ret; then 0x20 bytes of an unreached function
        let mut code = vec![0xc3];
        code.extend(std::iter::repeat_n(0x90, 0x1f));
        code.push(0xc3);
        let img = image(&code);
        let r = recursive_descent(&img, &[0x1000], &NoHooks);
        assert_eq!(gap_regions(&r, &img), vec![Span::new(0x1001, 0x1021)]);
    }

    #[test]
    fn pure_config_is_identity() {
        let img = image(&[0xc3, 0x55, 0x48, 0x89, 0xe5, 0x5d, 0xc3]);
        let r = recursive_descent(&img, &[0x1000], &NoHooks);
        let pure = StrategyConfig::profile("pure").unwrap();
        assert_eq!(apply_gap_heuristics(r.clone(), &img, &pure, &NoHooks), r);
    }

    #[test]
    fn prologue_heuristic_fills_gap() {
        let img = image(&[0xc3, 0x55, 0x48, 0x89, 0xe5, 0x5d, 0xc3]);
        let r = recursive_descent(&img, &[0x1000], &NoHooks);
        let mut cfg = StrategyConfig::profile("pure").unwrap();
        cfg.prologue_match = true;
        let r = apply_gap_heuristics(r, &img, &cfg, &NoHooks);
        assert_eq!(r.provenance[&0x1001], Provenance::PrologueMatch);
        assert_eq!(r.provenance[&0x1000], Provenance::SeedReachable);
        assert!(gap_regions(&r, &img).is_empty());
    }

    #[test]
    fn gap_scan_skips_bad_bytes() {
        // ret; 06 (invalid); nop; ret
        let img = image(&[0xc3, 0x06, 0x90, 0xc3]);
        let r = recursive_descent(&img, &[0x1000], &NoHooks);
        let mut cfg = StrategyConfig::profile("pure").unwrap();
        cfg.gap_scan = true;
        let r = apply_gap_heuristics(r, &img, &cfg, &NoHooks);
        assert!(!r.instructions.contains_key(&0x1001));
        assert_eq!(r.provenance.get(&0x1003), Some(&Provenance::GapScan));
    }
}
