//! Tail-call detection rule sets.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use super::Functions;
use crate::config::{StrategyConfig, TailCallRules};
use crate::decode::{FlowKind, Instruction, Operand, RSP};
use crate::image::BinaryImage;
use crate::recursive::DisasmResult;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TailRule {
    Distance,
    Span,
    KnownEntry,
    Teardown,
    AngrConditions,
}

impl TailRule {
    pub fn name(self) -> &'static str {
        match self {
            TailRule::Distance => "distance",
            TailRule::Span => "span",
            TailRule::KnownEntry => "known_entry",
            TailRule::Teardown => "teardown",
            TailRule::AngrConditions => "angr_conditions",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [
            TailRule::Distance,
            TailRule::Span,
            TailRule::KnownEntry,
            TailRule::Teardown,
            TailRule::AngrConditions,
        ]
        .into_iter()
        .find(|r| r.name() == s)
    }
}

impl fmt::Display for TailRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TailCall {
    pub site: u64,
    pub target: u64,
    pub rule_fired: TailRule,
}

fn previous<'a>(result: &'a DisasmResult, ins: &Instruction) -> Option<&'a Instruction> {
    result
        .instructions
        .range(..ins.vaddr)
        .next_back()
        .map(|(_, p)| p)
        .filter(|p| p.end() == ins.vaddr)
}

fn is_rsp_adjust(ins: &Instruction, mnemonic: &str) -> Option<u64> {
    (ins.mnemonic == mnemonic && ins.reg_operand(0) == Some(RSP))
        .then(|| ins.imm_operand(1))
        .flatten()
}

fn tears_down_stack(result: &DisasmResult, jump: &Instruction) -> bool {
    let Some(prev) = previous(result, jump) else {
        return false;
    };
    if prev.mnemonic == "leave" || is_rsp_adjust(prev, "add").is_some() {
        return true;
    }
    prev.mnemonic == "pop"
        && matches!(prev.operands.first(), Some(Operand::Reg { .. }))
        && previous(result, prev).is_some_and(|pp| pp.mnemonic == "leave" || pp.mnemonic == "pop")
}

/// Whether `target` is reached from `entry` by straight-line flow that only
/// takes the not-taken side of conditional jumps.
fn reached_by_false_branches(result: &DisasmResult, entry: u64, target: u64) -> bool {
    let mut a = entry;
    while let Some(ins) = result.instructions.get(&a) {
        if a == target {
            return true;
        }
        if !ins.flow.falls_through() {
            return false;
        }
        a = ins.end();
    }
    a == target
}

fn stack_delta(ins: &Instruction, ptr: i64) -> Option<i64> {
    match ins.mnemonic.as_str() {
        "push" => Some(-ptr),
        "pop" => Some(ptr),
        "sub" => is_rsp_adjust(ins, "sub").map(|k| -(k as i64)),
        "add" => is_rsp_adjust(ins, "add").map(|k| k as i64),
        _ => Some(0),
    }
}

/// Stack height at `site` relative to the function entry, following the
/// first path found from the entry.
fn stack_height(result: &DisasmResult, functions: &Functions, entry: u64, site: u64, ptr: i64) -> Option<i64> {
    let blocks = functions.blocks.get(&entry)?;
    let mut height: BTreeMap<u64, i64> = BTreeMap::new();
    let start = result.block_containing(entry)?.start;
    height.insert(start, 0);
    let mut stack = vec![start];
    while let Some(b) = stack.pop() {
        let block = result.block_at(b)?;
        let mut h = height[&b];
        for ins in result.block_instructions(block) {
            if ins.vaddr == site {
                return Some(h);
            }
            if ins.mnemonic == "leave" {
                h = 0;
                continue;
            }
            h += stack_delta(ins, ptr)?;
        }
        for s in &block.successors {
            if blocks.contains(s) && !height.contains_key(s) {
                height.insert(*s, h);
                stack.push(*s);
            }
        }
    }
    None
}

fn incoming_ok(result: &DisasmResult, target: u64) -> bool {
    result.instructions.values().all(|i| {
        let cond_to = i.flow == FlowKind::CondJump && i.branch_target == Some(target);
        let falls_in = i.end() == target && i.flow.falls_through();
        !cond_to && !falls_in
    })
}

/// Applies the rule set `rules` to every direct jump.
pub fn detect_tail_calls(
    result: &DisasmResult,
    image: &BinaryImage,
    functions: &Functions,
    entries: &BTreeSet<u64>,
    rules: TailCallRules,
    config: &StrategyConfig,
) -> Vec<TailCall> {
    let ptr = image.mode.pointer_size() as i64;
    let mut out = Vec::new();
    for ins in result.instructions.values() {
        let conditional = match ins.flow {
            FlowKind::JumpDirect => false,
            FlowKind::CondJump => true,
            _ => continue,
        };
        let Some(target) = ins.branch_target else { continue };
        let own = functions.owner_of(result, ins.vaddr);
        if own == Some(target) {
            continue;
        }
        let known = entries.contains(&target);
        let rule = match rules {
            TailCallRules::Off => None,
            TailCallRules::Radare2 => {
                (ins.vaddr.abs_diff(target) > config.tailcall_distance).then_some(TailRule::Distance)
            }
            TailCallRules::Ghidra => {
                let (lo, hi) = (ins.vaddr.min(target), ins.vaddr.max(target));
                let crosses = entries.range(lo..=hi).any(|&e| Some(e) != own);
                (!conditional && crosses).then_some(TailRule::Span)
            }
            TailCallRules::Dyninst => {
                if known {
                    Some(TailRule::KnownEntry)
                } else if !conditional
                    && tears_down_stack(result, ins)
                    && !own.is_some_and(|e| reached_by_false_branches(result, e, target))
                {
                    Some(TailRule::Teardown)
                } else {
                    None
                }
            }
            TailCallRules::Angr => {
                if conditional {
                    None
                } else if known {
                    Some(TailRule::KnownEntry)
                } else {
                    let restored = own
                        .and_then(|e| stack_height(result, functions, e, ins.vaddr, ptr))
                        .is_some_and(|h| h == 0);
                    let target_owner = functions.owner_of_block(target);
                    let not_mid = target_owner.is_none() || target_owner == own;
                    (restored && not_mid && incoming_ok(result, target)).then_some(TailRule::AngrConditions)
                }
            }
        };
        if let Some(rule_fired) = rule {
            out.push(TailCall {
                site: ins.vaddr,
                target,
                rule_fired,
            });
        }
    }
    out
}
