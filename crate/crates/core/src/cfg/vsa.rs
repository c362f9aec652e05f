//! A small interval domain over general-purpose registers.

use std::collections::{BTreeMap, BTreeSet};

use crate::decode::{FlowKind, Instruction, MemExpr, Operand, Reg, RSP};
use crate::image::{BinaryImage, Mode};
use crate::recursive::DisasmResult;

/// Unsigned interval with a constant stride. `guarded` is set once a
/// comparison, mask or constant produced the bound, as opposed to the width
/// of a type.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Interval {
    pub lo: u64,
    pub hi: u64,
    pub stride: u64,
    pub guarded: bool,
}

const SIGNED_MAX: u64 = i64::MAX as u64;

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

impl Interval {
    pub const TOP: Interval = Interval {
        lo: 0,
        hi: u64::MAX,
        stride: 1,
        guarded: false,
    };

    pub fn constant(v: u64) -> Self {
        Interval {
            lo: v,
            hi: v,
            stride: 0,
            guarded: true,
        }
    }

    pub fn range(lo: u64, hi: u64, guarded: bool) -> Self {
        Interval {
            lo,
            hi,
            stride: u64::from(lo != hi),
            guarded,
        }
    }

    pub fn is_top(&self) -> bool {
        self.lo == 0 && self.hi == u64::MAX
    }

    pub fn as_const(&self) -> Option<u64> {
        (self.lo == self.hi).then_some(self.lo)
    }

    pub fn join(&self, other: &Interval) -> Interval {
        let lo = self.lo.min(other.lo);
        let hi = self.hi.max(other.hi);
        let stride = gcd(gcd(self.stride, other.stride), self.lo.abs_diff(other.lo));
        Interval {
            lo,
            hi,
            stride: if lo == hi { 0 } else { stride.max(1) },
            guarded: self.guarded && other.guarded,
        }
    }

    /// Intersection with `[lo, hi]`; `None` when empty.
    pub fn meet(&self, lo: u64, hi: u64) -> Option<Interval> {
        let nlo = self.lo.max(lo);
        let nhi = self.hi.min(hi);
        (nlo <= nhi).then(|| Interval {
            lo: nlo,
            hi: nhi,
            stride: if nlo == nhi { 0 } else { self.stride.max(1) },
            guarded: true,
        })
    }

    pub fn shift(&self, k: i64) -> Interval {
        let lo = (self.lo as i128) + i128::from(k);
        let hi = (self.hi as i128) + i128::from(k);
        if self.is_top() || lo < 0 || hi > u64::MAX as i128 {
            return Interval::TOP;
        }
        Interval {
            lo: lo as u64,
            hi: hi as u64,
            ..*self
        }
    }

    pub fn count(&self) -> u64 {
        self.hi.saturating_sub(self.lo).saturating_add(1)
    }
}

/// Register state; a missing register is unconstrained.
pub type State = BTreeMap<Reg, Interval>;

pub fn get(state: &State, r: Reg) -> Interval {
    state.get(&r).copied().unwrap_or(Interval::TOP)
}

fn set(state: &mut State, r: Reg, v: Interval) {
    if v.is_top() {
        state.remove(&r);
    } else {
        state.insert(r, v);
    }
}

pub fn join_states(a: &State, b: &State) -> State {
    let mut out = State::new();
    for (r, va) in a {
        if let Some(vb) = b.get(r) {
            set(&mut out, *r, va.join(vb));
        }
    }
    out
}

/// Which operations the interpreter models.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Semantics {
    pub model_sub: bool,
    pub model_and: bool,
    pub pc_thunk: bool,
    pub memory_loads: bool,
}

impl Default for Semantics {
    fn default() -> Self {
        Semantics {
            model_sub: true,
            model_and: true,
            pc_thunk: true,
            memory_loads: false,
        }
    }
}

/// The register a `mov (%esp),%reg; ret` thunk loads, if `target` is one.
pub fn pc_thunk_register(image: &BinaryImage, target: u64) -> Option<Reg> {
    let first = crate::decode::decode_at(image, target, image.mode).ok()?;
    let second = crate::decode::decode_at(image, first.end(), image.mode).ok()?;
    if first.mnemonic != "mov" || second.flow != FlowKind::Ret {
        return None;
    }
    let m = first.mem_operand(1)?;
    (m.base == Some(RSP) && m.index.is_none() && m.displacement == 0).then(|| first.reg_operand(0))?
}

const CLOBBERED_X64: [u8; 9] = [0, 1, 2, 6, 7, 8, 9, 10, 11];
const CLOBBERED_X86: [u8; 3] = [0, 1, 2];

/// Constant address of a memory expression under `state`.
pub fn address_of(state: &State, m: &MemExpr) -> Option<u64> {
    let mut a = m.displacement as u64;
    if let Some(b) = m.base {
        a = a.wrapping_add(get(state, b).as_const()?);
    }
    if let Some(i) = m.index {
        a = a.wrapping_add(get(state, i).as_const()?.wrapping_mul(u64::from(m.scale)));
    }
    Some(a)
}

fn mask(mode: Mode, v: u64) -> u64 {
    if mode == Mode::X86 {
        v & 0xffff_ffff
    } else {
        v
    }
}

const NO_WRITE: &[&str] = &["cmp", "test", "push", "bt", "nop", "ret", "jmp", "call", "endbr64", "endbr32"];

/// Applies one instruction to `state`.
pub fn transfer(state: &mut State, ins: &Instruction, image: &BinaryImage, sem: Semantics) {
    let mode = image.mode;
    let m = ins.mnemonic.as_str();
    if ins.flow.is_call() {
        let clobbered: &[u8] = if mode == Mode::X64 { &CLOBBERED_X64 } else { &CLOBBERED_X86 };
        for &r in clobbered {
            state.remove(&Reg::Gpr(r));
        }
        if sem.pc_thunk {
            if let Some(reg) = ins.branch_target.and_then(|t| pc_thunk_register(image, t)) {
                set(state, reg, Interval::constant(ins.end()));
            }
        }
        return;
    }
    if ins.flow != FlowKind::Fallthrough || NO_WRITE.contains(&m) || m.starts_with('j') {
        return;
    }
    let Some(dst) = ins.reg_operand(0) else {
        return;
    };
    let src = ins.operands.get(1).copied();
    let value = match (m, src) {
        ("mov", Some(Operand::Imm(v))) => Interval::constant(v),
        ("mov", Some(Operand::Reg { reg, .. })) => get(state, reg),
        ("mov", Some(Operand::Mem(mem))) if sem.memory_loads => address_of(state, &mem)
            .filter(|&a| image.is_data(a))
            .and_then(|a| image.read_uint(a, u64::from(mem.size.clamp(1, 8))))
            .map(Interval::constant)
            .unwrap_or(Interval::TOP),
        ("lea", Some(Operand::Mem(mem))) => address_of(state, &mem)
            .map(|a| Interval::constant(mask(mode, a)))
            .unwrap_or(Interval::TOP),
        ("movzx", Some(op)) => {
            let w = match op {
                Operand::Reg { width, .. } => width,
                Operand::Mem(mem) => mem.size,
                _ => 0,
            };
            let max = if w >= 8 { u64::MAX } else { (1u64 << (8 * u32::from(w))) - 1 };
            match op {
                Operand::Reg { reg, .. } => {
                    let v = get(state, reg);
                    if v.hi <= max {
                        v
                    } else {
                        Interval::range(0, max, false)
                    }
                }
                _ => Interval::range(0, max, false),
            }
        }
        ("add", Some(Operand::Imm(k))) => get(state, dst).shift(k as i64),
        ("add", Some(Operand::Reg { reg, .. })) => {
            match (get(state, dst).as_const(), get(state, reg).as_const()) {
                (Some(a), Some(b)) => Interval::constant(mask(mode, a.wrapping_add(b))),
                _ => Interval::TOP,
            }
        }
        ("sub", Some(Operand::Imm(k))) if sem.model_sub => get(state, dst).shift(-(k as i64)),
        ("inc", _) => get(state, dst).shift(1),
        ("dec", _) => get(state, dst).shift(-1),
        ("and", Some(Operand::Imm(k))) if sem.model_and => {
            let v = get(state, dst);
            Interval::range(0, v.hi.min(k), true)
        }
        ("xor", Some(Operand::Reg { reg, .. })) if reg == dst => Interval::constant(0),
        _ => Interval::TOP,
    };
    set(state, dst, value);
}

/// Register and constant compared by the flag-setting instruction before a
/// conditional jump.
pub fn flag_setter(ins: &Instruction) -> Option<(Reg, u64)> {
    match ins.mnemonic.as_str() {
        "cmp" | "sub" => Some((ins.reg_operand(0)?, ins.imm_operand(1)?)),
        _ => None,
    }
}

/// Range `[lo, hi]` implied on the compared register when the edge
/// `taken` of `jcc` is followed, given `cmp reg, imm`.
pub fn implied_range(jcc: &str, imm: u64, taken: bool, current: &Interval) -> Option<(u64, u64)> {
    let nonneg = current.hi <= SIGNED_MAX;
    let below = |k: u64| (k > 0).then(|| (0, k - 1));
    let r = match (jcc, taken) {
        ("ja", true) | ("jbe", false) => (imm.checked_add(1)?, u64::MAX),
        ("ja", false) | ("jbe", true) => (0, imm),
        ("jae", true) | ("jb", false) => (imm, u64::MAX),
        ("jae", false) | ("jb", true) => below(imm)?,
        ("je", true) | ("jne", false) => (imm, imm),
        ("jg", true) | ("jle", false) => (imm.checked_add(1)?, SIGNED_MAX),
        ("jge", true) | ("jl", false) => (imm, SIGNED_MAX),
        ("jle", true) | ("jg", false) if nonneg && imm <= SIGNED_MAX => (0, imm),
        ("jl", true) | ("jge", false) if nonneg && imm <= SIGNED_MAX => below(imm)?,
        _ => return None,
    };
    Some(r)
}

/// Refines `state` for the edge from a block ending in `jcc` (preceded by
/// `setter`). Returns `None` when the edge is infeasible.
pub fn refine(state: &State, setter: Option<&Instruction>, jcc: &Instruction, taken: bool) -> Option<State> {
    let mut out = state.clone();
    let cmp = setter.filter(|s| s.mnemonic == "cmp").and_then(flag_setter);
    if let Some((reg, imm)) = cmp {
        let cur = get(state, reg);
        if let Some((lo, hi)) = implied_range(&jcc.mnemonic, imm, taken, &cur) {
            set(&mut out, reg, cur.meet(lo, hi)?);
        }
    }
    Some(out)
}

/// Forward analysis over `region` (block starts). Returns the state at the
/// entry of each reached block.
pub fn analyze_region(
    result: &DisasmResult,
    image: &BinaryImage,
    region: &BTreeSet<u64>,
    sem: Semantics,
) -> BTreeMap<u64, State> {
    let mut preds: BTreeMap<u64, Vec<u64>> = BTreeMap::new();
    for &b in region {
        if let Some(block) = result.block_at(b) {
            for s in &block.successors {
                if region.contains(s) {
                    preds.entry(*s).or_default().push(b);
                }
            }
        }
    }
    let mut input: BTreeMap<u64, State> = BTreeMap::new();
    let mut visits: BTreeMap<u64, u32> = BTreeMap::new();
    let mut work: BTreeSet<u64> = BTreeSet::new();
    for &b in region {
        if !preds.contains_key(&b) {
            input.insert(b, State::new());
            work.insert(b);
        }
    }
    if work.is_empty() {
        if let Some(&first) = region.iter().next() {
            input.insert(first, State::new());
            work.insert(first);
        }
    }
    while let Some(b) = work.pop_first() {
        let Some(block) = result.block_at(b) else {
            continue;
        };
        let mut state = input[&b].clone();
        let instrs: Vec<&Instruction> = result.block_instructions(block).collect();
        for ins in &instrs {
            transfer(&mut state, ins, image, sem);
        }
        let last = instrs.last().copied();
        let setter = instrs.len().checked_sub(2).map(|i| instrs[i]);
        for &s in &block.successors {
            if !region.contains(&s) {
                continue;
            }
            let edge = match last {
                Some(l) if l.flow == FlowKind::CondJump => {
                    let taken = l.branch_target == Some(s);
                    match refine(&state, setter, l, taken) {
                        Some(st) => st,
                        None => continue,
                    }
                }
                _ => state.clone(),
            };
            let n = visits.entry(s).or_insert(0);
            *n += 1;
            let merged = match input.get(&s) {
                None => edge,
                Some(old) => {
                    let mut j = join_states(old, &edge);
                    if *n > 2 {
                        j.retain(|r, v| old.get(r) == Some(v));
                    }
                    if &j == old {
                        continue;
                    }
                    j
                }
            };
            input.insert(s, merged);
            work.insert(s);
        }
    }
    input
}

/// State just before `addr`, which lies in `block_start`'s block.
pub fn state_before(
    result: &DisasmResult,
    image: &BinaryImage,
    block_start: u64,
    entry: &State,
    addr: u64,
    sem: Semantics,
) -> State {
    let mut state = entry.clone();
    if let Some(block) = result.block_at(block_start) {
        for ins in result.block_instructions(block) {
            if ins.vaddr == addr {
                break;
            }
            transfer(&mut state, ins, image, sem);
        }
    }
    state
}
