//! Function entry identification.

pub mod eh_frame;

use std::collections::BTreeMap;

use crate::config::{MainMethod, StrategyConfig};
use crate::decode::{decode_at, FlowKind, Instruction, Operand, Reg, RDI};
use crate::image::{BinaryImage, ByteSource, Mode, Span};
use crate::recursive::DisasmResult;

pub use eh_frame::{eh_frame_entries, EhFrameError, Fde};

/// Where a function entry came from, strongest first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EntrySource {
    Symbol,
    EntryPoint,
    EhFrame,
    MainArg,
    MainPattern,
    CallTarget,
    TailCallTarget,
    Prologue,
    ScanBegin,
}

impl EntrySource {
    pub fn name(self) -> &'static str {
        match self {
            EntrySource::Symbol => "symbol",
            EntrySource::EntryPoint => "entry_point",
            EntrySource::EhFrame => "eh_frame",
            EntrySource::MainArg => "main_arg",
            EntrySource::MainPattern => "main_pattern",
            EntrySource::CallTarget => "call_target",
            EntrySource::TailCallTarget => "tail_call_target",
            EntrySource::Prologue => "prologue",
            EntrySource::ScanBegin => "scan_begin",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [
            EntrySource::Symbol,
            EntrySource::EntryPoint,
            EntrySource::EhFrame,
            EntrySource::MainArg,
            EntrySource::MainPattern,
            EntrySource::CallTarget,
            EntrySource::TailCallTarget,
            EntrySource::Prologue,
            EntrySource::ScanBegin,
        ]
        .into_iter()
        .find(|e| e.name() == s)
    }

    fn rank(self) -> u8 {
        match self {
            EntrySource::Symbol | EntrySource::EntryPoint => 0,
            EntrySource::EhFrame => 1,
            EntrySource::MainArg | EntrySource::MainPattern => 2,
            EntrySource::CallTarget => 3,
            EntrySource::TailCallTarget => 4,
            EntrySource::Prologue => 5,
            EntrySource::ScanBegin => 6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FunctionEntry {
    pub vaddr: u64,
    pub source: EntrySource,
}

/// Straight-line instructions of `_start` up to and including the first call.
fn startup_prefix(image: &BinaryImage) -> Option<Vec<Instruction>> {
    let mut out = Vec::new();
    let mut a = image.entry_point;
    for _ in 0..64 {
        let ins = decode_at(image, a, image.mode).ok()?;
        let flow = ins.flow;
        a = ins.end();
        out.push(ins);
        if flow.is_call() {
            return Some(out);
        }
        if !flow.falls_through() || flow == FlowKind::CondJump {
            return None;
        }
    }
    None
}

/// Tracks the value of `reg` backwards from the end of `prefix`.
fn constant_in_register(prefix: &[Instruction], mut reg: Reg) -> Option<u64> {
    for ins in prefix.iter().rev() {
        if ins.reg_operand(0) != Some(reg) {
            continue;
        }
        match (ins.mnemonic.as_str(), ins.operands.get(1)) {
            ("mov", Some(Operand::Imm(v))) => return Some(*v),
            ("lea", Some(Operand::Mem(m))) => return m.absolute(),
            ("mov", Some(Operand::Reg { reg: src, .. })) => reg = *src,
            _ => return None,
        }
    }
    None
}

/// Locates `main` from the argument passed by `_start` to the libc
/// startup routine.
pub fn find_main(image: &BinaryImage, method: MainMethod) -> Option<u64> {
    let prefix = startup_prefix(image)?;
    let (_, before) = prefix.split_last()?;
    let found = match method {
        MainMethod::Off => None,
        MainMethod::ArgPropagation => match image.mode {
            Mode::X64 => constant_in_register(before, RDI),
            Mode::X86 => {
                let push = before.iter().rev().find(|i| i.mnemonic == "push")?;
                match push.operands.first()? {
                    Operand::Imm(v) => Some(*v),
                    Operand::Reg { reg, .. } => {
                        let idx = before.iter().position(|i| std::ptr::eq(i, push))?;
                        constant_in_register(&before[..idx], *reg)
                    }
                    _ => None,
                }
            }
        },
        MainMethod::BytePattern => {
            let last = before.last()?;
            let bytes = image.bytes_at(last.vaddr)?;
            let (prefix_len, pattern): (usize, &[u8]) = match image.mode {
                Mode::X64 => (3, &[0x48, 0xc7, 0xc7]),
                Mode::X86 => (1, &[0x68]),
            };
            if bytes.starts_with(pattern) && bytes.len() >= prefix_len + 4 {
                let imm = &bytes[prefix_len..prefix_len + 4];
                Some(u64::from(u32::from_le_bytes(imm.try_into().ok()?)))
            } else {
                None
            }
        }
    };
    found.filter(|&m| image.is_executable(m))
}

struct Prologue {
    name: &'static str,
    mode: Option<Mode>,
    /// Byte pattern; `None` entries match any byte in `alts`.
    parts: &'static [&'static [u8]],
}

const PUSH_ANY: &[u8] = &[0x50, 0x51, 0x52, 0x53, 0x54, 0x55, 0x56, 0x57];

const PROLOGUES: &[Prologue] = &[
    Prologue {
        name: "endbr64 push rbp; mov rsp,rbp",
        mode: Some(Mode::X64),
        parts: &[&[0xf3], &[0x0f], &[0x1e], &[0xfa], &[0x55], &[0x48], &[0x89, 0x8b], &[0xe5, 0xec]],
    },
    Prologue {
        name: "endbr32 push ebp; mov esp,ebp",
        mode: Some(Mode::X86),
        parts: &[&[0xf3], &[0x0f], &[0x1e], &[0xfb], &[0x55], &[0x89, 0x8b], &[0xe5, 0xec]],
    },
    Prologue {
        name: "push rbp; mov rsp,rbp",
        mode: Some(Mode::X64),
        parts: &[&[0x55], &[0x48], &[0x89, 0x8b], &[0xe5, 0xec]],
    },
    Prologue {
        name: "push reg; sub imm,rsp",
        mode: Some(Mode::X64),
        parts: &[PUSH_ANY, &[0x48], &[0x83, 0x81], &[0xec]],
    },
    Prologue {
        name: "push reg; mov between frame and stack pointer",
        mode: None,
        parts: &[PUSH_ANY, &[0x89, 0x8b], &[0xe5, 0xec]],
    },
    Prologue {
        name: "push reg; sub imm,esp",
        mode: Some(Mode::X86),
        parts: &[PUSH_ANY, &[0x83, 0x81], &[0xec]],
    },
];

fn matches_prologue(bytes: &[u8], mode: Mode) -> Option<&'static str> {
    PROLOGUES
        .iter()
        .filter(|p| p.mode.is_none_or(|m| m == mode))
        .find(|p| {
            bytes.len() >= p.parts.len()
                && p.parts.iter().zip(bytes).all(|(alts, b)| alts.contains(b))
        })
        .map(|p| p.name)
}

/// Addresses inside `gaps` where a prologue pattern starts and decodes.
pub fn match_prologues(image: &BinaryImage, gaps: &[Span]) -> Vec<u64> {
    let mut out = Vec::new();
    for gap in gaps {
        for a in gap.start..gap.end {
            let Some(bytes) = image.bytes_at(a) else {
                continue;
            };
            let window = &bytes[..bytes.len().min((gap.end - a) as usize)];
            if matches_prologue(window, image.mode).is_some()
                && decode_at(image, a, image.mode).is_ok()
            {
                out.push(a);
            }
        }
    }
    out
}

/// Name of the pattern matching at `addr`, if any.
pub fn prologue_at(image: &BinaryImage, addr: u64) -> Option<&'static str> {
    matches_prologue(image.bytes_at(addr)?, image.mode)
}

/// Inputs gathered by the pipeline for entry collection.
#[derive(Debug, Clone, Default)]
pub struct EntryEvidence {
    pub main: Option<(u64, EntrySource)>,
    pub eh_frame: Vec<u64>,
    pub indirect_call_targets: Vec<u64>,
    pub tail_call_targets: Vec<u64>,
}

/// Unions every enabled entry source; the strongest source wins on
/// collisions. Only decoded instruction starts are kept.
pub fn collect_entries(
    image: &BinaryImage,
    result: &DisasmResult,
    evidence: &EntryEvidence,
    config: &StrategyConfig,
) -> Vec<FunctionEntry> {
    let mut best: BTreeMap<u64, EntrySource> = BTreeMap::new();
    let mut add = |a: u64, s: EntrySource| {
        best.entry(a)
            .and_modify(|cur| {
                if s.rank() < cur.rank() {
                    *cur = s;
                }
            })
            .or_insert(s);
    };
    for sym in image.function_symbols() {
        add(sym.vaddr, EntrySource::Symbol);
    }
    if image.is_executable(image.entry_point) {
        add(image.entry_point, EntrySource::EntryPoint);
    }
    if let Some((m, src)) = evidence.main {
        if config.main_method != MainMethod::Off {
            add(m, src);
        }
    }
    if config.eh_frame {
        for &a in &evidence.eh_frame {
            add(a, EntrySource::EhFrame);
        }
    }
    if config.call_targets {
        for ins in result.instructions.values() {
            if ins.flow == FlowKind::CallDirect {
                if let Some(t) = ins.branch_target {
                    add(t, EntrySource::CallTarget);
                }
            }
        }
    }
    if config.indirect_call_targets {
        for &a in &evidence.indirect_call_targets {
            add(a, EntrySource::CallTarget);
        }
    }
    if config.tailcall_targets {
        for &a in &evidence.tail_call_targets {
            add(a, EntrySource::TailCallTarget);
        }
    }
    if config.prologue_entries {
        for &a in &result.prologue_hits {
            add(a, EntrySource::Prologue);
        }
    }
    if config.scan_begin_entries {
        for &a in &result.scan_begins {
            add(a, EntrySource::ScanBegin);
        }
    }
    best.into_iter()
        .filter(|(a, _)| result.instructions.contains_key(a))
        .map(|(vaddr, source)| FunctionEntry { vaddr, source })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::{Section, SectionKind};

    fn image(code: &[u8], mode: Mode) -> BinaryImage {
        BinaryImage::new(
            "t",
            mode,
            vec![Section {
                name: ".text".into(),
                vaddr: 0x40e000,
                size: code.len() as u64,
                bytes: code.to_vec(),
                kind: SectionKind::Code,
                executable: true,
            }],
            vec![],
            0x40e000,
        )
        .unwrap()
    }

    #[test]
    fn prologue_patterns() {
        assert!(matches_prologue(&[0x55, 0x48, 0x89, 0xe5], Mode::X64).is_some());
        assert!(matches_prologue(&[0x55, 0x48, 0x8b, 0xec], Mode::X64).is_some());
        assert!(matches_prologue(&[0x50, 0x89, 0xec], Mode::X86).is_some());
        assert!(matches_prologue(&[0x00, 0x00, 0x00], Mode::X64).is_none());
        assert!(matches_prologue(&[0xc3], Mode::X64).is_none());
    }

    #[test]
    fn no_call_in_start_means_no_main() {
        let img = image(&[0x48, 0xc7, 0xc7, 0xe2, 0xe0, 0x40, 0x00, 0xc3], Mode::X64);
        assert_eq!(find_main(&img, MainMethod::ArgPropagation), None);
        assert_eq!(find_main(&img, MainMethod::BytePattern), None);
    }

    #[test]
    fn register_copy_is_followed() {
        // mov $0x40e010,%rax; mov %rax,%rdi; call *%rax; ...
        let mut code = vec![0x48, 0xc7, 0xc0, 0x10, 0xe0, 0x40, 0x00, 0x48, 0x89, 0xc7, 0xff, 0xd0];
        code.resize(0x20, 0xc3);
        let img = image(&code, Mode::X64);
        assert_eq!(find_main(&img, MainMethod::ArgPropagation), Some(0x40e010));
        assert_eq!(find_main(&img, MainMethod::BytePattern), None);
    }

    #[test]
    fn x86_push_immediate() {
        // push $0x40e010; call rel32
        let mut code = vec![0x68, 0x10, 0xe0, 0x40, 0x00, 0xe8, 0x10, 0, 0, 0];
        code.resize(0x30, 0xc3);
        let img = image(&code, Mode::X86);
        assert_eq!(find_main(&img, MainMethod::ArgPropagation), Some(0x40e010));
        assert_eq!(find_main(&img, MainMethod::BytePattern), Some(0x40e010));
    }
}
