//! Linear sweep with three error-handling policies.

use std::collections::{BTreeMap, BTreeSet};

use crate::decode::{decode_bytes, FlowKind, Instruction};
use crate::image::{code_regions, ByteSource, BinaryImage, Mode, Span};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SweepPolicy {
    /// Advance one byte past an undecodable address.
    SkipByte,
    /// Replace padding after the preceding transfer and sweep again.
    PsiRepair,
    /// Drop the bytes around the error up to the next resynchronization point.
    ExcludeRegion,
}

impl SweepPolicy {
    pub fn name(self) -> &'static str {
        match self {
            SweepPolicy::SkipByte => "skip_byte",
            SweepPolicy::PsiRepair => "psi_repair",
            SweepPolicy::ExcludeRegion => "exclude_region",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "skip_byte" => Some(SweepPolicy::SkipByte),
            "psi_repair" => Some(SweepPolicy::PsiRepair),
            "exclude_region" => Some(SweepPolicy::ExcludeRegion),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ErrorCause {
    BadOpcode,
    InvalidTransfer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SweepError {
    /// The undecodable address, or the target of an invalid transfer.
    pub vaddr: u64,
    pub cause: ErrorCause,
    pub repaired: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SweepResult {
    pub instructions: BTreeMap<u64, Instruction>,
    pub errors: Vec<SweepError>,
    pub excluded: Vec<Span>,
    /// Spans overwritten with nops in the scratch copy.
    pub patched: Vec<Span>,
}

/// Copy-on-write view over an image's section bytes.
pub struct Scratch<'a> {
    image: &'a BinaryImage,
    overlay: Vec<Option<Vec<u8>>>,
}

impl<'a> Scratch<'a> {
    pub fn new(image: &'a BinaryImage) -> Self {
        Scratch {
            image,
            overlay: vec![None; image.sections.len()],
        }
    }

    /// Overwrites `span` with single-byte nops. Returns whether any byte changed.
    pub fn fill_nops(&mut self, span: Span) -> bool {
        let mut changed = false;
        for (i, sec) in self.image.sections.iter().enumerate() {
            let lo = span.start.max(sec.vaddr);
            let hi = span.end.min(sec.end());
            if lo >= hi {
                continue;
            }
            let bytes = self.overlay[i].get_or_insert_with(|| sec.bytes.clone());
            for b in &mut bytes[(lo - sec.vaddr) as usize..(hi - sec.vaddr) as usize] {
                if *b != 0x90 {
                    *b = 0x90;
                    changed = true;
                }
            }
        }
        changed
    }
}

impl ByteSource for Scratch<'_> {
    fn bytes_at(&self, vaddr: u64) -> Option<&[u8]> {
        let idx = self.image.sections.iter().position(|s| s.contains(vaddr))?;
        let sec = &self.image.sections[idx];
        let bytes = self.overlay[idx].as_deref().unwrap_or(&sec.bytes);
        Some(&bytes[(vaddr - sec.vaddr) as usize..])
    }
}

fn decode_bounded<S: ByteSource + ?Sized>(
    src: &S,
    vaddr: u64,
    end: u64,
    mode: Mode,
) -> Option<Instruction> {
    let bytes = src.bytes_at(vaddr)?;
    let avail = bytes.len().min((end - vaddr) as usize);
    decode_bytes(&bytes[..avail], vaddr, mode).ok()
}

/// Maximal run of padding starting at `vaddr`: 0x00, 0xcc, 0x90 bytes and
/// multi-byte nop encodings.
pub fn detect_padding<S: ByteSource + ?Sized>(src: &S, vaddr: u64, mode: Mode) -> Option<Span> {
    let bytes = src.bytes_at(vaddr)?;
    let end = vaddr + bytes.len() as u64;
    let mut a = vaddr;
    while a < end {
        let b = bytes[(a - vaddr) as usize];
        if matches!(b, 0x00 | 0xcc | 0x90) {
            a += 1;
            continue;
        }
        match decode_bounded(src, a, end, mode) {
            Some(ins) if is_nop_encoding(&ins, mode) => a += u64::from(ins.length),
            _ => break,
        }
    }
    (a > vaddr).then(|| Span::new(vaddr, a))
}

fn is_nop_encoding(ins: &Instruction, mode: Mode) -> bool {
    if ins.mnemonic == "nop" {
        return true;
    }
    if mode != Mode::X86 {
        return false;
    }
    // 32-bit assemblers pad with `lea 0(%esi),%esi` and `mov %esi,%esi`.
    match ins.mnemonic.as_str() {
        "lea" => match (ins.reg_operand(0), ins.mem_operand(1)) {
            (Some(dst), Some(m)) => {
                m.displacement == 0
                    && m.base == Some(dst)
                    && (m.index.is_none() || (m.index == Some(crate::decode::RSP)))
            }
            _ => false,
        },
        "mov" => matches!(
            (ins.reg_operand(0), ins.reg_operand(1)),
            (Some(a), Some(b)) if a == b
        ),
        _ => false,
    }
}

/// Sweeps `range` front to back, skipping one byte on each decode failure.
fn sweep_range<S: ByteSource + ?Sized>(
    src: &S,
    range: Span,
    mode: Mode,
    out: &mut BTreeMap<u64, Instruction>,
    errors: &mut Vec<u64>,
) {
    let mut a = range.start;
    while a < range.end {
        match decode_bounded(src, a, range.end, mode) {
            Some(ins) => {
                a += u64::from(ins.length);
                out.insert(ins.vaddr, ins);
            }
            None => {
                errors.push(a);
                a += 1;
            }
        }
    }
}

/// Linear sweep over `ranges` (typically from [`code_regions`]).
pub fn linear_sweep(image: &BinaryImage, ranges: &[Span], policy: SweepPolicy) -> SweepResult {
    match policy {
        SweepPolicy::SkipByte => {
            let mut result = SweepResult::default();
            let mut errs = Vec::new();
            for r in ranges {
                sweep_range(image, *r, image.mode, &mut result.instructions, &mut errs);
            }
            result.errors = errs
                .into_iter()
                .map(|vaddr| SweepError {
                    vaddr,
                    cause: ErrorCause::BadOpcode,
                    repaired: false,
                })
                .collect();
            result
        }
        SweepPolicy::PsiRepair => psi_sweep(image, ranges),
        SweepPolicy::ExcludeRegion => exclude_sweep(image, ranges),
    }
}

/// Sweeps the image's default code regions.
pub fn sweep_image(image: &BinaryImage, policy: SweepPolicy) -> SweepResult {
    linear_sweep(image, &code_regions(image), policy)
}

fn psi_sweep(image: &BinaryImage, ranges: &[Span]) -> SweepResult {
    let mode = image.mode;
    let mut scratch = Scratch::new(image);
    let mut seen: BTreeSet<(u64, ErrorCause)> = BTreeSet::new();
    let mut patched = Vec::new();
    loop {
        let mut instructions = BTreeMap::new();
        let mut bad = Vec::new();
        for r in ranges {
            sweep_range(&scratch, *r, mode, &mut instructions, &mut bad);
        }
        let current = current_errors(image, &instructions, &bad);
        seen.extend(current.iter().copied());

        let mut progressed = false;
        for &(vaddr, cause) in &current {
            let error = SweepError {
                vaddr,
                cause,
                repaired: false,
            };
            let range = ranges.iter().find(|r| r.contains(vaddr)).copied();
            if let Some(span) = psi_repair(&scratch, mode, &error, &instructions, range) {
                if scratch.fill_nops(span) {
                    patched.push(span);
                    progressed = true;
                }
            }
        }
        if !progressed {
            let remaining: BTreeSet<_> = current.into_iter().collect();
            let errors = seen
                .iter()
                .map(|&(vaddr, cause)| SweepError {
                    vaddr,
                    cause,
                    repaired: !remaining.contains(&(vaddr, cause)),
                })
                .collect();
            patched.sort();
            return SweepResult {
                instructions,
                errors,
                excluded: Vec::new(),
                patched,
            };
        }
    }
}

fn current_errors(
    image: &BinaryImage,
    instructions: &BTreeMap<u64, Instruction>,
    bad: &[u64],
) -> Vec<(u64, ErrorCause)> {
    let mut out: Vec<(u64, ErrorCause)> =
        bad.iter().map(|&a| (a, ErrorCause::BadOpcode)).collect();
    let mut targets = BTreeSet::new();
    for ins in instructions.values() {
        if let Some(t) = ins.branch_target {
            if image.is_executable(t) && !instructions.contains_key(&t) {
                targets.insert(t);
            }
        }
    }
    out.extend(targets.into_iter().map(|t| (t, ErrorCause::InvalidTransfer)));
    out
}

/// Finds the span to nop out for one sweep error, or `None` when the repair
/// is declined.
///
/// For a bad opcode, walks back to the nearest `jmp`/`ret` and takes the
/// padding right after it. For an invalid transfer, walks back from the
/// target looking for a zero-started instruction after the last such
/// transfer and takes the padding starting there.
pub fn psi_repair<S: ByteSource + ?Sized>(
    src: &S,
    mode: Mode,
    error: &SweepError,
    prior: &BTreeMap<u64, Instruction>,
    range: Option<Span>,
) -> Option<Span> {
    let floor = range.map_or(0, |r| r.start);
    let is_stop = |i: &Instruction| {
        matches!(
            i.flow,
            FlowKind::JumpDirect | FlowKind::JumpIndirect | FlowKind::Ret
        )
    };
    match error.cause {
        ErrorCause::BadOpcode => {
            let transfer = prior
                .range(floor..error.vaddr)
                .rev()
                .map(|(_, i)| i)
                .find(|i| is_stop(i))?;
            let pad = detect_padding(src, transfer.end(), mode)?;
            Some(Span::new(pad.start, pad.end.min(error.vaddr.max(pad.start + 1))))
                .filter(|s| !s.is_empty())
        }
        ErrorCause::InvalidTransfer => {
            let zero = prior
                .range(floor..error.vaddr)
                .rev()
                .map(|(_, i)| i)
                .take_while(|i| !is_stop(i))
                .filter(|i| i.first_byte == 0)
                .last()?;
            let pad = detect_padding(src, zero.vaddr, mode)?;
            Some(Span::new(pad.start, pad.end.min(error.vaddr).max(pad.start + 1)))
        }
    }
}

fn exclude_sweep(image: &BinaryImage, ranges: &[Span]) -> SweepResult {
    let mode = image.mode;
    let mut symbol_starts: Vec<u64> = image
        .function_symbols()
        .map(|s| s.vaddr)
        .filter(|&a| image.is_executable(a))
        .collect();
    symbol_starts.sort_unstable();
    symbol_starts.dedup();

    let mut result = SweepResult::default();
    for r in ranges {
        let mut local: BTreeMap<u64, Instruction> = BTreeMap::new();
        let mut a = r.start;
        while a < r.end {
            if let Some(ins) = decode_bounded(image, a, r.end, mode) {
                a += u64::from(ins.length);
                local.insert(ins.vaddr, ins);
                continue;
            }
            result.errors.push(SweepError {
                vaddr: a,
                cause: ErrorCause::BadOpcode,
                repaired: false,
            });
            let from = local
                .values()
                .rev()
                .find(|i| !i.flow.falls_through())
                .map_or(r.start, Instruction::end);
            let section_end = image.section_at(a).map_or(r.end, |s| s.end());
            let resync = symbol_starts
                .iter()
                .copied()
                .find(|&s| s > a)
                .map_or(section_end, |s| s.min(section_end))
                .min(r.end);
            local.retain(|&k, _| k < from);
            result.excluded.push(Span::new(from, resync));
            a = resync;
        }
        result.instructions.extend(local);
    }
    result.excluded.sort();
    result
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::{Section, SectionKind};

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
    fn clean_range_tiles() {
        let img = image(&[0x55, 0x48, 0x89, 0xe5, 0x5d, 0xc3]);
        for p in [SweepPolicy::SkipByte, SweepPolicy::PsiRepair, SweepPolicy::ExcludeRegion] {
            let r = sweep_image(&img, p);
            assert!(r.errors.is_empty());
            let addrs: Vec<u64> = r.instructions.keys().copied().collect();
            assert_eq!(addrs, vec![0x1000, 0x1001, 0x1004, 0x1005]);
        }
    }

    #[test]
    fn padding_runs() {
        let img = image(&[0x00, 0x00, 0x00, 0xc3]);
        assert_eq!(detect_padding(&img, 0x1000, Mode::X64), Some(Span::new(0x1000, 0x1003)));
        assert_eq!(detect_padding(&img, 0x1003, Mode::X64), None);
        let nopw = [0x66, 0x2e, 0x0f, 0x1f, 0x84, 0, 0, 0, 0, 0, 0xc3];
        let img = image(&nopw);
        assert_eq!(detect_padding(&img, 0x1000, Mode::X64), Some(Span::new(0x1000, 0x100a)));
    }

    #[test]
    fn psi_repairs_zero_padding_after_ret() {
        // f: push rbp; mov rbp,rsp; pop rbp; ret; 00; g: movl $1,(%rsi); ret
        let code = [
            0x55, 0x48, 0x89, 0xe5, 0x5d, 0xc3, 0x00, 0xc7, 0x06, 0x01, 0, 0, 0, 0xc3,
        ];
        let img = image(&code);
        let skip = sweep_image(&img, SweepPolicy::SkipByte);
        assert!(!skip.errors.is_empty());
        let psi = sweep_image(&img, SweepPolicy::PsiRepair);
        assert!(psi.errors.iter().all(|e| e.repaired));
        assert!(psi.instructions.contains_key(&0x1007));
        assert_eq!(psi.patched, vec![Span::new(0x1006, 0x1007)]);
    }

    #[test]
    fn error_without_prior_transfer_is_declined() {
        let img = image(&[0x06, 0x90, 0xc3]);
        let psi = sweep_image(&img, SweepPolicy::PsiRepair);
        assert_eq!(psi.errors.len(), 1);
        assert!(!psi.errors[0].repaired);
    }

    #[test]
    fn exclude_region_drops_to_section_end() {
        let img = image(&[0xc3, 0x90, 0x06, 0x90, 0xc3]);
        let r = sweep_image(&img, SweepPolicy::ExcludeRegion);
        assert_eq!(r.excluded, vec![Span::new(0x1001, 0x1005)]);
        assert_eq!(r.instructions.keys().copied().collect::<Vec<_>>(), vec![0x1000]);
    }
}
