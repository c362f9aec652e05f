//! A tiny label-resolving byte assembler that records ground truth as it
//! emits.

use std::collections::BTreeMap;

use crate::image::{BinaryImage, Mode, Section, SectionKind, SymbolEntry, SymbolSource};

#[derive(Debug, Clone, Copy)]
enum Fix {
    /// Signed offset from `end` to the label.
    Rel { at: u64, end: u64, width: u8 },
    /// Label address plus addend.
    Abs { at: u64, width: u8, addend: i64 },
    /// Label address minus another label's address.
    Diff { at: u64, width: u8 },
}

struct Buf {
    name: String,
    vaddr: u64,
    kind: SectionKind,
    executable: bool,
    bytes: Vec<u8>,
}

#[derive(Debug, Clone)]
pub(crate) struct PendingXref {
    pub from: u64,
    pub label: String,
    pub addend: i64,
    pub from_code: bool,
}

#[derive(Debug, Clone)]
pub(crate) struct PendingTable {
    pub site: u64,
    pub base: String,
    pub entry_width: u64,
    pub targets: Vec<String>,
}

/// Ground truth that still refers to labels.
#[derive(Debug, Clone, Default)]
pub(crate) struct Truth {
    pub insts: Vec<(u64, u64)>,
    pub pads: Vec<(u64, u64)>,
    pub funcs: Vec<String>,
    pub main: Option<String>,
    pub xrefs: Vec<PendingXref>,
    pub tables: Vec<PendingTable>,
    pub nonret: Vec<String>,
    pub tail_calls: Vec<(u64, String)>,
    pub indirect_calls: Vec<(u64, String)>,
}

pub(crate) struct Asm {
    pub mode: Mode,
    bufs: Vec<Buf>,
    cur: usize,
    labels: BTreeMap<String, u64>,
    fixups: Vec<(Fix, String, Option<String>)>,
    symbols: Vec<(String, String, bool, Option<u64>)>,
    entry: Option<String>,
    open_symbol: Option<usize>,
    pub truth: Truth,
}

/// Resolved program: image plus label-free truth.
pub(crate) struct Built {
    pub image: BinaryImage,
    pub labels: BTreeMap<String, u64>,
    pub truth: Truth,
}

impl Asm {
    pub fn new(mode: Mode) -> Self {
        Asm {
            mode,
            bufs: Vec::new(),
            cur: 0,
            labels: BTreeMap::new(),
            fixups: Vec::new(),
            symbols: Vec::new(),
            entry: None,
            open_symbol: None,
            truth: Truth::default(),
        }
    }

    fn ptr_width(&self) -> u8 {
        self.mode.pointer_size() as u8
    }

    /// Switches to (creating if needed) a section.
    pub fn section(&mut self, name: &str, vaddr: u64, kind: SectionKind) -> &mut Self {
        if let Some(i) = self.bufs.iter().position(|b| b.name == name) {
            self.cur = i;
        } else {
            self.bufs.push(Buf {
                name: name.into(),
                vaddr,
                kind,
                executable: kind == SectionKind::Code,
                bytes: Vec::new(),
            });
            self.cur = self.bufs.len() - 1;
        }
        self
    }

    pub fn text(&mut self, vaddr: u64) -> &mut Self {
        self.section(".text", vaddr, SectionKind::Code)
    }

    pub fn here(&self) -> u64 {
        let b = &self.bufs[self.cur];
        b.vaddr + b.bytes.len() as u64
    }

    fn in_code(&self) -> bool {
        self.bufs[self.cur].executable
    }

    pub fn label(&mut self, name: &str) -> &mut Self {
        let here = self.here();
        self.define(name, here)
    }

    /// Defines a label at an arbitrary address.
    pub fn define(&mut self, name: &str, addr: u64) -> &mut Self {
        let old = self.labels.insert(name.into(), addr);
        assert!(old.is_none(), "label {name} defined twice");
        self
    }

    pub fn entry(&mut self, label: &str) -> &mut Self {
        self.entry = Some(label.into());
        self
    }

    /// Starts a ground-truth function, optionally with a symbol.
    pub fn func(&mut self, name: &str, symbol: bool) -> &mut Self {
        self.label(name);
        self.truth.funcs.push(name.into());
        if symbol {
            self.symbols.push((name.into(), name.into(), true, None));
            self.open_symbol = Some(self.symbols.len() - 1);
        }
        self
    }

    /// Closes the most recent symbol, giving it a size.
    pub fn end_func(&mut self) -> &mut Self {
        let here = self.here();
        if let Some(i) = self.open_symbol.take() {
            self.symbols[i].3 = Some(here);
        }
        self
    }

    pub fn object_symbol(&mut self, name: &str) -> &mut Self {
        self.label(name);
        self.symbols.push((name.into(), name.into(), false, None));
        self
    }

    pub fn main(&mut self, label: &str) -> &mut Self {
        self.truth.main = Some(label.into());
        self
    }

    pub fn nonret(&mut self, label: &str) -> &mut Self {
        self.truth.nonret.push(label.into());
        self
    }

    fn raw(&mut self, bytes: &[u8]) {
        self.bufs[self.cur].bytes.extend_from_slice(bytes);
    }

    /// One instruction of known encoding.
    pub fn i(&mut self, bytes: &[u8]) -> u64 {
        let at = self.here();
        self.raw(bytes);
        self.truth.insts.push((at, bytes.len() as u64));
        at
    }

    fn fix_in_ins(&mut self, prefix: &[u8], width: u8, suffix: &[u8], fix: impl FnOnce(u64, u64) -> Fix, label: &str) -> u64 {
        let at = self.here();
        let patch = at + prefix.len() as u64;
        let end = patch + u64::from(width) + suffix.len() as u64;
        self.raw(prefix);
        self.raw(&vec![0; width as usize]);
        self.raw(suffix);
        self.truth.insts.push((at, end - at));
        self.fixups.push((fix(patch, end), label.into(), None));
        at
    }

    /// Instruction with a rip-relative (or branch) 32-bit displacement to
    /// `label`; `xref` records it as a reference.
    pub fn rel(&mut self, prefix: &[u8], label: &str, suffix: &[u8], xref: bool) -> u64 {
        let at = self.fix_in_ins(prefix, 4, suffix, |at, end| Fix::Rel { at, end, width: 4 }, label);
        if xref {
            self.xref_from(at, label, 0);
        }
        at
    }

    /// Instruction with an absolute 32-bit field holding `label + addend`.
    pub fn abs(&mut self, prefix: &[u8], label: &str, addend: i64, suffix: &[u8], xref: bool) -> u64 {
        let at = self.fix_in_ins(prefix, 4, suffix, |at, _| Fix::Abs { at, width: 4, addend }, label);
        if xref {
            self.xref_from(at, label, addend);
        }
        at
    }

    /// Instruction with a 32-bit field holding `label - base`.
    pub fn diff(&mut self, prefix: &[u8], label: &str, base: &str, suffix: &[u8]) -> u64 {
        let at = self.here();
        let patch = at + prefix.len() as u64;
        self.raw(prefix);
        self.raw(&[0; 4]);
        self.raw(suffix);
        self.truth.insts.push((at, self.here() - at));
        self.fixups.push((Fix::Diff { at: patch, width: 4 }, label.into(), Some(base.into())));
        at
    }

    fn xref_from(&mut self, from: u64, label: &str, addend: i64) {
        let from_code = self.in_code();
        self.truth.xrefs.push(PendingXref {
            from,
            label: label.into(),
            addend,
            from_code,
        });
    }

    pub fn call(&mut self, label: &str) -> u64 {
        self.rel(&[0xe8], label, &[], false)
    }

    pub fn jmp(&mut self, label: &str) -> u64 {
        self.rel(&[0xe9], label, &[], false)
    }

    /// `jcc rel32`; `cc` is the low nibble (e.g. 0x7 for `ja`).
    pub fn jcc(&mut self, cc: u8, label: &str) -> u64 {
        self.rel(&[0x0f, 0x80 | cc], label, &[], false)
    }

    pub fn jmp8(&mut self, label: &str) -> u64 {
        self.fix_in_ins(&[0xeb], 1, &[], |at, end| Fix::Rel { at, end, width: 1 }, label)
    }

    pub fn jcc8(&mut self, cc: u8, label: &str) -> u64 {
        self.fix_in_ins(&[0x70 | cc], 1, &[], |at, end| Fix::Rel { at, end, width: 1 }, label)
    }

    pub fn tail_jmp(&mut self, label: &str) -> u64 {
        let at = self.jmp(label);
        self.truth.tail_calls.push((at, label.into()));
        at
    }

    pub fn tail_jcc(&mut self, cc: u8, label: &str) -> u64 {
        let at = self.jcc(cc, label);
        self.truth.tail_calls.push((at, label.into()));
        at
    }

    /// Records that the indirect call at `site` reaches `label`.
    pub fn indirect_call(&mut self, site: u64, label: &str) -> &mut Self {
        self.truth.indirect_calls.push((site, label.into()));
        self
    }

    pub fn table(&mut self, site: u64, base: &str, entry_width: u64, targets: &[&str]) -> &mut Self {
        self.truth.tables.push(PendingTable {
            site,
            base: base.into(),
            entry_width,
            targets: targets.iter().map(|s| s.to_string()).collect(),
        });
        self
    }

    /// Bytes that are neither code nor padding.
    pub fn data(&mut self, bytes: &[u8]) -> u64 {
        let at = self.here();
        self.raw(bytes);
        at
    }

    pub fn pad(&mut self, bytes: &[u8]) -> u64 {
        let at = self.here();
        self.raw(bytes);
        if !bytes.is_empty() {
            self.truth.pads.push((at, bytes.len() as u64));
        }
        at
    }

    /// Pads with `byte` up to `addr`.
    pub fn pad_to(&mut self, addr: u64, byte: u8) -> &mut Self {
        let here = self.here();
        assert!(addr >= here, "pad_to {addr:#x} is behind {here:#x}");
        self.pad(&vec![byte; (addr - here) as usize]);
        self
    }

    pub fn align(&mut self, n: u64, byte: u8) -> &mut Self {
        let here = self.here();
        let to = here.div_ceil(n) * n;
        self.pad_to(to, byte)
    }

    /// Pointer-sized data holding `label`, recorded as a reference.
    pub fn ptr(&mut self, label: &str) -> u64 {
        let w = self.ptr_width();
        let at = self.here();
        self.raw(&vec![0; w as usize]);
        self.fixups.push((Fix::Abs { at, width: w, addend: 0 }, label.into(), None));
        self.xref_from(at, label, 0);
        at
    }

    /// 32-bit entry holding `label - base`.
    pub fn rel_entry(&mut self, label: &str, base: &str) -> u64 {
        let at = self.here();
        self.raw(&[0; 4]);
        self.fixups.push((Fix::Diff { at, width: 4 }, label.into(), Some(base.into())));
        at
    }

    pub fn finish(self, path: &str) -> Built {
        let Asm {
            mode,
            mut bufs,
            labels,
            fixups,
            symbols,
            entry,
            truth,
            ..
        } = self;
        let addr = |l: &str| *labels.get(l).unwrap_or_else(|| panic!("{path}: undefined label {l}"));
        for (fix, label, other) in fixups {
            let target = addr(&label);
            let (at, width, value) = match fix {
                Fix::Rel { at, end, width } => (at, width, target.wrapping_sub(end)),
                Fix::Abs { at, width, addend } => (at, width, target.wrapping_add(addend as u64)),
                Fix::Diff { at, width } => {
                    let base = addr(other.as_deref().expect("diff base"));
                    (at, width, target.wrapping_sub(base))
                }
            };
            if width == 1 {
                let d = value as i64;
                assert!((-128..128).contains(&d), "{path}: rel8 to {label} out of range");
            }
            let buf = bufs
                .iter_mut()
                .find(|b| at >= b.vaddr && at < b.vaddr + b.bytes.len() as u64)
                .expect("fixup inside a section");
            let off = (at - buf.vaddr) as usize;
            buf.bytes[off..off + width as usize].copy_from_slice(&value.to_le_bytes()[..width as usize]);
        }
        let sections = bufs
            .into_iter()
            .map(|b| Section {
                name: b.name,
                vaddr: b.vaddr,
                size: b.bytes.len() as u64,
                bytes: b.bytes,
                kind: b.kind,
                executable: b.executable,
            })
            .collect();
        let symbols = symbols
            .into_iter()
            .map(|(label, name, is_function, end)| {
                let vaddr = addr(&label);
                SymbolEntry {
                    name,
                    vaddr,
                    size: end.map_or(0, |e| e - vaddr),
                    is_function,
                    source: SymbolSource::Symtab,
                }
            })
            .collect();
        let entry = addr(entry.as_deref().expect("entry label"));
        let image = BinaryImage::new(path, mode, sections, symbols, entry)
            .unwrap_or_else(|e| panic!("{path}: {e}"));
        Built { image, labels, truth }
    }
}
