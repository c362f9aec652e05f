//! Cross-reference recovery: candidates, classification, types and
//! address tables.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use crate::config::{Alignment, StrategyConfig, StringOverlap};
use crate::decode::{Operand, Reg};
use crate::image::{read_le, BinaryImage, ByteSource, SectionKind, Span};
use crate::recursive::{gap_regions, DisasmResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum XrefKind {
    C2c,
    C2d,
    D2c,
    D2d,
}

impl XrefKind {
    pub fn name(self) -> &'static str {
        match self {
            XrefKind::C2c => "c2c",
            XrefKind::C2d => "c2d",
            XrefKind::D2c => "d2c",
            XrefKind::D2d => "d2d",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "c2c" => Some(XrefKind::C2c),
            "c2d" => Some(XrefKind::C2d),
            "d2c" => Some(XrefKind::D2c),
            "d2d" => Some(XrefKind::D2d),
            _ => None,
        }
    }

    pub fn new(from_code: bool, to_code: bool) -> Self {
        match (from_code, to_code) {
            (true, true) => XrefKind::C2c,
            (true, false) => XrefKind::C2d,
            (false, true) => XrefKind::D2c,
            (false, false) => XrefKind::D2d,
        }
    }

    pub fn from_code(self) -> bool {
        matches!(self, XrefKind::C2c | XrefKind::C2d)
    }

    pub fn to_code(self) -> bool {
        matches!(self, XrefKind::C2c | XrefKind::D2c)
    }
}

impl fmt::Display for XrefKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum XrefOrigin {
    Operand,
    DataUnit,
    AddressTable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Xref {
    pub from: u64,
    pub to: u64,
    pub kind: XrefKind,
    pub width: u8,
    pub origin: XrefOrigin,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CandidateOrigin {
    Operand,
    DataUnit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Candidate {
    pub from: u64,
    pub value: u64,
    pub width: u8,
    pub aligned: bool,
    pub origin: CandidateOrigin,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Rejection {
    TooSmall,
    MagicValue,
    NotEntry,
    OutOfRegion,
    FloatTyped,
    StringOverlap,
    TableTooSmall,
}

impl Rejection {
    pub fn name(self) -> &'static str {
        match self {
            Rejection::TooSmall => "too_small",
            Rejection::MagicValue => "magic_value",
            Rejection::NotEntry => "not_entry",
            Rejection::OutOfRegion => "out_of_region",
            Rejection::FloatTyped => "float_typed",
            Rejection::StringOverlap => "string_overlap",
            Rejection::TableTooSmall => "table_too_small",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [
            Rejection::TooSmall,
            Rejection::MagicValue,
            Rejection::NotEntry,
            Rejection::OutOfRegion,
            Rejection::FloatTyped,
            Rejection::StringOverlap,
            Rejection::TableTooSmall,
        ]
        .into_iter()
        .find(|r| r.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct AddressTable {
    pub start: u64,
    pub entries: Vec<u64>,
    pub entry_width: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TypeKind {
    Float,
    String,
    Pointer,
    ArithmeticSeq,
}

impl TypeKind {
    pub fn name(self) -> &'static str {
        match self {
            TypeKind::Float => "float",
            TypeKind::String => "string",
            TypeKind::Pointer => "pointer",
            TypeKind::ArithmeticSeq => "arithmetic_seq",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "float" => Some(TypeKind::Float),
            "string" => Some(TypeKind::String),
            "pointer" => Some(TypeKind::Pointer),
            "arithmetic_seq" => Some(TypeKind::ArithmeticSeq),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct InferredType {
    pub vaddr: u64,
    pub kind: TypeKind,
    pub extent: u64,
}

impl InferredType {
    pub fn span(&self) -> Span {
        Span::with_size(self.vaddr, self.extent)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SymbolizeOutput {
    pub xrefs: Vec<Xref>,
    pub tables: Vec<AddressTable>,
    pub types: Vec<InferredType>,
    pub rejections: Vec<(Candidate, Rejection)>,
}

fn data_spans(image: &BinaryImage) -> Vec<Span> {
    image
        .sections
        .iter()
        .filter(|s| s.kind == SectionKind::Data && s.size > 0)
        .map(|s| s.span())
        .collect()
}

/// Constant operands of every instruction, plus data units from data
/// regions (and, when enabled, from undisassembled code).
pub fn extract_candidates(
    image: &BinaryImage,
    result: &DisasmResult,
    config: &StrategyConfig,
) -> Vec<Candidate> {
    let ps = image.mode.pointer_size();
    let mut out: Vec<Candidate> = Vec::new();
    for ins in result.instructions.values() {
        for c in &ins.const_operands {
            out.push(Candidate {
                from: ins.vaddr,
                value: c.value,
                width: ps as u8,
                aligned: true,
                origin: CandidateOrigin::Operand,
            });
        }
    }
    if config.data_units {
        let referenced: BTreeSet<u64> = out.iter().map(|c| c.value).collect();
        for region in data_unit_regions(image, result, config) {
            let bytes = match image.bytes_at(region.start) {
                Some(b) => b,
                None => continue,
            };
            let mut a = region.start;
            while a + ps <= region.end {
                if unit_allowed(config.alignment, a, ps, &referenced) {
                    let off = (a - region.start) as usize;
                    if let Some(value) = read_le(&bytes[off..], ps) {
                        out.push(Candidate {
                            from: a,
                            value,
                            width: ps as u8,
                            aligned: a % ps == 0,
                            origin: CandidateOrigin::DataUnit,
                        });
                    }
                }
                a += 1;
            }
        }
    }
    out.sort();
    out.dedup();
    out
}

fn unit_allowed(alignment: Alignment, a: u64, ps: u64, referenced: &BTreeSet<u64>) -> bool {
    match alignment {
        Alignment::Machine => a.is_multiple_of(ps),
        Alignment::FourOrXref => a.is_multiple_of(4) || referenced.contains(&a),
        Alignment::None => true,
    }
}

fn data_unit_regions(image: &BinaryImage, result: &DisasmResult, config: &StrategyConfig) -> Vec<Span> {
    let mut regions = data_spans(image);
    if config.scan_code_gaps {
        regions.extend(gap_regions(result, image));
    }
    regions.sort();
    regions
}

/// Shared state for classification.
pub struct Classifier<'a> {
    pub image: &'a BinaryImage,
    pub result: &'a DisasmResult,
    pub entries: &'a BTreeSet<u64>,
    pub config: &'a StrategyConfig,
    data: Vec<Span>,
}

impl<'a> Classifier<'a> {
    pub fn new(
        image: &'a BinaryImage,
        result: &'a DisasmResult,
        entries: &'a BTreeSet<u64>,
        config: &'a StrategyConfig,
    ) -> Self {
        Classifier {
            image,
            result,
            entries,
            config,
            data: data_spans(image),
        }
    }

    fn in_data(&self, v: u64) -> bool {
        let m = self.config.region_margin;
        if self.image.is_executable(v) {
            return false;
        }
        self.data
            .iter()
            .any(|s| s.start.saturating_sub(m) <= v && v < s.end.saturating_add(m))
    }

    /// Code test first, then the data test.
    pub fn classify(&self, cand: &Candidate) -> Result<Xref, Rejection> {
        let v = cand.value;
        let c = self.config;
        if v < c.value_floor {
            return Err(Rejection::TooSmall);
        }
        if c.magic_values.contains(&v) {
            return Err(Rejection::MagicValue);
        }
        let from_code = cand.origin == CandidateOrigin::Operand;
        let origin = match cand.origin {
            CandidateOrigin::Operand => XrefOrigin::Operand,
            CandidateOrigin::DataUnit => XrefOrigin::DataUnit,
        };
        if self.result.instructions.contains_key(&v) {
            if c.entry_only && !self.entries.contains(&v) {
                return Err(Rejection::NotEntry);
            }
            return Ok(Xref {
                from: cand.from,
                to: v,
                kind: XrefKind::new(from_code, true),
                width: cand.width,
                origin,
            });
        }
        if self.in_data(v) {
            return Ok(Xref {
                from: cand.from,
                to: v,
                kind: XrefKind::new(from_code, false),
                width: cand.width,
                origin,
            });
        }
        Err(Rejection::OutOfRegion)
    }
}

/// Standalone form of [`Classifier::classify`].
pub fn classify_candidate(
    cand: &Candidate,
    image: &BinaryImage,
    result: &DisasmResult,
    entries: &BTreeSet<u64>,
    config: &StrategyConfig,
) -> Result<Xref, Rejection> {
    Classifier::new(image, result, entries, config).classify(cand)
}

fn is_printable(b: u8) -> bool {
    (0x20..0x7f).contains(&b) || matches!(b, b'\t' | b'\n' | b'\r')
}

/// Extent of a NUL-terminated ASCII (two or more characters) or UTF-16LE
/// (one or more characters) string at the start of `bytes`.
pub fn string_extent(bytes: &[u8]) -> Option<u64> {
    let n = bytes.iter().take_while(|&&b| is_printable(b)).count();
    if n >= 2 && bytes.get(n) == Some(&0) {
        return Some(n as u64 + 1);
    }
    let mut chars = 0;
    let mut i = 0;
    while i + 1 < bytes.len() && is_printable(bytes[i]) && bytes[i + 1] == 0 {
        chars += 1;
        i += 2;
    }
    if chars >= 1 && bytes.get(i) == Some(&0) && bytes.get(i + 1) == Some(&0) {
        return Some(i as u64 + 2);
    }
    None
}

/// Float data from intra-block def-use, strings at operand-referenced
/// addresses.
pub fn infer_types(image: &BinaryImage, result: &DisasmResult, _config: &StrategyConfig) -> Vec<InferredType> {
    let mut found: Vec<InferredType> = Vec::new();
    for block in &result.blocks {
        let mut loaded: BTreeMap<Reg, (u64, u8)> = BTreeMap::new();
        for ins in result.block_instructions(block) {
            let abs = ins
                .memory
                .and_then(|m| m.absolute().map(|a| (a, m.size)))
                .filter(|&(a, _)| image.is_data(a));
            if ins.is_float {
                if let Some((a, size)) = abs {
                    found.push(InferredType {
                        vaddr: a,
                        kind: TypeKind::Float,
                        extent: u64::from(size.clamp(4, 16)),
                    });
                }
                for op in ins.operands.iter().skip(1) {
                    if let Operand::Reg { reg, .. } = op {
                        if let Some(&(a, size)) = loaded.get(reg) {
                            found.push(InferredType {
                                vaddr: a,
                                kind: TypeKind::Float,
                                extent: u64::from(size.clamp(4, 16)),
                            });
                        }
                    }
                }
            }
            if let Some(dst) = ins.reg_operand(0) {
                match abs {
                    Some((a, size)) if ins.mnemonic == "mov" => {
                        loaded.insert(dst, (a, size));
                    }
                    _ => {
                        loaded.remove(&dst);
                    }
                }
            }
        }
    }
    let mut referenced: Vec<u64> = result
        .instructions
        .values()
        .flat_map(|i| i.const_operands.iter().map(|c| c.value))
        .filter(|&v| image.is_data(v))
        .collect();
    referenced.sort_unstable();
    referenced.dedup();
    for a in referenced {
        if let Some(ext) = image.bytes_at(a).and_then(string_extent) {
            found.push(InferredType {
                vaddr: a,
                kind: TypeKind::String,
                extent: ext,
            });
        }
    }
    found.sort();
    found.dedup();
    let mut out: Vec<InferredType> = Vec::new();
    for t in found {
        if out.iter().any(|o| o.span().overlaps(&t.span())) {
            continue;
        }
        out.push(t);
    }
    out.sort();
    out
}

fn arithmetic_extent(bytes: &[u8], ps: u64) -> Option<u64> {
    let unit = |i: u64| read_le(bytes.get((i * ps) as usize..)?, ps);
    let (a, b, c) = (unit(0)?, unit(1)?, unit(2)?);
    let step = b.wrapping_sub(a);
    if step == 0 || c.wrapping_sub(b) != step {
        return None;
    }
    let mut n = 3;
    while let (Some(p), Some(q)) = (unit(n - 1), unit(n)) {
        if q.wrapping_sub(p) != step {
            break;
        }
        n += 1;
    }
    Some(n * ps)
}

/// Groups accepted data-unit pointers into address tables and applies the
/// profile refinements.
pub fn scan_address_tables(
    cls: &Classifier<'_>,
    candidates: &[Candidate],
    types: &mut Vec<InferredType>,
) -> (Vec<AddressTable>, Vec<Xref>, Vec<(Candidate, Rejection)>) {
    let config = cls.config;
    let image = cls.image;
    let ps = image.mode.pointer_size();
    let mut rejections = Vec::new();
    let mut accepted: Vec<Xref> = Vec::new();

    let floats: Vec<Span> = types
        .iter()
        .filter(|t| t.kind == TypeKind::Float)
        .map(InferredType::span)
        .collect();
    let in_float = |a: u64| floats.iter().any(|s| s.overlaps(&Span::with_size(a, ps)));

    if config.type_sliding {
        let referenced: BTreeSet<u64> = candidates
            .iter()
            .filter(|c| c.origin == CandidateOrigin::Operand)
            .map(|c| c.value)
            .collect();
        for region in data_unit_regions(image, cls.result, config) {
            let Some(bytes) = image.bytes_at(region.start) else {
                continue;
            };
            let bytes = &bytes[..(region.size() as usize).min(bytes.len())];
            let mut a = region.start;
            while a < region.end {
                let off = (a - region.start) as usize;
                if config.drop_float {
                    if let Some(f) = floats.iter().find(|s| s.contains(a)) {
                        a = f.end;
                        continue;
                    }
                }
                if let Some(value) = read_le(&bytes[off..], ps).filter(|_| unit_allowed(config.alignment, a, ps, &referenced)) {
                    let cand = Candidate {
                        from: a,
                        value,
                        width: ps as u8,
                        aligned: a % ps == 0,
                        origin: CandidateOrigin::DataUnit,
                    };
                    if let Ok(x) = cls.classify(&cand) {
                        accepted.push(x);
                        a += ps;
                        continue;
                    }
                }
                if let Some(ext) = string_extent(&bytes[off..]) {
                    types.push(InferredType {
                        vaddr: a,
                        kind: TypeKind::String,
                        extent: ext,
                    });
                    a += ext + 1;
                    continue;
                }
                if let Some(ext) = arithmetic_extent(&bytes[off..], ps) {
                    types.push(InferredType {
                        vaddr: a,
                        kind: TypeKind::ArithmeticSeq,
                        extent: ext,
                    });
                    a += ext;
                    continue;
                }
                a += 1;
            }
        }
        for c in candidates.iter().filter(|c| c.origin == CandidateOrigin::DataUnit) {
            if !accepted.iter().any(|x| x.from == c.from)
                && cls.classify(c).is_ok() {
                    let reason = if in_float(c.from) {
                        Rejection::FloatTyped
                    } else {
                        Rejection::StringOverlap
                    };
                    rejections.push((*c, reason));
                }
        }
    } else {
        let strings: Vec<Span> = types
            .iter()
            .filter(|t| t.kind == TypeKind::String)
            .map(InferredType::span)
            .collect();
        let mut dropped_strings: BTreeSet<Span> = BTreeSet::new();
        for c in candidates.iter().filter(|c| c.origin == CandidateOrigin::DataUnit) {
            let x = match cls.classify(c) {
                Ok(x) => x,
                Err(r) => {
                    rejections.push((*c, r));
                    continue;
                }
            };
            if config.drop_float && in_float(c.from) {
                rejections.push((*c, Rejection::FloatTyped));
                continue;
            }
            let unit = Span::with_size(c.from, ps);
            if let Some(s) = strings.iter().find(|s| s.overlaps(&unit)) {
                match config.string_overlap {
                    StringOverlap::PreferString => {
                        rejections.push((*c, Rejection::StringOverlap));
                        continue;
                    }
                    StringOverlap::PreferPointer => {
                        dropped_strings.insert(*s);
                    }
                    StringOverlap::Off => {}
                }
            }
            accepted.push(x);
        }
        types.retain(|t| !dropped_strings.contains(&t.span()));
    }

    accepted.sort();
    let mut tables: Vec<AddressTable> = Vec::new();
    let mut groups: Vec<Vec<Xref>> = Vec::new();
    for x in accepted {
        let joins = groups.iter().position(|g| {
            let last = g.last().expect("nonempty group");
            last.from + ps == x.from
                && !(config.table_split_distance > 0
                    && last.to.abs_diff(x.to) > config.table_split_distance)
        });
        match joins {
            Some(i) => groups[i].push(x),
            None => groups.push(vec![x]),
        }
    }
    let mut xrefs = Vec::new();
    for g in groups {
        if (g.len() as u64) < config.min_table_size {
            for x in g {
                rejections.push((
                    Candidate {
                        from: x.from,
                        value: x.to,
                        width: x.width,
                        aligned: x.from % ps == 0,
                        origin: CandidateOrigin::DataUnit,
                    },
                    Rejection::TableTooSmall,
                ));
            }
            continue;
        }
        tables.push(AddressTable {
            start: g[0].from,
            entries: g.iter().map(|x| x.to).collect(),
            entry_width: ps as u8,
        });
        let origin = if g.len() > 1 {
            XrefOrigin::AddressTable
        } else {
            XrefOrigin::DataUnit
        };
        xrefs.extend(g.into_iter().map(|x| Xref { origin, ..x }));
    }
    tables.sort_by_key(|t| t.start);
    (tables, xrefs, rejections)
}

/// Runs the whole symbolization workflow.
pub fn symbolize(
    image: &BinaryImage,
    result: &DisasmResult,
    entries: &BTreeSet<u64>,
    config: &StrategyConfig,
) -> SymbolizeOutput {
    let cls = Classifier::new(image, result, entries, config);
    let candidates = extract_candidates(image, result, config);
    let mut types = infer_types(image, result, config);
    let mut xrefs = Vec::new();
    let mut rejections = Vec::new();
    for c in candidates.iter().filter(|c| c.origin == CandidateOrigin::Operand) {
        match cls.classify(c) {
            Ok(x) => xrefs.push(x),
            Err(r) => rejections.push((*c, r)),
        }
    }
    let (tables, table_xrefs, table_rej) = scan_address_tables(&cls, &candidates, &mut types);
    xrefs.extend(table_xrefs);
    rejections.extend(table_rej);
    xrefs.sort();
    xrefs.dedup_by(|a, b| (a.from, a.to, a.kind) == (b.from, b.to, b.kind));
    rejections.sort();
    rejections.dedup();
    types.sort();
    types.dedup();
    SymbolizeOutput {
        xrefs,
        tables,
        types,
        rejections,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strings() {
        assert_eq!(string_extent(b"abc\0"), Some(4));
        assert_eq!(string_extent(b"a\0"), None);
        assert_eq!(string_extent(&[0x61, 0, 0, 0, 0xf7]), Some(4));
        assert_eq!(string_extent(&[0xf7, 0xc1, 0x04, 0x08]), None);
        assert_eq!(string_extent(b"\0\0\0"), None);
    }

    #[test]
    fn arithmetic_sequences() {
        let mut b = Vec::new();
        for v in [10u64, 20, 30, 40, 7] {
            b.extend_from_slice(&v.to_le_bytes());
        }
        assert_eq!(arithmetic_extent(&b, 8), Some(32));
        assert_eq!(arithmetic_extent(&[0u8; 24], 8), None);
    }

    #[test]
    fn kinds() {
        assert_eq!(XrefKind::new(true, false), XrefKind::C2d);
        assert_eq!(XrefKind::new(false, true), XrefKind::D2c);
        for k in [XrefKind::C2c, XrefKind::C2d, XrefKind::D2c, XrefKind::D2d] {
            assert_eq!(XrefKind::parse(k.name()), Some(k));
        }
    }
}
