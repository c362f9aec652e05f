//! Executable images: sections, symbols and region classification.
//!
//! A [`BinaryImage`] is immutable once loaded. Every strategy reads bytes
//! through it (or through a scratch overlay implementing [`ByteSource`]).

pub mod elf;
pub mod flat;

use std::fmt;
use std::path::Path;

use thiserror::Error;

/// Architecture mode, taken from the container header.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    X86,
    X64,
}

impl Mode {
    pub fn bitness(self) -> u32 {
        match self {
            Mode::X86 => 32,
            Mode::X64 => 64,
        }
    }

    /// Machine word size in bytes.
    pub fn pointer_size(self) -> u64 {
        match self {
            Mode::X86 => 4,
            Mode::X64 => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Mode::X86 => "x86",
            Mode::X64 => "x64",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Half-open virtual address range `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Span {
    pub start: u64,
    pub end: u64,
}

impl Span {
    pub fn new(start: u64, end: u64) -> Self {
        debug_assert!(start <= end);
        Span { start, end }
    }

    pub fn with_size(start: u64, size: u64) -> Self {
        Span { start, end: start + size }
    }

    pub fn size(&self) -> u64 {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start >= self.end
    }

    pub fn contains(&self, addr: u64) -> bool {
        self.start <= addr && addr < self.end
    }

    pub fn overlaps(&self, other: &Span) -> bool {
        self.start < other.end && other.start < self.end
    }

    pub fn covers(&self, other: &Span) -> bool {
        self.start <= other.start && other.end <= self.end
    }
}

impl fmt::Display for Span {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{:#x}, {:#x})", self.start, self.end)
    }
}

/// Subtract a sorted, disjoint set of `holes` from a sorted, disjoint set of
/// `spans`.
pub fn subtract_spans(spans: &[Span], holes: &[Span]) -> Vec<Span> {
    let mut out = Vec::new();
    let mut h = 0;
    for span in spans {
        let mut cursor = span.start;
        while h < holes.len() && holes[h].end <= span.start {
            h += 1;
        }
        let mut k = h;
        while k < holes.len() && holes[k].start < span.end {
            if holes[k].start > cursor {
                out.push(Span::new(cursor, holes[k].start));
            }
            cursor = cursor.max(holes[k].end);
            k += 1;
        }
        if cursor < span.end {
            out.push(Span::new(cursor, span.end));
        }
    }
    out
}

/// Merge possibly overlapping spans into a sorted disjoint list.
pub fn merge_spans(mut spans: Vec<Span>) -> Vec<Span> {
    spans.retain(|s| !s.is_empty());
    spans.sort();
    let mut out: Vec<Span> = Vec::with_capacity(spans.len());
    for s in spans {
        match out.last_mut() {
            Some(last) if s.start <= last.end => last.end = last.end.max(s.end),
            _ => out.push(s),
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SectionKind {
    Code,
    Data,
    Other,
}

impl SectionKind {
    pub fn name(self) -> &'static str {
        match self {
            SectionKind::Code => "code",
            SectionKind::Data => "data",
            SectionKind::Other => "other",
        }
    }
}

/// Allocatable sections that carry metadata rather than program data.
pub(crate) const METADATA_SECTIONS: &[&str] = &[
    ".eh_frame",
    ".eh_frame_hdr",
    ".gcc_except_table",
    ".interp",
    ".note",
    ".dynamic",
    ".hash",
    ".gnu.hash",
    ".dynsym",
    ".dynstr",
    ".gnu.version",
    ".gnu.version_r",
    ".rela.dyn",
    ".rela.plt",
    ".rel.dyn",
    ".rel.plt",
];

pub(crate) fn is_metadata_section(name: &str) -> bool {
    METADATA_SECTIONS.contains(&name) || name.starts_with(".note.")
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Section {
    pub name: String,
    pub vaddr: u64,
    pub size: u64,
    pub bytes: Vec<u8>,
    pub kind: SectionKind,
    pub executable: bool,
}

impl Section {
    pub fn span(&self) -> Span {
        Span::with_size(self.vaddr, self.size)
    }

    pub fn contains(&self, addr: u64) -> bool {
        self.span().contains(addr)
    }

    pub fn end(&self) -> u64 {
        self.vaddr + self.size
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SymbolSource {
    Symtab,
    Dynsym,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SymbolEntry {
    pub name: String,
    pub vaddr: u64,
    pub size: u64,
    pub is_function: bool,
    pub source: SymbolSource,
}

#[derive(Debug, Error)]
pub enum LoadError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic")]
    BadMagic,
    #[error("malformed container: header field `{field}`: {detail}")]
    Malformed { field: &'static str, detail: String },
    #[error("unsupported architecture (machine {0})")]
    UnsupportedArch(u16),
    #[error("fixture line {line}: {message}")]
    Fixture { line: usize, message: String },
    #[error("invalid image: {0}")]
    Invalid(String),
}

/// Read access to bytes by virtual address.
///
/// Implementors return the contiguous bytes from `vaddr` to the end of the
/// containing section.
pub trait ByteSource {
    fn bytes_at(&self, vaddr: u64) -> Option<&[u8]>;
}

/// A loaded executable.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryImage {
    pub path: String,
    pub mode: Mode,
    pub sections: Vec<Section>,
    pub symbols: Vec<SymbolEntry>,
    pub entry_point: u64,
}

impl BinaryImage {
    /// Builds an image and checks its invariants.
    ///
    /// Sections are sorted by address. Function symbols outside code
    /// sections are rejected.
    pub fn new(
        path: impl Into<String>,
        mode: Mode,
        mut sections: Vec<Section>,
        symbols: Vec<SymbolEntry>,
        entry_point: u64,
    ) -> Result<Self, LoadError> {
        sections.sort_by_key(|s| (s.vaddr, s.size));
        for s in &sections {
            if s.bytes.len() as u64 != s.size {
                return Err(LoadError::Invalid(format!(
                    "section {} holds {} bytes but declares size {:#x}",
                    s.name,
                    s.bytes.len(),
                    s.size
                )));
            }
            if s.kind == SectionKind::Code && !s.executable {
                return Err(LoadError::Invalid(format!(
                    "code section {} is not executable",
                    s.name
                )));
            }
        }
        for pair in sections.windows(2) {
            if pair[0].span().overlaps(&pair[1].span()) {
                return Err(LoadError::Invalid(format!(
                    "sections {} and {} overlap",
                    pair[0].name, pair[1].name
                )));
            }
        }
        let image = BinaryImage {
            path: path.into(),
            mode,
            sections,
            symbols,
            entry_point,
        };
        if !image.is_executable(entry_point) {
            return Err(LoadError::Invalid(format!(
                "entry point {entry_point:#x} is not inside an executable section"
            )));
        }
        for sym in &image.symbols {
            if sym.is_function && !image.is_executable(sym.vaddr) {
                return Err(LoadError::Invalid(format!(
                    "function symbol {} at {:#x} is outside code",
                    sym.name, sym.vaddr
                )));
            }
        }
        Ok(image)
    }

    pub fn section_at(&self, addr: u64) -> Option<&Section> {
        let idx = self.sections.partition_point(|s| s.end() <= addr);
        self.sections.get(idx).filter(|s| s.contains(addr))
    }

    pub fn section_named(&self, name: &str) -> Option<&Section> {
        self.sections.iter().find(|s| s.name == name)
    }

    pub fn is_mapped(&self, addr: u64) -> bool {
        self.section_at(addr).is_some()
    }

    pub fn is_executable(&self, addr: u64) -> bool {
        self.section_at(addr).is_some_and(|s| s.executable)
    }

    /// Non-executable allocatable bytes.
    pub fn is_data(&self, addr: u64) -> bool {
        self.section_at(addr).is_some_and(|s| !s.executable)
    }

    /// Little-endian unsigned read of `width` bytes (1..=8).
    pub fn read_uint(&self, addr: u64, width: u64) -> Option<u64> {
        let bytes = self.bytes_at(addr)?;
        read_le(bytes, width)
    }

    pub fn executable_spans(&self) -> Vec<Span> {
        self.sections
            .iter()
            .filter(|s| s.executable && s.size > 0)
            .map(Section::span)
            .collect()
    }

    pub fn data_spans(&self) -> Vec<Span> {
        self.sections
            .iter()
            .filter(|s| !s.executable && s.size > 0)
            .map(Section::span)
            .collect()
    }

    pub fn function_symbols(&self) -> impl Iterator<Item = &SymbolEntry> {
        self.symbols.iter().filter(|s| s.is_function)
    }

    pub fn symbols_at(&self, addr: u64) -> impl Iterator<Item = &SymbolEntry> {
        self.symbols.iter().filter(move |s| s.vaddr == addr)
    }

    pub fn symbol_named(&self, name: &str) -> Option<&SymbolEntry> {
        self.symbols.iter().find(|s| s.name == name)
    }
}

impl ByteSource for BinaryImage {
    fn bytes_at(&self, vaddr: u64) -> Option<&[u8]> {
        let s = self.section_at(vaddr)?;
        Some(&s.bytes[(vaddr - s.vaddr) as usize..])
    }
}

pub(crate) fn read_le(bytes: &[u8], width: u64) -> Option<u64> {
    let width = width as usize;
    if width == 0 || width > 8 || bytes.len() < width {
        return None;
    }
    let mut buf = [0u8; 8];
    buf[..width].copy_from_slice(&bytes[..width]);
    Some(u64::from_le_bytes(buf))
}

/// Loads a native executable or a flat fixture file.
pub fn load_binary(path: impl AsRef<Path>) -> Result<BinaryImage, LoadError> {
    let path = path.as_ref();
    let data = std::fs::read(path).map_err(|source| LoadError::Io {
        path: path.display().to_string(),
        source,
    })?;
    load_bytes(&path.display().to_string(), &data)
}

/// Dispatches on the container magic.
pub fn load_bytes(path: &str, data: &[u8]) -> Result<BinaryImage, LoadError> {
    if data.starts_with(elf::MAGIC) {
        return elf::parse(path, data);
    }
    if flat::looks_like_fixture(data) {
        let text = std::str::from_utf8(data).map_err(|_| LoadError::BadMagic)?;
        return flat::parse(path, text);
    }
    Err(LoadError::BadMagic)
}

/// Sweep ranges: symbol-delimited function ranges first (by address), then
/// the remaining executable gaps (by address).
///
/// The result covers every executable byte exactly once. Overlapping symbol
/// ranges are trimmed to their non-overlapping suffix; see
/// [`symbol_range_overlaps`].
pub fn code_regions(image: &BinaryImage) -> Vec<Span> {
    let symbol_ranges = symbol_ranges(image).0;
    let exec = image.executable_spans();
    let gaps = subtract_spans(&exec, &merge_spans(symbol_ranges.clone()));
    symbol_ranges.into_iter().chain(gaps).collect()
}

/// Pairs of function-symbol ranges that overlap each other.
pub fn symbol_range_overlaps(image: &BinaryImage) -> Vec<(Span, Span)> {
    symbol_ranges(image).1
}

fn symbol_ranges(image: &BinaryImage) -> (Vec<Span>, Vec<(Span, Span)>) {
    let mut raw: Vec<Span> = image
        .function_symbols()
        .filter(|s| s.size > 0)
        .filter_map(|s| {
            let sec = image.section_at(s.vaddr).filter(|sec| sec.executable)?;
            Some(Span::new(s.vaddr, (s.vaddr + s.size).min(sec.end())))
        })
        .collect();
    raw.sort();
    raw.dedup();
    let mut out: Vec<Span> = Vec::with_capacity(raw.len());
    let mut overlaps = Vec::new();
    let mut covered_to = 0u64;
    let mut prev: Option<Span> = None;
    for r in raw {
        if let Some(p) = prev {
            if r.start < p.end.max(covered_to) {
                overlaps.push((p, r));
            }
        }
        let start = r.start.max(covered_to);
        if start < r.end {
            out.push(Span::new(start, r.end));
        }
        covered_to = covered_to.max(r.end);
        prev = Some(r);
    }
    (out, overlaps)
}

/// Descent seeds: the entry point plus every function symbol address.
pub fn symbol_seeds(image: &BinaryImage) -> Vec<u64> {
    let mut seeds: Vec<u64> = std::iter::once(image.entry_point)
        .chain(
            image
                .function_symbols()
                .map(|s| s.vaddr)
                .filter(|&a| image.is_executable(a)),
        )
        .collect();
    seeds.sort_unstable();
    seeds.dedup();
    seeds
}

#[cfg(test)]
mod tests {
    use super::*;

    fn section(name: &str, vaddr: u64, size: u64, code: bool) -> Section {
        Section {
            name: name.into(),
            vaddr,
            size,
            bytes: vec![0x90; size as usize],
            kind: if code { SectionKind::Code } else { SectionKind::Data },
            executable: code,
        }
    }

    fn func(name: &str, vaddr: u64, size: u64) -> SymbolEntry {
        SymbolEntry {
            name: name.into(),
            vaddr,
            size,
            is_function: true,
            source: SymbolSource::Symtab,
        }
    }

    #[test]
    fn regions_without_symbols_is_whole_section() {
        let img = BinaryImage::new(
            "t",
            Mode::X64,
            vec![section(".text", 0x1000, 0x100, true)],
            vec![],
            0x1000,
        )
        .unwrap();
        assert_eq!(code_regions(&img), vec![Span::new(0x1000, 0x1100)]);
        assert_eq!(symbol_seeds(&img), vec![0x1000]);
    }

    #[test]
    fn regions_symbol_then_gaps() {
        let img = BinaryImage::new(
            "t",
            Mode::X64,
            vec![section(".text", 0x1000, 0x100, true)],
            vec![func("f", 0x1020, 0x20)],
            0x1000,
        )
        .unwrap();
        assert_eq!(
            code_regions(&img),
            vec![
                Span::new(0x1020, 0x1040),
                Span::new(0x1000, 0x1020),
                Span::new(0x1040, 0x1100)
            ]
        );
    }

    #[test]
    fn overlapping_symbols_are_trimmed_and_flagged() {
        let img = BinaryImage::new(
            "t",
            Mode::X64,
            vec![section(".text", 0x1000, 0x100, true)],
            vec![func("a", 0x1000, 0x30), func("b", 0x1020, 0x20)],
            0x1000,
        )
        .unwrap();
        assert_eq!(
            code_regions(&img),
            vec![
                Span::new(0x1000, 0x1030),
                Span::new(0x1030, 0x1040),
                Span::new(0x1040, 0x1100)
            ]
        );
        assert_eq!(symbol_range_overlaps(&img).len(), 1);
    }

    #[test]
    fn zero_size_symbol_is_seed_but_not_range() {
        let img = BinaryImage::new(
            "t",
            Mode::X64,
            vec![section(".text", 0x1000, 0x40, true)],
            vec![func("z", 0x1010, 0), func("g", 0x1020, 0x10)],
            0x1000,
        )
        .unwrap();
        assert_eq!(symbol_seeds(&img), vec![0x1000, 0x1010, 0x1020]);
        assert_eq!(code_regions(&img)[0], Span::new(0x1020, 0x1030));
    }

    #[test]
    fn entry_outside_code_is_rejected() {
        let err = BinaryImage::new(
            "t",
            Mode::X64,
            vec![section(".data", 0x1000, 0x10, false)],
            vec![],
            0x1000,
        )
        .unwrap_err();
        assert!(matches!(err, LoadError::Invalid(_)));
    }

    #[test]
    fn overlapping_sections_are_rejected() {
        let err = BinaryImage::new(
            "t",
            Mode::X64,
            vec![
                section(".text", 0x1000, 0x20, true),
                section(".data", 0x1010, 0x20, false),
            ],
            vec![],
            0x1000,
        )
        .unwrap_err();
        assert!(err.to_string().contains("overlap"));
    }

    #[test]
    fn text_file_is_bad_magic() {
        let err = load_bytes("x.txt", b"hello world\nthis is text\n").unwrap_err();
        assert_eq!(err.to_string(), "bad magic");
    }

    #[test]
    fn span_subtraction() {
        let spans = [Span::new(0, 10), Span::new(20, 30)];
        let holes = [Span::new(2, 4), Span::new(8, 22), Span::new(29, 40)];
        assert_eq!(
            subtract_spans(&spans, &holes),
            vec![Span::new(0, 2), Span::new(4, 8), Span::new(22, 29)]
        );
    }
}
