//! Little-endian ELF32/ELF64 reader and a minimal writer.

use super::{
    is_metadata_section, BinaryImage, LoadError, Mode, Section, SectionKind, SymbolEntry,
    SymbolSource,
};

pub const MAGIC: &[u8] = b"\x7fELF";

const EM_386: u16 = 3;
const EM_X86_64: u16 = 62;

const SHT_PROGBITS: u32 = 1;
const SHT_SYMTAB: u32 = 2;
const SHT_STRTAB: u32 = 3;
const SHT_NOBITS: u32 = 8;
const SHT_DYNSYM: u32 = 11;

const SHF_WRITE: u64 = 1;
const SHF_ALLOC: u64 = 2;
const SHF_EXECINSTR: u64 = 4;

const STT_OBJECT: u8 = 1;
const STT_FUNC: u8 = 2;

struct Reader<'a> {
    data: &'a [u8],
    wide: bool,
}

impl<'a> Reader<'a> {
    fn bytes(&self, off: u64, len: u64, field: &'static str) -> Result<&'a [u8], LoadError> {
        let end = off.checked_add(len).ok_or_else(|| malformed(field, "offset overflow"))?;
        if end > self.data.len() as u64 {
            return Err(malformed(
                field,
                format!("range {off:#x}..{end:#x} exceeds file size {:#x}", self.data.len()),
            ));
        }
        Ok(&self.data[off as usize..end as usize])
    }

    fn u8(&self, off: u64, field: &'static str) -> Result<u8, LoadError> {
        Ok(self.bytes(off, 1, field)?[0])
    }

    fn u16(&self, off: u64, field: &'static str) -> Result<u16, LoadError> {
        let b = self.bytes(off, 2, field)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&self, off: u64, field: &'static str) -> Result<u32, LoadError> {
        let b = self.bytes(off, 4, field)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&self, off: u64, field: &'static str) -> Result<u64, LoadError> {
        let b = self.bytes(off, 8, field)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }
}

fn malformed(field: &'static str, detail: impl Into<String>) -> LoadError {
    LoadError::Malformed {
        field,
        detail: detail.into(),
    }
}

struct RawSection {
    name_off: u32,
    kind: u32,
    flags: u64,
    addr: u64,
    offset: u64,
    size: u64,
    link: u32,
    entsize: u64,
}

fn c_string(table: &[u8], off: u32) -> String {
    let start = off as usize;
    if start >= table.len() {
        return String::new();
    }
    let end = table[start..]
        .iter()
        .position(|&b| b == 0)
        .map_or(table.len(), |p| start + p);
    String::from_utf8_lossy(&table[start..end]).into_owned()
}

pub fn parse(path: &str, data: &[u8]) -> Result<BinaryImage, LoadError> {
    if !data.starts_with(MAGIC) {
        return Err(LoadError::BadMagic);
    }
    let mut r = Reader { data, wide: false };
    let class = r.u8(4, "e_ident[EI_CLASS]")?;
    r.wide = match class {
        1 => false,
        2 => true,
        c => return Err(malformed("e_ident[EI_CLASS]", format!("unknown class {c}"))),
    };
    match r.u8(5, "e_ident[EI_DATA]")? {
        1 => {}
        d => {
            return Err(malformed(
                "e_ident[EI_DATA]",
                format!("unsupported byte order {d}"),
            ))
        }
    }
    let machine = r.u16(18, "e_machine")?;
    let mode = match machine {
        EM_386 => Mode::X86,
        EM_X86_64 => Mode::X64,
        m => return Err(LoadError::UnsupportedArch(m)),
    };
    let (entry, shoff, shentsize, shnum, shstrndx) = if r.wide {
        (
            r.u64(24, "e_entry")?,
            r.u64(40, "e_shoff")?,
            r.u16(58, "e_shentsize")?,
            r.u16(60, "e_shnum")?,
            r.u16(62, "e_shstrndx")?,
        )
    } else {
        (
            u64::from(r.u32(24, "e_entry")?),
            u64::from(r.u32(32, "e_shoff")?),
            r.u16(46, "e_shentsize")?,
            r.u16(48, "e_shnum")?,
            r.u16(50, "e_shstrndx")?,
        )
    };
    let expected_entsize = if r.wide { 64 } else { 40 };
    if shnum > 0 && shentsize != expected_entsize {
        return Err(malformed(
            "e_shentsize",
            format!("expected {expected_entsize}, found {shentsize}"),
        ));
    }
    if shnum > 0 && shstrndx >= shnum {
        return Err(malformed(
            "e_shstrndx",
            format!("index {shstrndx} out of {shnum} sections"),
        ));
    }
    let mut raw = Vec::with_capacity(shnum as usize);
    for i in 0..u64::from(shnum) {
        let base = shoff + i * u64::from(shentsize);
        r.bytes(base, u64::from(shentsize), "e_shoff")?;
        let s = if r.wide {
            RawSection {
                name_off: r.u32(base, "sh_name")?,
                kind: r.u32(base + 4, "sh_type")?,
                flags: r.u64(base + 8, "sh_flags")?,
                addr: r.u64(base + 16, "sh_addr")?,
                offset: r.u64(base + 24, "sh_offset")?,
                size: r.u64(base + 32, "sh_size")?,
                link: r.u32(base + 40, "sh_link")?,
                entsize: r.u64(base + 56, "sh_entsize")?,
            }
        } else {
            RawSection {
                name_off: r.u32(base, "sh_name")?,
                kind: r.u32(base + 4, "sh_type")?,
                flags: u64::from(r.u32(base + 8, "sh_flags")?),
                addr: u64::from(r.u32(base + 12, "sh_addr")?),
                offset: u64::from(r.u32(base + 16, "sh_offset")?),
                size: u64::from(r.u32(base + 20, "sh_size")?),
                link: r.u32(base + 24, "sh_link")?,
                entsize: u64::from(r.u32(base + 36, "sh_entsize")?),
            }
        };
        raw.push(s);
    }
    let shstr: &[u8] = match raw.get(shstrndx as usize) {
        Some(s) if shstrndx != 0 => r.bytes(s.offset, s.size, "sh_offset")?,
        _ => &[],
    };

    let mut sections = Vec::new();
    for s in &raw {
        if s.flags & SHF_ALLOC == 0 || s.size == 0 {
            continue;
        }
        let name = c_string(shstr, s.name_off);
        let bytes = if s.kind == SHT_NOBITS {
            vec![0; s.size as usize]
        } else {
            r.bytes(s.offset, s.size, "sh_offset")?.to_vec()
        };
        let executable = s.flags & SHF_EXECINSTR != 0;
        let kind = if executable {
            SectionKind::Code
        } else if is_metadata_section(&name)
            || !matches!(s.kind, SHT_PROGBITS | SHT_NOBITS | 14..=16)
        {
            SectionKind::Other
        } else {
            SectionKind::Data
        };
        sections.push(Section {
            name,
            vaddr: s.addr,
            size: s.size,
            bytes,
            kind,
            executable,
        });
    }

    let mut symbols = Vec::new();
    for s in &raw {
        let source = match s.kind {
            SHT_SYMTAB => SymbolSource::Symtab,
            SHT_DYNSYM => SymbolSource::Dynsym,
            _ => continue,
        };
        let strtab = raw
            .get(s.link as usize)
            .ok_or_else(|| malformed("sh_link", "symbol string table index out of range"))?;
        let strtab = r.bytes(strtab.offset, strtab.size, "sh_offset")?;
        let entsize = if r.wide { 24 } else { 16 };
        if s.entsize != 0 && s.entsize != entsize {
            return Err(malformed(
                "sh_entsize",
                format!("symbol entry size {} unsupported", s.entsize),
            ));
        }
        let table = r.bytes(s.offset, s.size, "sh_offset")?;
        let sub = Reader {
            data: table,
            wide: r.wide,
        };
        for i in 1..(s.size / entsize) {
            let b = i * entsize;
            let (name_off, info, shndx, value, size) = if r.wide {
                (
                    sub.u32(b, "st_name")?,
                    sub.u8(b + 4, "st_info")?,
                    sub.u16(b + 6, "st_shndx")?,
                    sub.u64(b + 8, "st_value")?,
                    sub.u64(b + 16, "st_size")?,
                )
            } else {
                (
                    sub.u32(b, "st_name")?,
                    sub.u8(b + 12, "st_info")?,
                    sub.u16(b + 14, "st_shndx")?,
                    u64::from(sub.u32(b + 4, "st_value")?),
                    u64::from(sub.u32(b + 8, "st_size")?),
                )
            };
            let ty = info & 0xf;
            if shndx == 0 || !(ty == STT_FUNC || ty == STT_OBJECT) {
                continue;
            }
            let name = c_string(strtab, name_off);
            if name.is_empty() {
                continue;
            }
            symbols.push(SymbolEntry {
                name,
                vaddr: value,
                size,
                is_function: ty == STT_FUNC,
                source,
            });
        }
    }

    BinaryImage::new(path, mode, sections, symbols, entry)
}

#[derive(Default)]
struct StrTab {
    bytes: Vec<u8>,
}

impl StrTab {
    fn new() -> Self {
        StrTab { bytes: vec![0] }
    }

    fn add(&mut self, s: &str) -> u32 {
        let off = self.bytes.len() as u32;
        self.bytes.extend_from_slice(s.as_bytes());
        self.bytes.push(0);
        off
    }
}

struct OutSection {
    name: u32,
    kind: u32,
    flags: u64,
    addr: u64,
    offset: u64,
    size: u64,
    link: u32,
    info: u32,
    align: u64,
    entsize: u64,
}

fn pad_to(buf: &mut Vec<u8>, align: usize) {
    while !buf.len().is_multiple_of(align) {
        buf.push(0);
    }
}

/// Serializes an image as a section-only ELF executable.
///
/// Reading the output back with [`parse`] yields an equal image.
pub fn write(image: &BinaryImage) -> Vec<u8> {
    let wide = image.mode == Mode::X64;
    let ehsize = if wide { 64 } else { 52 };
    let mut shstr = StrTab::new();
    let mut out = vec![0u8; ehsize];
    let mut headers = vec![OutSection {
        name: 0,
        kind: 0,
        flags: 0,
        addr: 0,
        offset: 0,
        size: 0,
        link: 0,
        info: 0,
        align: 0,
        entsize: 0,
    }];
    for s in &image.sections {
        pad_to(&mut out, 16);
        let offset = out.len() as u64;
        out.extend_from_slice(&s.bytes);
        let flags = SHF_ALLOC
            | if s.executable { SHF_EXECINSTR } else { 0 }
            | if s.kind == SectionKind::Data { SHF_WRITE } else { 0 };
        headers.push(OutSection {
            name: shstr.add(&s.name),
            kind: SHT_PROGBITS,
            flags,
            addr: s.vaddr,
            offset,
            size: s.size,
            link: 0,
            info: 0,
            align: 16,
            entsize: 0,
        });
    }
    let section_index = |addr: u64| -> u16 {
        image
            .sections
            .iter()
            .position(|s| s.contains(addr) || s.vaddr == addr)
            .map_or(0xfff1, |i| i as u16 + 1)
    };
    for (source, tab_name, str_name, kind) in [
        (SymbolSource::Symtab, ".symtab", ".strtab", SHT_SYMTAB),
        (SymbolSource::Dynsym, ".dynsym", ".dynstr", SHT_DYNSYM),
    ] {
        let syms: Vec<&SymbolEntry> =
            image.symbols.iter().filter(|s| s.source == source).collect();
        if syms.is_empty() {
            continue;
        }
        let mut strtab = StrTab::new();
        let entsize = if wide { 24 } else { 16 };
        let mut table = vec![0u8; entsize];
        for sym in syms {
            let name = strtab.add(&sym.name);
            let info = 0x10 | if sym.is_function { STT_FUNC } else { STT_OBJECT };
            let shndx = section_index(sym.vaddr);
            if wide {
                table.extend_from_slice(&name.to_le_bytes());
                table.push(info);
                table.push(0);
                table.extend_from_slice(&shndx.to_le_bytes());
                table.extend_from_slice(&sym.vaddr.to_le_bytes());
                table.extend_from_slice(&sym.size.to_le_bytes());
            } else {
                table.extend_from_slice(&name.to_le_bytes());
                table.extend_from_slice(&(sym.vaddr as u32).to_le_bytes());
                table.extend_from_slice(&(sym.size as u32).to_le_bytes());
                table.push(info);
                table.push(0);
                table.extend_from_slice(&shndx.to_le_bytes());
            }
        }
        pad_to(&mut out, 8);
        let sym_off = out.len() as u64;
        out.extend_from_slice(&table);
        let str_off = out.len() as u64;
        out.extend_from_slice(&strtab.bytes);
        let str_index = headers.len() as u32 + 1;
        headers.push(OutSection {
            name: shstr.add(tab_name),
            kind,
            flags: 0,
            addr: 0,
            offset: sym_off,
            size: table.len() as u64,
            link: str_index,
            info: 1,
            align: 8,
            entsize: entsize as u64,
        });
        headers.push(OutSection {
            name: shstr.add(str_name),
            kind: SHT_STRTAB,
            flags: 0,
            addr: 0,
            offset: str_off,
            size: strtab.bytes.len() as u64,
            link: 0,
            info: 0,
            align: 1,
            entsize: 0,
        });
    }
    let shstrndx = headers.len();
    let name = shstr.add(".shstrtab");
    let shstr_off = out.len() as u64;
    out.extend_from_slice(&shstr.bytes);
    headers.push(OutSection {
        name,
        kind: SHT_STRTAB,
        flags: 0,
        addr: 0,
        offset: shstr_off,
        size: shstr.bytes.len() as u64,
        link: 0,
        info: 0,
        align: 1,
        entsize: 0,
    });
    pad_to(&mut out, 8);
    let shoff = out.len() as u64;
    for h in &headers {
        if wide {
            out.extend_from_slice(&h.name.to_le_bytes());
            out.extend_from_slice(&h.kind.to_le_bytes());
            out.extend_from_slice(&h.flags.to_le_bytes());
            out.extend_from_slice(&h.addr.to_le_bytes());
            out.extend_from_slice(&h.offset.to_le_bytes());
            out.extend_from_slice(&h.size.to_le_bytes());
            out.extend_from_slice(&h.link.to_le_bytes());
            out.extend_from_slice(&h.info.to_le_bytes());
            out.extend_from_slice(&h.align.to_le_bytes());
            out.extend_from_slice(&h.entsize.to_le_bytes());
        } else {
            for v in [
                h.name,
                h.kind,
                h.flags as u32,
                h.addr as u32,
                h.offset as u32,
                h.size as u32,
                h.link,
                h.info,
                h.align as u32,
                h.entsize as u32,
            ] {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }

    let hdr = &mut out[..ehsize];
    hdr[..4].copy_from_slice(MAGIC);
    hdr[4] = if wide { 2 } else { 1 };
    hdr[5] = 1;
    hdr[6] = 1;
    hdr[16..18].copy_from_slice(&2u16.to_le_bytes());
    let machine = if wide { EM_X86_64 } else { EM_386 };
    hdr[18..20].copy_from_slice(&machine.to_le_bytes());
    hdr[20..24].copy_from_slice(&1u32.to_le_bytes());
    let shnum = headers.len() as u16;
    if wide {
        hdr[24..32].copy_from_slice(&image.entry_point.to_le_bytes());
        hdr[40..48].copy_from_slice(&shoff.to_le_bytes());
        hdr[52..54].copy_from_slice(&(ehsize as u16).to_le_bytes());
        hdr[58..60].copy_from_slice(&64u16.to_le_bytes());
        hdr[60..62].copy_from_slice(&shnum.to_le_bytes());
        hdr[62..64].copy_from_slice(&(shstrndx as u16).to_le_bytes());
    } else {
        hdr[24..28].copy_from_slice(&(image.entry_point as u32).to_le_bytes());
        hdr[32..36].copy_from_slice(&(shoff as u32).to_le_bytes());
        hdr[40..42].copy_from_slice(&(ehsize as u16).to_le_bytes());
        hdr[46..48].copy_from_slice(&40u16.to_le_bytes());
        hdr[48..50].copy_from_slice(&shnum.to_le_bytes());
        hdr[50..52].copy_from_slice(&(shstrndx as u16).to_le_bytes());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(mode: Mode) -> BinaryImage {
        BinaryImage::new(
            "sample",
            mode,
            vec![
                Section {
                    name: ".text".into(),
                    vaddr: 0x401000,
                    size: 4,
                    bytes: vec![0x55, 0x90, 0x5d, 0xc3],
                    kind: SectionKind::Code,
                    executable: true,
                },
                Section {
                    name: ".rodata".into(),
                    vaddr: 0x402000,
                    size: 3,
                    bytes: vec![1, 2, 3],
                    kind: SectionKind::Data,
                    executable: false,
                },
                Section {
                    name: ".eh_frame".into(),
                    vaddr: 0x403000,
                    size: 2,
                    bytes: vec![0, 0],
                    kind: SectionKind::Other,
                    executable: false,
                },
            ],
            vec![
                SymbolEntry {
                    name: "main".into(),
                    vaddr: 0x401000,
                    size: 4,
                    is_function: true,
                    source: SymbolSource::Symtab,
                },
                SymbolEntry {
                    name: "exit".into(),
                    vaddr: 0x401002,
                    size: 0,
                    is_function: true,
                    source: SymbolSource::Dynsym,
                },
            ],
            0x401000,
        )
        .unwrap()
    }

    #[test]
    fn round_trip_both_modes() {
        for mode in [Mode::X86, Mode::X64] {
            let img = sample(mode);
            let bytes = write(&img);
            let back = parse("sample", &bytes).unwrap();
            assert_eq!(back, img);
        }
    }

    #[test]
    fn unsupported_machine() {
        let mut bytes = write(&sample(Mode::X64));
        bytes[18] = 0x28;
        bytes[19] = 0;
        assert!(matches!(
            parse("x", &bytes),
            Err(LoadError::UnsupportedArch(0x28))
        ));
    }

    #[test]
    fn truncated_section_table_names_field() {
        let bytes = write(&sample(Mode::X64));
        let cut = &bytes[..bytes.len() - 10];
        match parse("x", cut) {
            Err(LoadError::Malformed { field, .. }) => assert_eq!(field, "e_shoff"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_class() {
        let mut bytes = write(&sample(Mode::X64));
        bytes[4] = 9;
        match parse("x", &bytes) {
            Err(LoadError::Malformed { field, .. }) => assert_eq!(field, "e_ident[EI_CLASS]"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
