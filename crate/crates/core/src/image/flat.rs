//! Line-oriented fixture format.
//!
//! ```text
//! mode x64
//! section .text 401000 code 554889e55dc3
//! symbol main 401000 6 func
//! entry 401000
//! ```
//!
//! Blank lines and lines starting with `#` are ignored. A section line may
//! carry several hex tokens; they are concatenated.

use std::fmt::Write as _;

use super::{
    is_metadata_section, BinaryImage, LoadError, Mode, Section, SectionKind, SymbolEntry,
    SymbolSource,
};

pub(crate) fn looks_like_fixture(data: &[u8]) -> bool {
    let Ok(text) = std::str::from_utf8(data) else {
        return false;
    };
    text.lines()
        .map(str::trim)
        .find(|l| !l.is_empty() && !l.starts_with('#'))
        .is_some_and(|l| l.split_whitespace().next() == Some("mode"))
}

fn parse_hex_u64(tok: &str) -> Option<u64> {
    let t = tok
        .strip_prefix("0x")
        .or_else(|| tok.strip_prefix("0X"))
        .unwrap_or(tok);
    u64::from_str_radix(t, 16).ok()
}

pub fn decode_hex(s: &str) -> Option<Vec<u8>> {
    if !s.len().is_multiple_of(2) {
        return None;
    }
    (0..s.len())
        .step_by(2)
        .map(|i| u8::from_str_radix(s.get(i..i + 2)?, 16).ok())
        .collect()
}

pub fn encode_hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        let _ = write!(s, "{b:02x}");
    }
    s
}

pub fn parse(path: &str, text: &str) -> Result<BinaryImage, LoadError> {
    let mut mode = None;
    let mut sections = Vec::new();
    let mut symbols = Vec::new();
    let mut entry = None;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let err = |message: String| LoadError::Fixture { line, message };
        let l = raw.trim();
        if l.is_empty() || l.starts_with('#') {
            continue;
        }
        let toks: Vec<&str> = l.split_whitespace().collect();
        match toks[0] {
            "mode" => {
                mode = Some(match toks.get(1).copied() {
                    Some("x86") => Mode::X86,
                    Some("x64") => Mode::X64,
                    other => return Err(err(format!("unknown mode {other:?}"))),
                });
            }
            "section" => {
                if toks.len() < 4 {
                    return Err(err("section needs name, address and kind".into()));
                }
                let vaddr = parse_hex_u64(toks[2])
                    .ok_or_else(|| err(format!("bad address {}", toks[2])))?;
                let executable = match toks[3] {
                    "code" => true,
                    "data" => false,
                    k => return Err(err(format!("unknown section kind {k}"))),
                };
                let mut bytes = Vec::new();
                for t in &toks[4..] {
                    bytes.extend(decode_hex(t).ok_or_else(|| err(format!("bad hex {t}")))?);
                }
                let name = toks[1].to_string();
                let kind = if executable {
                    SectionKind::Code
                } else if is_metadata_section(&name) {
                    SectionKind::Other
                } else {
                    SectionKind::Data
                };
                sections.push(Section {
                    name,
                    vaddr,
                    size: bytes.len() as u64,
                    bytes,
                    kind,
                    executable,
                });
            }
            "symbol" => {
                if toks.len() != 5 {
                    return Err(err("symbol needs name, address, size and kind".into()));
                }
                let vaddr = parse_hex_u64(toks[2])
                    .ok_or_else(|| err(format!("bad address {}", toks[2])))?;
                let size = parse_hex_u64(toks[3])
                    .ok_or_else(|| err(format!("bad size {}", toks[3])))?;
                let is_function = match toks[4] {
                    "func" => true,
                    "obj" | "object" => false,
                    k => return Err(err(format!("unknown symbol kind {k}"))),
                };
                symbols.push(SymbolEntry {
                    name: toks[1].to_string(),
                    vaddr,
                    size,
                    is_function,
                    source: SymbolSource::Symtab,
                });
            }
            "entry" => {
                let a = toks
                    .get(1)
                    .and_then(|t| parse_hex_u64(t))
                    .ok_or_else(|| err("entry needs an address".into()))?;
                entry = Some(a);
            }
            d => return Err(err(format!("unknown directive {d}"))),
        }
    }
    let mode = mode.ok_or(LoadError::BadMagic)?;
    let entry = entry.ok_or_else(|| LoadError::Fixture {
        line: text.lines().count(),
        message: "missing entry directive".into(),
    })?;
    BinaryImage::new(path, mode, sections, symbols, entry)
}

/// Renders an image in fixture syntax.
pub fn emit(image: &BinaryImage) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "mode {}", image.mode);
    for s in &image.sections {
        let kind = if s.executable { "code" } else { "data" };
        let _ = write!(out, "section {} {:x} {}", s.name, s.vaddr, kind);
        for chunk in s.bytes.chunks(32) {
            let _ = write!(out, " {}", encode_hex(chunk));
        }
        out.push('\n');
    }
    for sym in &image.symbols {
        let kind = if sym.is_function { "func" } else { "obj" };
        let _ = writeln!(
            out,
            "symbol {} {:x} {:x} {}",
            sym.name, sym.vaddr, sym.size, kind
        );
    }
    let _ = writeln!(out, "entry {:x}", image.entry_point);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = "# a tiny program\nmode x64\nsection .text 401000 code 554889e5 5dc3\nsection .rodata 0x402000 data 01020304\nsymbol main 401000 6 func\nentry 401000\n";

    #[test]
    fn parses_sample() {
        let img = parse("s", SAMPLE).unwrap();
        assert_eq!(img.mode, Mode::X64);
        assert_eq!(img.sections[0].bytes, vec![0x55, 0x48, 0x89, 0xe5, 0x5d, 0xc3]);
        assert_eq!(img.sections[1].kind, SectionKind::Data);
        assert_eq!(img.symbols[0].name, "main");
        assert_eq!(img.entry_point, 0x401000);
    }

    #[test]
    fn emit_round_trips() {
        let img = parse("s", SAMPLE).unwrap();
        assert_eq!(parse("s", &emit(&img)).unwrap(), img);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let bad = "mode x64\nsection .text 401000 code zz\nentry 401000\n";
        match parse("s", bad) {
            Err(LoadError::Fixture { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn detection_requires_mode_first() {
        assert!(looks_like_fixture(b"# c\n\nmode x86\n"));
        assert!(!looks_like_fixture(b"entry 1\nmode x86\n"));
        assert!(!looks_like_fixture(&[0xff, 0xfe]));
    }
}
