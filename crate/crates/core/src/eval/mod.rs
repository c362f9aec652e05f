//! Ground truth and result facts, scoring, error attribution and reports.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};
use std::str::FromStr;

use thiserror::Error;

use crate::image::Span;
use crate::symbolize::XrefKind;

mod attribute;
mod report;
mod score;

pub use attribute::{attribute_errors, causes_for, ErrorAttribution, ErrorKind};
pub use report::{aggregate, emit_report, ReportFormat, ReportRow};
pub use score::{score, scored_items, Metrics};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Phase {
    Inst,
    Xref,
    Func,
    Edge,
    Cg,
    Tailcall,
    Nonret,
    Jtab,
}

impl Phase {
    pub const ALL: [Phase; 8] = [
        Phase::Inst,
        Phase::Xref,
        Phase::Func,
        Phase::Edge,
        Phase::Cg,
        Phase::Tailcall,
        Phase::Nonret,
        Phase::Jtab,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Phase::Inst => "inst",
            Phase::Xref => "xref",
            Phase::Func => "func",
            Phase::Edge => "edge",
            Phase::Cg => "cg",
            Phase::Tailcall => "tailcall",
            Phase::Nonret => "nonret",
            Phase::Jtab => "jtab",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Phase::ALL.into_iter().find(|p| p.name() == s)
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Phase {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Phase::parse(s).ok_or_else(|| {
            let names: Vec<&str> = Phase::ALL.iter().map(|p| p.name()).collect();
            format!("unknown phase `{s}` (expected one of {})", names.join(", "))
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FactsError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("line {line}: instruction at {vaddr:#x} overlaps the one at {other:#x}")]
    Overlap { line: usize, vaddr: u64, other: u64 },
    #[error("line {line}: padding at {vaddr:#x} overlaps an instruction")]
    PadOverlap { line: usize, vaddr: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct InstFact {
    pub size: u64,
    pub provenance: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct XrefFact {
    pub kind: XrefKind,
    pub from: u64,
    pub to: u64,
    pub width: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct JtabFact {
    pub base: u64,
    pub entry_width: u64,
    pub targets: Vec<u64>,
}

impl JtabFact {
    pub fn target_set(&self) -> BTreeSet<u64> {
        self.targets.iter().copied().collect()
    }
}

/// Everything known about one binary, either authored ground truth or an
/// analysis result. Both share one line-oriented text format.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Facts {
    /// `# key = value` lines, in order.
    pub header: Vec<(String, String)>,
    pub instructions: BTreeMap<u64, InstFact>,
    pub padding: BTreeMap<u64, u64>,
    /// Entry address and, for results, the evidence that produced it.
    pub functions: BTreeMap<u64, Option<String>>,
    pub main: Option<u64>,
    pub xrefs: BTreeSet<XrefFact>,
    pub jump_tables: BTreeMap<u64, JtabFact>,
    pub edges: BTreeSet<(u64, u64)>,
    /// Call sites and their callees.
    pub calls: BTreeSet<(u64, u64)>,
    pub tail_calls: BTreeMap<(u64, u64), Option<String>>,
    pub nonret: BTreeSet<u64>,
    /// Rejected symbolization candidates: (from, value) → reason.
    pub rejections: BTreeMap<(u64, u64), String>,
    /// Unresolved indirect jumps and the reason.
    pub unresolved: BTreeMap<u64, String>,
}

fn hex(tok: &str) -> Option<u64> {
    let t = tok.strip_prefix("0x").unwrap_or(tok);
    u64::from_str_radix(t, 16).ok()
}

impl Facts {
    pub fn header_value(&self, key: &str) -> Option<&str> {
        self.header
            .iter()
            .rev()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn set_header(&mut self, key: &str, value: impl Into<String>) {
        let value = value.into();
        match self.header.iter_mut().find(|(k, _)| k == key) {
            Some(slot) => slot.1 = value,
            None => self.header.push((key.to_string(), value)),
        }
    }

    /// Phases declared in the header, or those with at least one record.
    pub fn phases(&self) -> BTreeSet<Phase> {
        if let Some(v) = self.header_value("phases") {
            return v.split_whitespace().filter_map(Phase::parse).collect();
        }
        let mut out = BTreeSet::new();
        let checks = [
            (Phase::Inst, !self.instructions.is_empty()),
            (Phase::Xref, !self.xrefs.is_empty()),
            (Phase::Func, !self.functions.is_empty()),
            (Phase::Edge, !self.edges.is_empty()),
            (Phase::Cg, !self.calls.is_empty()),
            (Phase::Tailcall, !self.tail_calls.is_empty()),
            (Phase::Nonret, !self.nonret.is_empty()),
            (Phase::Jtab, !self.jump_tables.is_empty() || !self.unresolved.is_empty()),
        ];
        for (p, present) in checks {
            if present {
                out.insert(p);
            }
        }
        out
    }

    pub fn declare_phases(&mut self, phases: &BTreeSet<Phase>) {
        let names: Vec<&str> = phases.iter().map(|p| p.name()).collect();
        self.set_header("phases", names.join(" "));
    }

    /// Parses a facts file. Overlapping instructions are allowed here; use
    /// [`Facts::parse_truth`] for ground truth.
    pub fn parse(text: &str) -> Result<Facts, FactsError> {
        Ok(Self::parse_lines(text)?.0)
    }

    /// Parses ground truth and checks its invariants.
    pub fn parse_truth(text: &str) -> Result<Facts, FactsError> {
        let (facts, lines) = Self::parse_lines(text)?;
        facts.validate_truth(&lines)?;
        Ok(facts)
    }

    fn parse_lines(text: &str) -> Result<(Facts, BTreeMap<(u8, u64), usize>), FactsError> {
        let mut f = Facts::default();
        let mut lines: BTreeMap<(u8, u64), usize> = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let trimmed = raw.trim();
            if let Some(comment) = trimmed.strip_prefix('#') {
                if let Some((k, v)) = comment.split_once('=') {
                    let k = k.trim();
                    if !k.is_empty() && !k.contains(char::is_whitespace) {
                        f.header.push((k.to_string(), v.trim().to_string()));
                    }
                }
                continue;
            }
            if trimmed.is_empty() {
                continue;
            }
            let err = |message: String| FactsError::Syntax { line, message };
            let mut toks = trimmed.split_whitespace();
            let tag = toks.next().unwrap_or_default();
            let rest: Vec<&str> = toks.collect();
            let num = |idx: usize, what: &str| -> Result<u64, FactsError> {
                let tok = rest
                    .get(idx)
                    .ok_or_else(|| err(format!("{tag}: missing {what}")))?;
                hex(tok).ok_or_else(|| err(format!("{tag}: bad {what} `{tok}`")))
            };
            let arity = |min: usize, max: usize| -> Result<(), FactsError> {
                if rest.len() < min || rest.len() > max {
                    Err(err(format!(
                        "{tag}: expected {min}..={max} fields, found {}",
                        rest.len()
                    )))
                } else {
                    Ok(())
                }
            };
            match tag {
                "[inst]" => {
                    arity(2, 3)?;
                    let a = num(0, "address")?;
                    let size = num(1, "size")?;
                    if size == 0 {
                        return Err(err("[inst]: zero size".into()));
                    }
                    lines.insert((0, a), line);
                    f.instructions.insert(
                        a,
                        InstFact {
                            size,
                            provenance: rest.get(2).map(|s| s.to_string()),
                        },
                    );
                }
                "[pad]" => {
                    arity(2, 2)?;
                    let a = num(0, "address")?;
                    lines.insert((1, a), line);
                    f.padding.insert(a, num(1, "size")?);
                }
                "[func]" => {
                    arity(1, 2)?;
                    f.functions.insert(num(0, "address")?, rest.get(1).map(|s| s.to_string()));
                }
                "[main]" => {
                    arity(1, 1)?;
                    f.main = Some(num(0, "address")?);
                }
                "[xref]" => {
                    arity(4, 4)?;
                    let kind = XrefKind::parse(rest[0])
                        .ok_or_else(|| err(format!("[xref]: bad kind `{}`", rest[0])))?;
                    f.xrefs.insert(XrefFact {
                        kind,
                        from: num(1, "source")?,
                        to: num(2, "target")?,
                        width: num(3, "width")?,
                    });
                }
                "[jtab]" => {
                    if rest.len() < 3 {
                        return Err(err("[jtab]: expected site, base, width and targets".into()));
                    }
                    let targets = (3..rest.len())
                        .map(|i| num(i, "target"))
                        .collect::<Result<Vec<_>, _>>()?;
                    f.jump_tables.insert(
                        num(0, "site")?,
                        JtabFact {
                            base: num(1, "base")?,
                            entry_width: num(2, "entry width")?,
                            targets,
                        },
                    );
                }
                "[noret]" => {
                    arity(1, 1)?;
                    f.nonret.insert(num(0, "address")?);
                }
                "[edge]" => {
                    arity(2, 2)?;
                    f.edges.insert((num(0, "source")?, num(1, "target")?));
                }
                "[call]" => {
                    arity(2, 2)?;
                    f.calls.insert((num(0, "site")?, num(1, "callee")?));
                }
                "[tcall]" => {
                    arity(2, 3)?;
                    f.tail_calls.insert(
                        (num(0, "site")?, num(1, "target")?),
                        rest.get(2).map(|s| s.to_string()),
                    );
                }
                "[reject]" => {
                    arity(3, 3)?;
                    f.rejections
                        .insert((num(0, "source")?, num(1, "value")?), rest[2].to_string());
                }
                "[unres]" => {
                    arity(2, 2)?;
                    f.unresolved.insert(num(0, "site")?, rest[1].to_string());
                }
                other => return Err(err(format!("unknown record `{other}`"))),
            }
        }
        Ok((f, lines))
    }

    fn validate_truth(&self, lines: &BTreeMap<(u8, u64), usize>) -> Result<(), FactsError> {
        let mut prev: Option<(u64, u64)> = None;
        for (&a, ins) in &self.instructions {
            if let Some((pa, pend)) = prev {
                if a < pend {
                    return Err(FactsError::Overlap {
                        line: lines[&(0, a)].max(lines[&(0, pa)]),
                        vaddr: a,
                        other: pa,
                    });
                }
            }
            prev = Some((a, a + ins.size));
        }
        for (&a, &size) in &self.padding {
            let span = Span::with_size(a, size);
            let hit = self
                .instructions
                .range(..span.end)
                .next_back()
                .is_some_and(|(&ia, ins)| ia + ins.size > span.start);
            if hit {
                return Err(FactsError::PadOverlap {
                    line: lines[&(1, a)],
                    vaddr: a,
                });
            }
        }
        Ok(())
    }

    /// Canonical text form.
    pub fn emit(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.header {
            let _ = writeln!(s, "# {k} = {v}");
        }
        for (a, i) in &self.instructions {
            let _ = match &i.provenance {
                Some(p) => writeln!(s, "[inst] {a:x} {:x} {p}", i.size),
                None => writeln!(s, "[inst] {a:x} {:x}", i.size),
            };
        }
        for (a, size) in &self.padding {
            let _ = writeln!(s, "[pad] {a:x} {size:x}");
        }
        for (a, src) in &self.functions {
            let _ = match src {
                Some(src) => writeln!(s, "[func] {a:x} {src}"),
                None => writeln!(s, "[func] {a:x}"),
            };
        }
        if let Some(m) = self.main {
            let _ = writeln!(s, "[main] {m:x}");
        }
        for x in &self.xrefs {
            let _ = writeln!(s, "[xref] {} {:x} {:x} {:x}", x.kind, x.from, x.to, x.width);
        }
        for (site, t) in &self.jump_tables {
            let _ = write!(s, "[jtab] {site:x} {:x} {:x}", t.base, t.entry_width);
            for target in &t.targets {
                let _ = write!(s, " {target:x}");
            }
            s.push('\n');
        }
        for (a, b) in &self.edges {
            let _ = writeln!(s, "[edge] {a:x} {b:x}");
        }
        for (a, b) in &self.calls {
            let _ = writeln!(s, "[call] {a:x} {b:x}");
        }
        for ((a, b), rule) in &self.tail_calls {
            let _ = match rule {
                Some(r) => writeln!(s, "[tcall] {a:x} {b:x} {r}"),
                None => writeln!(s, "[tcall] {a:x} {b:x}"),
            };
        }
        for a in &self.nonret {
            let _ = writeln!(s, "[noret] {a:x}");
        }
        for ((a, v), r) in &self.rejections {
            let _ = writeln!(s, "[reject] {a:x} {v:x} {r}");
        }
        for (a, r) in &self.unresolved {
            let _ = writeln!(s, "[unres] {a:x} {r}");
        }
        s
    }

    /// Entry of the function containing `addr` by address order.
    pub fn function_of(&self, addr: u64) -> Option<u64> {
        self.functions.range(..=addr).next_back().map(|(&a, _)| a)
    }

    /// Whether a recorded instruction starting before `addr` covers it.
    pub fn covering_instruction(&self, addr: u64) -> Option<u64> {
        self.instructions
            .range(..=addr)
            .rev()
            .take(16)
            .find(|(&a, i)| a + i.size > addr)
            .map(|(&a, _)| a)
    }

    pub fn pad_containing(&self, addr: u64) -> Option<Span> {
        self.padding
            .range(..=addr)
            .next_back()
            .map(|(&a, &s)| Span::with_size(a, s))
            .filter(|s| s.contains(addr))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overlap_is_rejected_with_line() {
        let e = Facts::parse_truth("[inst] 1000 2\n[inst] 1001 3\n").unwrap_err();
        assert_eq!(
            e,
            FactsError::Overlap {
                line: 2,
                vaddr: 0x1001,
                other: 0x1000
            }
        );
        assert!(Facts::parse("[inst] 1000 2\n[inst] 1001 3\n").is_ok());
    }

    #[test]
    fn empty_file_is_valid() {
        assert_eq!(Facts::parse_truth("").unwrap(), Facts::default());
    }

    #[test]
    fn canonical_round_trip() {
        let text = "# profile = pure\n[inst] 1000 2\n[inst] 1002 1 prologue_match\n[pad] 1003 d\n[func] 1000\n[main] 1000\n\
                    [xref] c2d 1000 2000 8\n[jtab] 1002 2000 4 1000 1002\n[edge] 1000 1002\n[call] 1000 1002\n\
                    [tcall] 1002 1000 known_entry\n[noret] 1002\n[reject] 2000 5 too_small\n[unres] 1002 no_bound\n";
        let f = Facts::parse_truth(text).unwrap();
        assert_eq!(f.emit(), text);
    }

    #[test]
    fn syntax_errors_carry_line() {
        match Facts::parse("\n[inst] zz 1\n") {
            Err(FactsError::Syntax { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        assert!(matches!(Facts::parse("[bogus] 1"), Err(FactsError::Syntax { line: 1, .. })));
    }

    #[test]
    fn phases_from_header_or_records() {
        let mut f = Facts::parse("[inst] 1 1\n").unwrap();
        assert_eq!(f.phases(), BTreeSet::from([Phase::Inst]));
        f.declare_phases(&BTreeSet::from([Phase::Inst, Phase::Jtab]));
        assert_eq!(f.phases(), BTreeSet::from([Phase::Inst, Phase::Jtab]));
    }
}
