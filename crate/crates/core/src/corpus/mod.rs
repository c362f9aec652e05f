//! Hand-assembled fixture corpus with exact ground truth.
//!
//! Every fixture is built byte by byte, so instruction boundaries, padding,
//! references, jump tables, tail calls and non-returning functions are known
//! without any disassembler. CFG edges and the call graph are then derived
//! from that truth by the library's own block and edge builders.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use crate::cfg::{build_edges, finalize_cfg, Functions, JumpTable, NonRetSet, TableEncoding, TailCall, TailRule};
use crate::decode::decode_at;
use crate::eval::{Facts, InstFact, JtabFact, Phase, XrefFact};
use crate::image::{elf, BinaryImage};
use crate::recursive::{CfgHooks, DisasmResult, Provenance};
use crate::symbolize::XrefKind;

mod asm;
mod fixtures;

use asm::Built;

/// One corpus program and its ground truth.
#[derive(Debug, Clone)]
pub struct Fixture {
    pub name: &'static str,
    pub description: &'static str,
    pub image: BinaryImage,
    pub truth: Facts,
    /// Named addresses, for tests that need to point at something.
    pub labels: BTreeMap<String, u64>,
}

impl Fixture {
    pub fn addr(&self, label: &str) -> u64 {
        *self
            .labels
            .get(label)
            .unwrap_or_else(|| panic!("{}: no label {label}", self.name))
    }
}

/// Every fixture, in a fixed order.
pub fn fixtures() -> Vec<Fixture> {
    fixtures::ALL
        .iter()
        .map(|(name, description, build)| finish(name, description, build()))
        .collect()
}

pub fn fixture(name: &str) -> Option<Fixture> {
    fixtures::ALL
        .iter()
        .find(|(n, ..)| *n == name)
        .map(|(name, description, build)| finish(name, description, build()))
}

pub fn names() -> Vec<&'static str> {
    fixtures::ALL.iter().map(|(n, ..)| *n).collect()
}

/// Writes `<name>.elf` and `<name>.truth` for every fixture into `dir`.
pub fn export(dir: &Path) -> io::Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut out = Vec::new();
    for f in fixtures() {
        let bin = dir.join(format!("{}.elf", f.name));
        fs::write(&bin, elf::write(&f.image))?;
        fs::write(dir.join(format!("{}.truth", f.name)), f.truth.emit())?;
        out.push(bin);
    }
    Ok(out)
}

struct TruthHooks {
    nonret: BTreeSet<u64>,
    tables: BTreeMap<u64, Vec<u64>>,
}

impl CfgHooks for TruthHooks {
    fn is_non_returning(&self, callee: u64) -> bool {
        self.nonret.contains(&callee)
    }

    fn indirect_targets(&self, site: u64) -> &[u64] {
        self.tables.get(&site).map_or(&[], Vec::as_slice)
    }
}

fn finish(name: &'static str, description: &'static str, built: Built) -> Fixture {
    let Built { image, labels, truth } = built;
    let addr = |l: &String| labels[l];
    let ps = image.mode.pointer_size();

    let mut result = DisasmResult::default();
    for &(a, size) in &truth.insts {
        let ins = decode_at(&image, a, image.mode)
            .unwrap_or_else(|e| panic!("{name}: truth instruction at {a:#x} does not decode: {e}"));
        assert_eq!(u64::from(ins.length), size, "{name}: length mismatch at {a:#x}");
        result.instructions.insert(a, ins);
        result.provenance.insert(a, Provenance::SeedReachable);
    }
    let funcs: Vec<u64> = truth.funcs.iter().map(addr).collect();
    let nonret: BTreeSet<u64> = truth.nonret.iter().map(addr).collect();
    let tables: Vec<JumpTable> = truth
        .tables
        .iter()
        .map(|t| {
            let base = addr(&t.base);
            let targets: Vec<u64> = t.targets.iter().map(addr).collect();
            JumpTable {
                site: t.site,
                base,
                entry_base: base,
                entry_width: t.entry_width as u8,
                index_low: 0,
                index_bound: targets.len() as u64 - 1,
                targets,
                encoding: TableEncoding::Absolute,
            }
        })
        .collect();
    let hooks = TruthHooks {
        nonret: nonret.clone(),
        tables: tables.iter().map(|t| (t.site, t.unique_targets())).collect(),
    };
    result.seeds = funcs.clone();
    result.normalize(&hooks);
    let functions = Functions::compute(&result, &funcs);
    let tail_calls: Vec<TailCall> = truth
        .tail_calls
        .iter()
        .map(|(site, l)| TailCall {
            site: *site,
            target: addr(l),
            rule_fired: TailRule::KnownEntry,
        })
        .collect();
    let mut indirect: BTreeMap<u64, Vec<u64>> = BTreeMap::new();
    for (site, l) in &truth.indirect_calls {
        indirect.entry(*site).or_default().push(addr(l));
    }
    let nonret_set = NonRetSet {
        members: nonret.clone(),
        seeds: BTreeSet::new(),
    };
    let cfg = finalize_cfg(
        build_edges(&result),
        &result,
        &functions,
        &tables,
        &tail_calls,
        &nonret_set,
        &indirect,
    );

    let mut f = Facts::default();
    f.set_header("fixture", name);
    f.set_header("mode", image.mode.name());
    f.declare_phases(&Phase::ALL.iter().copied().collect());
    for &(a, size) in &truth.insts {
        f.instructions.insert(a, InstFact { size, provenance: None });
    }
    for &(a, size) in &truth.pads {
        f.padding.insert(a, size);
    }
    for &e in &funcs {
        f.functions.insert(e, None);
    }
    f.main = truth.main.as_ref().map(addr);
    for x in &truth.xrefs {
        let to = addr(&x.label).wrapping_add(x.addend as u64);
        f.xrefs.insert(XrefFact {
            kind: XrefKind::new(x.from_code, image.is_executable(to)),
            from: x.from,
            to,
            width: ps,
        });
    }
    for t in &tables {
        f.jump_tables.insert(
            t.site,
            JtabFact {
                base: t.base,
                entry_width: u64::from(t.entry_width),
                targets: t.targets.clone(),
            },
        );
    }
    f.edges = cfg.edges.iter().map(|e| (e.from, e.to)).collect();
    f.calls = cfg.call_graph.iter().map(|c| (c.site, c.callee)).collect();
    for t in &tail_calls {
        f.tail_calls.insert((t.site, t.target), None);
    }
    f.nonret = nonret;

    let text = f.emit();
    let truth = Facts::parse_truth(&text).unwrap_or_else(|e| panic!("{name}: {e}"));
    Fixture {
        name,
        description,
        image,
        truth,
        labels,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_fixture_builds() {
        let all = fixtures();
        assert_eq!(all.len(), names().len());
        for f in &all {
            assert!(!f.truth.instructions.is_empty(), "{}", f.name);
            assert!(!f.truth.functions.is_empty(), "{}", f.name);
        }
    }

    #[test]
    fn export_writes_pairs() {
        let dir = std::env::temp_dir().join(format!("dissect-corpus-{}", std::process::id()));
        let written = export(&dir).unwrap();
        assert_eq!(written.len(), names().len());
        for bin in &written {
            let img = crate::image::load_binary(bin).unwrap();
            let truth = Facts::parse_truth(&fs::read_to_string(bin.with_extension("truth")).unwrap()).unwrap();
            assert_eq!(img.entry_point, fixture(img.path.rsplit('/').next().unwrap().trim_end_matches(".elf")).unwrap().image.entry_point);
            assert!(!truth.instructions.is_empty());
        }
        fs::remove_dir_all(&dir).unwrap();
    }
}
