//! Acceptance suite: one PASS/FAIL line per criterion.

use std::collections::{BTreeMap, BTreeSet};
use std::process::ExitCode;

use dissect_core::cfg::nonret::{fixed_point, Program};
use dissect_core::cfg::{detect_nonreturning, seed_addresses};
use dissect_core::config::{Alignment, JtStrategy, MainMethod, NonRetMode, PROFILES};
use dissect_core::corpus::{self, Fixture};
use dissect_core::decode::FlowKind;
use dissect_core::eval::{attribute_errors, score, scored_items, Phase};
use dissect_core::funcid::find_main;
use dissect_core::matrix::{load_corpus, run_matrix};
use dissect_core::pipeline::produced_phases;
use dissect_core::{analyze, Analysis, StrategyConfig};

type Check = Result<(), String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Check {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn profile(name: &str, overrides: &[(&str, &str)]) -> StrategyConfig {
    let mut c = StrategyConfig::profile(name).expect("profile");
    for (k, v) in overrides {
        c.set(k, v).expect("override");
    }
    c
}

fn fx(name: &str) -> Fixture {
    corpus::fixture(name).unwrap_or_else(|| panic!("no fixture {name}"))
}

fn has_xref(a: &Analysis, from: u64, to: u64) -> bool {
    a.facts.xrefs.iter().any(|x| x.from == from && x.to == to)
}

fn identity_scoring(all: &[Fixture]) -> Check {
    for f in all {
        for phase in Phase::ALL {
            let m = score(&f.truth, &f.truth, phase);
            ensure(m.precision == 1.0 && m.recall == 1.0 && m.fp == 0 && m.fn_ == 0, || {
                format!("{} {phase}: {m}", f.name)
            })?;
        }
    }
    Ok(())
}

fn pure_soundness(all: &[Fixture]) -> Check {
    let c = profile("pure", &[]);
    for f in all {
        let a = analyze(&f.image, &c);
        let m = score(&f.truth, &a.facts, Phase::Inst);
        ensure(m.fp == 0, || format!("{}: {m}", f.name))?;
    }
    Ok(())
}

fn coverage_ordering(all: &[Fixture]) -> Check {
    let configs = [
        profile("pure", &[]),
        profile("pure", &[("recursive.prologue_match", "true"), ("funcid.prologue", "true")]),
        profile("angr", &[]),
    ];
    let recall: Vec<f64> = configs
        .iter()
        .map(|c| {
            all.iter()
                .map(|f| score(&f.truth, &analyze(&f.image, c).facts, Phase::Inst).recall)
                .sum::<f64>()
                / all.len() as f64
        })
        .collect();
    ensure(recall[0] < recall[1] && recall[1] < recall[2], || {
        format!("pure {:.4}, pure+prologue {:.4}, angr {:.4}", recall[0], recall[1], recall[2])
    })
}

fn data_in_code() -> Check {
    let f = fx("data_in_code");
    let a = analyze(&f.image, &profile("objdump", &[]));
    let attr = attribute_errors(&f.truth, &a.facts, Phase::Inst, Some(&f.image));
    let fps: Vec<_> = attr.iter().filter(|e| e.kind.name() == "FP").collect();
    ensure(fps.iter().any(|e| e.cause == "Data"), || format!("no Data FP in {fps:?}"))?;
    ensure(fps.iter().all(|e| e.cause == "Data" || e.cause == "Pad"), || {
        format!("unexpected causes {fps:?}")
    })?;

    let psi = profile("psi", &[]);
    let f = fx("zero_pad");
    let a = analyze(&f.image, &psi);
    let m = score(&f.truth, &a.facts, Phase::Inst);
    ensure(m.fp == 0, || format!("zero_pad under psi: {m}"))?;
    let errors = &a.sweep.as_ref().expect("linear").errors;
    ensure(!errors.is_empty() && errors.iter().all(|e| e.repaired), || {
        format!("zero_pad errors {errors:?}")
    })?;

    let f = fx("nopw_pad");
    let a = analyze(&f.image, &psi);
    let errors = &a.sweep.as_ref().expect("linear").errors;
    ensure(errors.iter().any(|e| !e.repaired), || format!("nopw_pad errors {errors:?}"))?;
    let m = score(&f.truth, &a.facts, Phase::Inst);
    ensure(m.fp > 0, || format!("nopw_pad under psi: {m}"))
}

fn single_site(f: &Fixture) -> u64 {
    let sites: Vec<u64> = f.truth.jump_tables.keys().copied().collect();
    assert_eq!(sites.len(), 1, "{}", f.name);
    sites[0]
}

fn jump_tables() -> Check {
    let f = fx("switch_relative");
    let site = single_site(&f);
    let oracle = f.truth.jump_tables[&site].target_set();
    ensure(oracle.len() == 4, || format!("oracle has {} targets", oracle.len()))?;
    for s in ["slice_dyninst", "path_ghidra"] {
        let a = analyze(&f.image, &profile("pure", &[("cfg.jt_strategy", s)]));
        let got = a.facts.jump_tables.get(&site).map(|t| t.target_set());
        ensure(got.as_ref() == Some(&oracle), || format!("switch_relative under {s}: {got:x?}"))?;
    }

    let f = fx("switch_513");
    let site = single_site(&f);
    let r2 = analyze(&f.image, &profile("radare2", &[]));
    ensure(r2.unresolved.get(&site).map(|u| u.name()) == Some("bound_exceeds_threshold"), || {
        format!("radare2 on switch_513: {:?}", r2.unresolved.get(&site))
    })?;
    let gh = analyze(&f.image, &profile("ghidra", &[]));
    let t = gh.tables.iter().find(|t| t.site == site);
    ensure(t.is_some_and(|t| t.index_bound == 0x201), || format!("ghidra on switch_513: {t:?}"))?;
    ensure(score(&f.truth, &gh.facts, Phase::Jtab).tp == 1, || "ghidra table targets differ".into())?;

    let f = fx("switch_unbounded");
    let site = single_site(&f);
    for s in JtStrategy::ALL.iter().filter(|s| **s != JtStrategy::Off) {
        let a = analyze(&f.image, &profile("pure", &[("cfg.jt_strategy", s.name())]));
        let r = a.unresolved.get(&site).map(|u| u.name());
        ensure(r == Some("no_bound"), || format!("switch_unbounded under {s}: {r:?}"))?;
    }

    let f = fx("switch_double_bound");
    let site = single_site(&f);
    for s in [JtStrategy::SliceDyninst, JtStrategy::PathGhidra, JtStrategy::SliceAngr] {
        let a = analyze(&f.image, &profile("pure", &[("cfg.jt_strategy", s.name())]));
        let t = a.tables.iter().find(|t| t.site == site);
        ensure(t.is_some_and(|t| (t.index_low, t.index_bound) == (1, 4)), || {
            format!("switch_double_bound under {s}: {t:?}")
        })?;
        ensure(score(&f.truth, &a.facts, Phase::Jtab).tp == 1, || format!("{s}: wrong targets"))?;
    }
    Ok(())
}

fn symbolization() -> Check {
    let f = fx("unaligned_pointer");
    let (from, to) = (f.addr("packed") + 3, f.addr("handler"));
    for p in PROFILES {
        let c = profile(p, &[]);
        let found = has_xref(&analyze(&f.image, &c), from, to);
        let expect = c.symbolize && c.alignment == Alignment::None;
        ensure(found == expect, || format!("unaligned_pointer under {p}: found={found}"))?;
    }
    let a = analyze(&f.image, &profile("angr", &[("symbolize.alignment", "machine")]));
    ensure(!has_xref(&a, from, to), || "angr with machine alignment still finds it".into())?;

    let f = fx("fini_margin");
    let target = f.addr("before_rodata");
    ensure(target == 0x4e33be, || format!("target {target:#x}"))?;
    let found_by = |c: &StrategyConfig| analyze(&f.image, c).facts.xrefs.iter().any(|x| x.to == target);
    for p in PROFILES {
        let c = profile(p, &[]);
        if c.symbolize {
            ensure(found_by(&c) == (c.region_margin == 1024), || {
                format!("fini_margin under {p} (margin {})", c.region_margin)
            })?;
        }
    }
    ensure(!found_by(&profile("ghidra", &[("symbolize.region_margin", "0")])), || {
        "ghidra without margin finds it".into()
    })?;
    ensure(found_by(&profile("uroboros", &[("symbolize.region_margin", "1024")])), || {
        "uroboros with margin misses it".into()
    })?;

    let f = fx("sliding_string");
    let (slot, handler) = (f.addr("slot"), f.addr("handler"));
    ensure(slot == 0x804f170, || format!("slot {slot:#x}"))?;
    ensure(f.truth.xrefs.iter().any(|x| x.from == slot && x.to == handler), || "truth lacks the pointer".into())?;
    ensure(!has_xref(&analyze(&f.image, &profile("angr", &[])), slot, handler), || {
        "angr keeps the pointer".into()
    })?;
    ensure(
        has_xref(&analyze(&f.image, &profile("angr", &[("symbolize.type_sliding", "false")])), slot, handler),
        || "angr without sliding also loses it".into(),
    )?;

    let f = fx("lone_pointer");
    let vars = f.addr("vars");
    let slots = [(vars, f.addr("f1")), (vars + 16, f.addr("f2")), (vars + 24, f.addr("f3"))];
    let g = analyze(&f.image, &profile("ghidra", &[]));
    ensure(!has_xref(&g, slots[0].0, slots[0].1), || "ghidra keeps f1".into())?;
    ensure(slots[1..].iter().all(|&(a, b)| has_xref(&g, a, b)), || "ghidra drops the pair".into())?;
    let g1 = analyze(&f.image, &profile("ghidra", &[("symbolize.min_table_size", "1")]));
    ensure(has_xref(&g1, slots[0].0, slots[0].1), || "min table 1 still drops f1".into())
}

fn main_detection() -> Check {
    let f = fx("main_via_start");
    for m in [MainMethod::ArgPropagation, MainMethod::BytePattern] {
        let got = find_main(&f.image, m);
        ensure(got == Some(0x40e0e2), || format!("{m}: {got:x?}"))?;
    }
    ensure(f.truth.main == Some(0x40e0e2), || "truth main".into())
}

/// Brute force: a function returns when some simple path through its
/// blocks reaches a return, an unresolved indirect jump or a tail transfer
/// into a returning function. Iterated from the seeds until nothing changes.
fn path_oracle(a: &Analysis, seeds: &BTreeSet<u64>) -> BTreeSet<u64> {
    let r = &a.result;
    let fns = &a.functions.blocks;
    let tails: BTreeMap<u64, u64> = a.tail_calls.iter().map(|t| (t.site, t.target)).collect();

    fn walk(
        a: &Analysis,
        tails: &BTreeMap<u64, u64>,
        entry: u64,
        own: &BTreeSet<u64>,
        members: &BTreeSet<u64>,
        block: u64,
        path: &mut Vec<u64>,
    ) -> bool {
        let r = &a.result;
        let Some(b) = r.block_at(block) else { return false };
        let Some(last) = r.instructions.get(&b.last) else { return false };
        let mut next = b.successors.clone();
        match last.flow {
            FlowKind::Ret => return true,
            FlowKind::JumpIndirect if next.is_empty() => return true,
            FlowKind::CallDirect if last.branch_target.is_some_and(|t| members.contains(&t)) => next.clear(),
            _ => {}
        }
        if let Some(&t) = tails.get(&last.vaddr) {
            if !members.contains(&t) {
                return true;
            }
            next.retain(|&s| s != t);
        }
        for s in next {
            if s != entry && a.functions.blocks.contains_key(&s) {
                if !members.contains(&s) {
                    return true;
                }
            } else if own.contains(&s) && !path.contains(&s) {
                path.push(s);
                let found = walk(a, tails, entry, own, members, s, path);
                path.pop();
                if found {
                    return true;
                }
            }
        }
        false
    }

    let mut members = seeds.clone();
    loop {
        let mut next = seeds.clone();
        for (&e, own) in fns {
            let returns = match r.block_containing(e) {
                Some(b) => walk(a, &tails, e, own, &members, b.start, &mut vec![b.start]),
                None => true,
            };
            if !returns {
                next.insert(e);
            }
        }
        if next == members {
            return members;
        }
        members = next;
    }
}

fn program<'a>(a: &'a Analysis, image: &'a dissect_core::BinaryImage, xrefs: &'a BTreeSet<u64>) -> Program<'a> {
    Program {
        result: &a.result,
        image,
        functions: &a.functions,
        tail_calls: &a.tail_calls,
        xref_targets: xrefs,
    }
}

fn has_cascade(f: &Fixture, a: &Analysis) -> bool {
    let attr = attribute_errors(&f.truth, &a.facts, Phase::Inst, Some(&f.image));
    attr.iter().any(|e| e.cause == "Non-Ret")
}

fn nonret_fixed_point(all: &[Fixture]) -> Check {
    for f in all {
        for p in ["pure", "dyninst", "angr", "ghidra"] {
            let c = profile(p, &[]);
            let a = analyze(&f.image, &c);
            let xrefs: BTreeSet<u64> = a
                .result
                .instructions
                .values()
                .flat_map(|i| i.const_operands.iter().map(|c| c.value))
                .collect();
            let prog = program(&a, &f.image, &xrefs);
            let wl = detect_nonreturning(&prog, NonRetMode::WorklistPropagate, &c).members;
            let df = detect_nonreturning(&prog, NonRetMode::DepthFirst, &c).members;
            let seeds = seed_addresses(&f.image, &c.nonret_seeds);
            let oracle = path_oracle(&a, &seeds);
            ensure(wl == df && df == oracle && fixed_point(&prog, &seeds) == oracle, || {
                format!("{} under {p}: worklist {wl:x?} depth_first {df:x?} oracle {oracle:x?}", f.name)
            })?;
        }
    }

    let f = fx("nonret_cascade");
    let (exit, callee) = (f.addr("exit"), f.addr("f"));
    let without_exit = "_exit,_Exit,abort,__stack_chk_fail,__assert_fail";
    for mode in ["worklist_propagate", "depth_first"] {
        let with = analyze(&f.image, &profile("pure", &[("cfg.nonret_mode", mode)]));
        let without = analyze(
            &f.image,
            &profile("pure", &[("cfg.nonret_mode", mode), ("cfg.nonret_seeds", without_exit)]),
        );
        ensure(with.nonret.contains(exit) && with.nonret.contains(callee), || {
            format!("{mode}: seeded run misses {:x?}", with.nonret.members)
        })?;
        ensure(!has_cascade(&f, &with), || format!("{mode}: cascade with exit seeded"))?;
        ensure(!without.nonret.contains(callee), || format!("{mode}: f still non-returning"))?;
        ensure(has_cascade(&f, &without), || format!("{mode}: no cascade without exit"))?;
        let m = score(&f.truth, &without.facts, Phase::Inst);
        ensure(m.fp > 0, || format!("{mode}: {m}"))?;
    }
    Ok(())
}

fn tail_calls() -> Check {
    let f = fx("tailcall_cond");
    let g = f.addr("g");
    let a = analyze(&f.image, &profile("ghidra", &[]));
    ensure(!a.tail_calls.iter().any(|t| t.target == g), || "ghidra found the conditional tail call".into())?;
    let attr = attribute_errors(&f.truth, &a.facts, Phase::Tailcall, Some(&f.image));
    ensure(attr.iter().any(|e| e.cause == "Cond-Jump"), || format!("attribution {attr:?}"))?;
    ensure(a.tail_calls.iter().any(|t| t.target == f.addr("h")), || "ghidra misses the plain tail call".into())?;
    let d = analyze(&f.image, &profile("dyninst", &[]));
    ensure(d.tail_calls.iter().any(|t| t.target == g), || "dyninst misses the conditional tail call".into())?;

    let f = fx("tailcall_teardown");
    let a = analyze(&f.image, &profile("dyninst", &[]));
    let (h, f2) = (f.addr("h"), f.addr("f2"));
    let tp = a.tail_calls.iter().find(|t| t.target == h);
    ensure(tp.is_some_and(|t| t.rule_fired.name() == "teardown"), || format!("f -> h: {tp:?}"))?;
    let twin = a.tail_calls.iter().find(|t| t.site > f2 && t.site < h);
    ensure(twin.is_some_and(|t| t.rule_fired.name() == "teardown"), || format!("f2 twin: {twin:?}"))?;
    let m = score(&f.truth, &a.facts, Phase::Tailcall);
    ensure(m.fp >= 1 && m.tp >= 1, || format!("{m}"))
}

fn eval_algebra(all: &[Fixture]) -> Check {
    for f in all {
        for p in PROFILES {
            let c = profile(p, &[]);
            let a = analyze(&f.image, &c);
            for phase in produced_phases(&c) {
                let (t, r) = scored_items(&f.truth, &a.facts, phase);
                let m = score(&f.truth, &a.facts, phase);
                ensure(m.tp + m.fn_ == t.len() as u64 && m.tp + m.fp == r.len() as u64, || {
                    format!("{} {p} {phase}: {m} |t|={} |r|={}", f.name, t.len(), r.len())
                })?;
                let attr = attribute_errors(&f.truth, &a.facts, phase, Some(&f.image));
                ensure(attr.len() as u64 == m.fp + m.fn_, || format!("{} {p} {phase}: attribution", f.name))?;
            }
        }
    }
    let dir = std::env::temp_dir().join(format!("dissect-acceptance-{}", std::process::id()));
    corpus::export(&dir).map_err(|e| e.to_string())?;
    let (entries, failures) = load_corpus(&dir).map_err(|e| e.to_string())?;
    let _ = std::fs::remove_dir_all(&dir);
    ensure(failures.is_empty() && entries.len() == all.len(), || format!("load failures {failures:?}"))?;
    let profiles: Vec<StrategyConfig> = PROFILES.iter().map(|p| profile(p, &[])).collect();
    let first = run_matrix(&entries, &profiles);
    let second = run_matrix(&entries, &profiles);
    ensure(first.failures.is_empty(), || format!("matrix failures {:?}", first.failures))?;
    ensure(
        first.csv() == second.csv() && first.table() == second.table() && first.ablation("pure") == second.ablation("pure"),
        || "matrix output differs between runs".into(),
    )?;
    let (pure, angr) = (
        first.avg_recall("pure", Phase::Inst).unwrap_or(1.0),
        first.avg_recall("angr", Phase::Inst).unwrap_or(0.0),
    );
    ensure(pure < angr, || format!("matrix recall pure {pure:.4} angr {angr:.4}"))
}

fn main() -> ExitCode {
    let all = corpus::fixtures();
    let criteria: Vec<(&str, Box<dyn Fn() -> Check + '_>)> = vec![
        ("identity scoring", Box::new(|| identity_scoring(&all))),
        ("pure descent has no instruction false positives", Box::new(|| pure_soundness(&all))),
        ("instruction recall pure < pure+prologue < angr", Box::new(|| coverage_ordering(&all))),
        ("data-in-code and padding repair", Box::new(data_in_code)),
        ("jump table resolution", Box::new(jump_tables)),
        ("symbolization trade-offs", Box::new(symbolization)),
        ("main detection", Box::new(main_detection)),
        ("non-returning fixed point", Box::new(|| nonret_fixed_point(&all))),
        ("tail call rules", Box::new(tail_calls)),
        ("eval algebra and determinism", Box::new(|| eval_algebra(&all))),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        match check() {
            Ok(()) => println!("PASS {:>2} {name}", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {why}", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
