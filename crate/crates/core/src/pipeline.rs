//! End-to-end analysis: base disassembly, function entries, symbolization
//! and CFG reconstruction, producing [`Facts`].

use std::collections::{BTreeMap, BTreeSet};

use crate::cfg::nonret::Program;
use crate::cfg::{
    build_edges, constant_prop_call_targets, detect_nonreturning, detect_tail_calls, finalize_cfg,
    resolve_jump_table, seed_addresses, Cfg, Functions, JumpTable, NonRetSet, TailCall, TailRule, Unresolved,
};
use crate::config::{ConstPropScope, JtStrategy, MainMethod, NonRetMode, StrategyConfig, TailCallRules};
use crate::decode::FlowKind;
use crate::eval::{Facts, InstFact, JtabFact, Phase, XrefFact};
use crate::funcid::{collect_entries, eh_frame_entries, find_main, EntryEvidence, EntrySource, FunctionEntry};
use crate::image::{code_regions, symbol_seeds, BinaryImage};
use crate::recursive::{apply_gap_heuristics, recursive_descent, CfgHooks, DisasmResult, NoHooks, Provenance};
use crate::sweep::{linear_sweep, SweepResult};
use crate::symbolize::{symbolize, SymbolizeOutput};

const MAX_ROUNDS: usize = 8;

/// Everything one pipeline run produced.
#[derive(Debug, Clone, Default)]
pub struct Analysis {
    pub config: StrategyConfig,
    pub result: DisasmResult,
    pub sweep: Option<SweepResult>,
    pub main: Option<u64>,
    pub entries: Vec<FunctionEntry>,
    pub functions: Functions,
    pub symbols: SymbolizeOutput,
    pub tables: Vec<JumpTable>,
    pub unresolved: BTreeMap<u64, Unresolved>,
    pub indirect_calls: BTreeMap<u64, Vec<u64>>,
    pub tail_calls: Vec<TailCall>,
    pub nonret: NonRetSet,
    pub cfg: Cfg,
    pub rounds: usize,
    pub facts: Facts,
}

/// Knowledge fed back into the next descent round.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
struct Feedback {
    nonret: BTreeSet<u64>,
    tables: BTreeMap<u64, Vec<u64>>,
    extra_seeds: BTreeSet<u64>,
    indirect_targets: Vec<u64>,
    tail_targets: Vec<u64>,
}

impl CfgHooks for Feedback {
    fn is_non_returning(&self, callee: u64) -> bool {
        self.nonret.contains(&callee)
    }

    fn indirect_targets(&self, site: u64) -> &[u64] {
        self.tables.get(&site).map_or(&[], Vec::as_slice)
    }
}

pub fn analyze(image: &BinaryImage, config: &StrategyConfig) -> Analysis {
    let mut a = if config.is_linear() {
        analyze_linear(image, config)
    } else {
        analyze_descent(image, config)
    };
    a.config = config.clone();
    a.facts = build_facts(image, &a);
    a
}

fn analyze_linear(image: &BinaryImage, config: &StrategyConfig) -> Analysis {
    let ranges = if config.sweep_symbol_ranges {
        code_regions(image)
    } else {
        image.executable_spans()
    };
    let sweep = linear_sweep(image, &ranges, config.sweep_policy);
    let mut result = DisasmResult {
        instructions: sweep.instructions.clone(),
        ..DisasmResult::default()
    };
    result.provenance = result
        .instructions
        .keys()
        .map(|&a| (a, Provenance::SeedReachable))
        .collect();
    result.normalize(&NoHooks);
    let entries: BTreeSet<u64> = image.function_symbols().map(|s| s.vaddr).collect();
    let symbols = if config.symbolize {
        symbolize(image, &result, &entries, config)
    } else {
        SymbolizeOutput::default()
    };
    Analysis {
        result,
        sweep: Some(sweep),
        symbols,
        rounds: 1,
        ..Analysis::default()
    }
}

fn main_evidence(image: &BinaryImage, config: &StrategyConfig) -> Option<(u64, EntrySource)> {
    let source = match config.main_method {
        MainMethod::Off => return None,
        MainMethod::ArgPropagation => EntrySource::MainArg,
        MainMethod::BytePattern => EntrySource::MainPattern,
    };
    find_main(image, config.main_method)
        .filter(|&m| image.is_executable(m))
        .map(|m| (m, source))
}

fn analyze_descent(image: &BinaryImage, config: &StrategyConfig) -> Analysis {
    let main = main_evidence(image, config);
    let eh = if config.eh_frame {
        eh_frame_entries(image).unwrap_or_default()
    } else {
        Vec::new()
    };
    let mut base_seeds: BTreeSet<u64> = if config.seed_symbols {
        symbol_seeds(image).into_iter().collect()
    } else {
        BTreeSet::from([image.entry_point])
    };
    base_seeds.extend(main.map(|m| m.0));
    base_seeds.extend(eh.iter().copied().filter(|&a| image.is_executable(a)));

    let mut fb = Feedback {
        nonret: match config.nonret_mode {
            NonRetMode::Off => BTreeSet::new(),
            _ => seed_addresses(image, &config.nonret_seeds),
        },
        ..Feedback::default()
    };
    let mut first_rule: BTreeMap<(u64, u64), TailRule> = BTreeMap::new();
    let mut rounds = 0;
    loop {
        rounds += 1;
        let seeds: Vec<u64> = base_seeds.union(&fb.extra_seeds).copied().collect();
        let result = recursive_descent(image, &seeds, &fb);
        let mut result = apply_gap_heuristics(result, image, config, &fb);
        let evidence = EntryEvidence {
            main,
            eh_frame: eh.clone(),
            indirect_call_targets: fb.indirect_targets.clone(),
            tail_call_targets: fb.tail_targets.clone(),
        };
        let entries = collect_entries(image, &result, &evidence, config);
        let entry_addrs: Vec<u64> = entries.iter().map(|e| e.vaddr).collect();
        let mut all_seeds: BTreeSet<u64> = result.seeds.iter().copied().collect();
        all_seeds.extend(entry_addrs.iter().copied());
        result.seeds = all_seeds.into_iter().collect();
        result.normalize(&fb);
        let functions = Functions::compute(&result, &entry_addrs);
        let entry_set: BTreeSet<u64> = entry_addrs.iter().copied().collect();

        let mut tables = Vec::new();
        let mut unresolved = BTreeMap::new();
        let mut indirect_calls: BTreeMap<u64, Vec<u64>> = BTreeMap::new();
        for ins in result.instructions.values() {
            match ins.flow {
                FlowKind::JumpIndirect if config.jt_strategy != JtStrategy::Off => {
                    match resolve_jump_table(&result, image, &functions, ins.vaddr, config.jt_strategy, config) {
                        Ok(t) => tables.push(t),
                        Err(reason) => {
                            unresolved.insert(ins.vaddr, reason);
                            if config.jt_strategy == JtStrategy::PathGhidra {
                                let targets = constant_prop_call_targets(
                                    &result,
                                    image,
                                    &functions,
                                    ins.vaddr,
                                    ConstPropScope::Function,
                                );
                                if !targets.is_empty() {
                                    indirect_calls.insert(ins.vaddr, targets);
                                }
                            }
                        }
                    }
                }
                FlowKind::CallIndirect if config.constprop != ConstPropScope::Off => {
                    let targets = constant_prop_call_targets(&result, image, &functions, ins.vaddr, config.constprop);
                    if !targets.is_empty() {
                        indirect_calls.insert(ins.vaddr, targets);
                    }
                }
                _ => {}
            }
        }
        let mut tail_calls = if config.tailcall_rules == TailCallRules::Off {
            Vec::new()
        } else {
            detect_tail_calls(&result, image, &functions, &entry_set, config.tailcall_rules, config)
        };
        // Keep the rule from the round that first found each tail call.
        for t in &mut tail_calls {
            t.rule_fired = *first_rule.entry((t.site, t.target)).or_insert(t.rule_fired);
        }
        let xref_targets: BTreeSet<u64> = result
            .instructions
            .values()
            .flat_map(|i| i.const_operands.iter().map(|c| c.value))
            .collect();
        let nonret = detect_nonreturning(
            &Program {
                result: &result,
                image,
                functions: &functions,
                tail_calls: &tail_calls,
                xref_targets: &xref_targets,
            },
            config.nonret_mode,
            config,
        );

        let mut indirect_targets: Vec<u64> = indirect_calls.values().flatten().copied().collect();
        indirect_targets.sort_unstable();
        indirect_targets.dedup();
        let mut tail_targets: Vec<u64> = tail_calls.iter().map(|t| t.target).collect();
        tail_targets.sort_unstable();
        tail_targets.dedup();
        let next = Feedback {
            nonret: nonret.members.clone(),
            tables: tables.iter().map(|t| (t.site, t.unique_targets())).collect(),
            extra_seeds: indirect_targets.iter().copied().collect(),
            indirect_targets,
            tail_targets,
        };
        if next == fb || rounds >= MAX_ROUNDS {
            let symbols = if config.symbolize {
                symbolize(image, &result, &entry_set, config)
            } else {
                SymbolizeOutput::default()
            };
            let cfg = finalize_cfg(build_edges(&result), &result, &functions, &tables, &tail_calls, &nonret, &indirect_calls);
            return Analysis {
                result,
                main: main.map(|m| m.0),
                entries,
                functions,
                symbols,
                tables,
                unresolved,
                indirect_calls,
                tail_calls,
                nonret,
                cfg,
                rounds,
                ..Analysis::default()
            };
        }
        fb = next;
    }
}

/// Phases a configuration produces.
pub fn produced_phases(config: &StrategyConfig) -> BTreeSet<Phase> {
    let mut p = BTreeSet::from([Phase::Inst]);
    if config.symbolize {
        p.insert(Phase::Xref);
    }
    if config.is_linear() {
        return p;
    }
    p.extend([Phase::Func, Phase::Edge, Phase::Cg]);
    if config.tailcall_rules != TailCallRules::Off {
        p.insert(Phase::Tailcall);
    }
    if config.nonret_mode != NonRetMode::Off {
        p.insert(Phase::Nonret);
    }
    if config.jt_strategy != JtStrategy::Off {
        p.insert(Phase::Jtab);
    }
    p
}

fn build_facts(image: &BinaryImage, a: &Analysis) -> Facts {
    let config = &a.config;
    let mut f = Facts::default();
    f.set_header("profile", config.profile.clone());
    f.set_header("mode", image.mode.name());
    for (k, v) in config.entries() {
        f.set_header(k, v);
    }
    let phases = produced_phases(config);
    f.declare_phases(&phases);

    for (&vaddr, ins) in &a.result.instructions {
        let provenance = a
            .result
            .provenance
            .get(&vaddr)
            .filter(|p| **p != Provenance::SeedReachable)
            .map(|p| p.name().to_string());
        f.instructions.insert(
            vaddr,
            InstFact {
                size: ins.length as u64,
                provenance,
            },
        );
    }
    if phases.contains(&Phase::Xref) {
        for x in &a.symbols.xrefs {
            f.xrefs.insert(XrefFact {
                kind: x.kind,
                from: x.from,
                to: x.to,
                width: x.width as u64,
            });
        }
        for (c, r) in &a.symbols.rejections {
            f.rejections.entry((c.from, c.value)).or_insert_with(|| r.name().to_string());
        }
    }
    if config.is_linear() {
        return f;
    }
    f.main = a.main;
    for e in &a.entries {
        f.functions.insert(e.vaddr, Some(e.source.name().to_string()));
    }
    f.edges = a.cfg.edges.iter().map(|e| (e.from, e.to)).collect();
    f.calls = a.cfg.call_graph.iter().map(|c| (c.site, c.callee)).collect();
    if phases.contains(&Phase::Tailcall) {
        for t in &a.tail_calls {
            f.tail_calls.insert((t.site, t.target), Some(t.rule_fired.name().to_string()));
        }
    }
    if phases.contains(&Phase::Nonret) {
        f.nonret = a.nonret.members.clone();
    }
    if phases.contains(&Phase::Jtab) {
        for t in &a.tables {
            f.jump_tables.insert(
                t.site,
                JtabFact {
                    base: t.base,
                    entry_width: t.entry_width as u64,
                    targets: t.targets.clone(),
                },
            );
        }
        for (site, r) in &a.unresolved {
            f.unresolved.insert(*site, r.name().to_string());
        }
    }
    f
}
