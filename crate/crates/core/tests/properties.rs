//! Properties of the facts format, scoring and attribution.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::OnceLock;

use dissect_core::config::PROFILES;
use dissect_core::corpus::{self, Fixture};
use dissect_core::eval::{attribute_errors, causes_for, score, scored_items, InstFact, JtabFact, Phase, XrefFact};
use dissect_core::symbolize::XrefKind;
use dissect_core::{Facts, StrategyConfig};
use proptest::prelude::*;

fn corpus() -> &'static [Fixture] {
    static ALL: OnceLock<Vec<Fixture>> = OnceLock::new();
    ALL.get_or_init(corpus::fixtures)
}

fn kind() -> impl Strategy<Value = XrefKind> {
    prop_oneof![
        Just(XrefKind::C2c),
        Just(XrefKind::C2d),
        Just(XrefKind::D2c),
        Just(XrefKind::D2d)
    ]
}

fn word() -> impl Strategy<Value = String> {
    "[a-z][a-z_]{0,10}"
}

prop_compose! {
    fn facts()(
        insts in proptest::collection::vec((0u64..6, 1u64..16, proptest::option::of(word())), 0..40),
        pads in proptest::collection::vec((0x9000u64..0x9fff, 1u64..32), 0..4),
        funcs in proptest::collection::btree_map(0x1000u64..0x2000, proptest::option::of(word()), 0..8),
        main in proptest::option::of(0x1000u64..0x2000),
        xrefs in proptest::collection::btree_set((kind(), 0u64..0x4000, 0u64..0x4000, prop_oneof![Just(4u64), Just(8u64)]), 0..10),
        tables in proptest::collection::btree_map(0x1000u64..0x2000, (0x3000u64..0x4000, 1u64..9, proptest::collection::vec(0x1000u64..0x2000, 0..6)), 0..3),
        edges in proptest::collection::btree_set((0x1000u64..0x2000, 0x1000u64..0x2000), 0..12),
        calls in proptest::collection::btree_set((0x1000u64..0x2000, 0x1000u64..0x2000), 0..6),
        tails in proptest::collection::btree_map((0x1000u64..0x2000, 0x1000u64..0x2000), proptest::option::of(word()), 0..4),
        nonret in proptest::collection::btree_set(0x1000u64..0x2000, 0..4),
        header in proptest::collection::vec((word(), word()), 0..4),
    ) -> Facts {
        let mut f = Facts::default();
        let mut a = 0x1000;
        for (gap, size, provenance) in insts {
            a += gap;
            f.instructions.insert(a, InstFact { size, provenance });
            a += size;
        }
        let mut p = 0x9000;
        for (start, size) in pads {
            p = p.max(start);
            f.padding.insert(p, size);
            p += size;
        }
        f.functions = funcs;
        f.main = main;
        f.xrefs = xrefs.into_iter().map(|(kind, from, to, width)| XrefFact { kind, from, to, width }).collect();
        f.jump_tables = tables
            .into_iter()
            .map(|(site, (base, entry_width, targets))| (site, JtabFact { base, entry_width, targets }))
            .collect();
        f.edges = edges;
        f.calls = calls;
        f.tail_calls = tails;
        f.nonret = nonret;
        f.header = header;
        f
    }
}

/// A result derived from a fixture's truth by dropping and adding items.
fn perturb(truth: &Facts, keep: &[bool], extra: &[u64]) -> Facts {
    let mut k = keep.iter().copied().cycle();
    let mut r = Facts::default();
    r.instructions = truth.instructions.iter().filter(|_| k.next().unwrap()).map(|(a, i)| (*a, i.clone())).collect();
    r.functions = truth.functions.iter().filter(|_| k.next().unwrap()).map(|(a, s)| (*a, s.clone())).collect();
    r.xrefs = truth.xrefs.iter().filter(|_| k.next().unwrap()).copied().collect();
    r.edges = truth.edges.iter().filter(|_| k.next().unwrap()).copied().collect();
    r.calls = truth.calls.iter().filter(|_| k.next().unwrap()).copied().collect();
    r.tail_calls = truth.tail_calls.iter().filter(|_| k.next().unwrap()).map(|(a, s)| (*a, s.clone())).collect();
    r.nonret = truth.nonret.iter().filter(|_| k.next().unwrap()).copied().collect();
    for (s, t) in &truth.jump_tables {
        if k.next().unwrap() {
            let mut t = t.clone();
            if k.next().unwrap() {
                t.targets.truncate(t.targets.len() / 2);
            }
            r.jump_tables.insert(*s, t);
        }
    }
    let base = truth.instructions.keys().next().copied().unwrap_or(0x1000);
    for (i, &e) in extra.iter().enumerate() {
        let a = base + e;
        r.instructions.entry(a).or_insert(InstFact { size: 1 + (e % 5), provenance: None });
        match i % 6 {
            0 => drop(r.functions.insert(a, None)),
            1 => drop(r.edges.insert((a, base + extra[0]))),
            2 => drop(r.nonret.insert(a)),
            3 => drop(r.calls.insert((a, base))),
            4 => drop(r.xrefs.insert(XrefFact { kind: XrefKind::C2d, from: a, to: a + 0x100, width: 8 })),
            _ => drop(r.tail_calls.insert((a, a + 0x40), None)),
        }
    }
    r
}

proptest! {
    #[test]
    fn emit_parse_round_trip(f in facts()) {
        let text = f.emit();
        let back = Facts::parse(&text).unwrap();
        prop_assert_eq!(&back, &f);
        prop_assert_eq!(back.emit(), text.clone());
        prop_assert!(Facts::parse_truth(&text).is_ok());
    }

    #[test]
    fn parse_is_order_insensitive(f in facts(), seed in any::<u64>()) {
        let text = f.emit();
        let (header, mut body): (Vec<&str>, Vec<&str>) = text.lines().partition(|l| l.starts_with('#'));
        let n = body.len().max(1) as u64;
        body.sort_by_key(|l| (l.len() as u64).wrapping_mul(seed) % n);
        let shuffled: String = header.into_iter().chain(body).map(|l| format!("{l}\n")).collect();
        prop_assert_eq!(Facts::parse(&shuffled).unwrap(), f);
    }

    #[test]
    fn counts_and_attribution_partition(
        which in 0usize..64,
        keep in proptest::collection::vec(any::<bool>(), 1..64),
        extra in proptest::collection::vec(0u64..0x400, 1..12),
    ) {
        let fx = &corpus()[which % corpus().len()];
        let result = perturb(&fx.truth, &keep, &extra);
        for phase in Phase::ALL {
            let (t, r) = scored_items(&fx.truth, &result, phase);
            let m = score(&fx.truth, &result, phase);
            prop_assert_eq!(m.tp + m.fn_, t.len() as u64);
            prop_assert_eq!(m.tp + m.fp, r.len() as u64);
            prop_assert!((0.0..=1.0).contains(&m.precision) && (0.0..=1.0).contains(&m.recall));
            let attr = attribute_errors(&fx.truth, &result, phase, Some(&fx.image));
            let fps = attr.iter().filter(|e| e.kind.name() == "FP").count() as u64;
            prop_assert_eq!(fps, m.fp, "{} {}", fx.name, phase);
            prop_assert_eq!(attr.len() as u64 - fps, m.fn_, "{} {}", fx.name, phase);
            let items: BTreeSet<(String, &str)> = attr.iter().map(|e| (e.item.clone(), e.kind.name())).collect();
            prop_assert_eq!(items.len(), attr.len());
            for e in &attr {
                prop_assert!(causes_for(phase, e.kind).contains(&e.cause), "{}", e);
            }
        }
    }

    #[test]
    fn padding_is_excluded_from_both_sides(which in 0usize..64, pick in any::<prop::sample::Index>()) {
        let fx = &corpus()[which % corpus().len()];
        prop_assume!(!fx.truth.padding.is_empty());
        let pads: Vec<(u64, u64)> = fx.truth.padding.iter().map(|(a, s)| (*a, *s)).collect();
        let (a, size) = pads[pick.index(pads.len())];
        let mut truth = fx.truth.clone();
        let mut result = fx.truth.clone();
        truth.instructions.insert(a, InstFact { size, provenance: None });
        result.instructions.insert(a, InstFact { size, provenance: None });
        prop_assert_eq!(score(&truth, &result, Phase::Inst), score(&fx.truth, &fx.truth, Phase::Inst));
        let mut only_result = fx.truth.clone();
        only_result.instructions.insert(a, InstFact { size, provenance: None });
        prop_assert_eq!(score(&fx.truth, &only_result, Phase::Inst).fp, 0);
    }

    #[test]
    fn config_entries_round_trip(p in 0usize..PROFILES.len(), key in 0usize..40, flip in any::<bool>()) {
        let mut c = StrategyConfig::profile(PROFILES[p]).unwrap();
        let entries = c.entries();
        let (k, v) = &entries[key % entries.len()];
        if flip && (v == "true" || v == "false") {
            c.set(k, if v == "true" { "false" } else { "true" }).unwrap();
        }
        let entries = c.entries();
        let back = StrategyConfig::from_entries(PROFILES[p], entries.iter().map(|(k, v)| (*k, v.as_str()))).unwrap();
        prop_assert_eq!(back, c);
    }
}

#[test]
fn overlapping_truth_is_rejected_with_line() {
    let err = Facts::parse_truth("[inst] 1000 2\n[inst] 1001 3\n").unwrap_err();
    assert!(err.to_string().contains("line 2"), "{err}");
    assert_eq!(Facts::parse_truth("").unwrap(), Facts::default());
}

#[test]
fn every_profile_scores_every_fixture_consistently() {
    let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
    for fx in corpus() {
        for p in PROFILES {
            let a = dissect_core::analyze(&fx.image, &StrategyConfig::profile(p).unwrap());
            let text = a.facts.emit();
            assert_eq!(Facts::parse(&text).unwrap(), a.facts, "{} {p}", fx.name);
            *seen.entry(p).or_default() += 1;
        }
    }
    assert!(seen.values().all(|&n| n == corpus().len()));
}
