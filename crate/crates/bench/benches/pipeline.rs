use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use dissect_bench::{entries, fixtures, profile, PROFILES};
use dissect_core::eval::{score, Phase};
use dissect_core::matrix::run_matrix;
use dissect_core::{analyze, Facts};

fn analyze_corpus(c: &mut Criterion) {
    let all = fixtures();
    let mut group = c.benchmark_group("analyze");
    for name in PROFILES {
        let config = profile(name);
        group.bench_function(*name, |b| {
            b.iter(|| {
                for f in &all {
                    black_box(analyze(&f.image, &config));
                }
            })
        });
    }
    group.finish();
}

fn score_and_parse(c: &mut Criterion) {
    let all = fixtures();
    let config = profile("angr");
    let results: Vec<Facts> = all.iter().map(|f| analyze(&f.image, &config).facts).collect();
    c.bench_function("score_all_phases", |b| {
        b.iter(|| {
            for (f, r) in all.iter().zip(&results) {
                for phase in Phase::ALL {
                    black_box(score(&f.truth, r, phase));
                }
            }
        })
    });
    let texts: Vec<String> = results.iter().map(Facts::emit).collect();
    c.bench_function("parse_results", |b| {
        b.iter(|| {
            for t in &texts {
                black_box(Facts::parse(t).unwrap());
            }
        })
    });
}

fn matrix(c: &mut Criterion) {
    let e = entries();
    let configs: Vec<_> = PROFILES.iter().map(|p| profile(p)).collect();
    c.bench_function("matrix", |b| b.iter(|| black_box(run_matrix(&e, &configs))));
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = analyze_corpus, score_and_parse, matrix
}
criterion_main!(benches);
