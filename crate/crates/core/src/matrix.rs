//! Every profile on every corpus binary, aggregated into Avg/Min rows.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::thread;

use crate::config::StrategyConfig;
use crate::eval::{aggregate, emit_report, score, Facts, Metrics, Phase, ReportFormat, ReportRow};
use crate::image::{load_binary, BinaryImage};
use crate::pipeline::{analyze, produced_phases};

/// One binary with its ground truth.
#[derive(Debug, Clone)]
pub struct CorpusEntry {
    pub name: String,
    pub image: BinaryImage,
    pub truth: Facts,
}

/// A binary that could not be loaded or analyzed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Failure {
    pub binary: String,
    pub profile: Option<String>,
    pub message: String,
}

#[derive(Debug, Clone, Default)]
pub struct MatrixReport {
    /// `(profile, binary, metrics)` in profile-then-binary order.
    pub metrics: Vec<(String, String, Metrics)>,
    pub failures: Vec<Failure>,
}

/// Loads every `<stem>.truth` with a sibling binary named `<stem>` plus any
/// extension. Unreadable pairs become failures.
pub fn load_corpus(dir: &Path) -> std::io::Result<(Vec<CorpusEntry>, Vec<Failure>)> {
    let mut files: Vec<_> = fs::read_dir(dir)?
        .filter_map(Result::ok)
        .map(|e| e.path())
        .filter(|p| p.is_file())
        .collect();
    files.sort();
    let mut entries = Vec::new();
    let mut failures = Vec::new();
    for truth_path in files.iter().filter(|p| p.extension().is_some_and(|e| e == "truth")) {
        let stem = truth_path.file_stem().unwrap_or_default();
        let name = stem.to_string_lossy().into_owned();
        let Some(bin) = files
            .iter()
            .find(|p| *p != truth_path && p.file_stem() == Some(stem) && p.extension().is_some_and(|e| e != "truth"))
        else {
            failures.push(Failure {
                binary: name,
                profile: None,
                message: "no binary next to truth file".into(),
            });
            continue;
        };
        let fail = |message: String| Failure {
            binary: name.clone(),
            profile: None,
            message,
        };
        let truth = match fs::read_to_string(truth_path).map_err(|e| e.to_string()).and_then(|t| {
            Facts::parse_truth(&t).map_err(|e| e.to_string())
        }) {
            Ok(t) => t,
            Err(e) => {
                failures.push(fail(format!("{}: {e}", truth_path.display())));
                continue;
            }
        };
        match load_binary(bin) {
            Ok(image) => entries.push(CorpusEntry { name, image, truth }),
            Err(e) => failures.push(fail(e.to_string())),
        }
    }
    Ok((entries, failures))
}

fn run_one(entry: &CorpusEntry, config: &StrategyConfig) -> Result<Vec<Metrics>, String> {
    let result = panic::catch_unwind(AssertUnwindSafe(|| analyze(&entry.image, config)));
    let a = result.map_err(|p| {
        p.downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "analysis panicked".into())
    })?;
    Ok(produced_phases(config)
        .into_iter()
        .map(|phase| score(&entry.truth, &a.facts, phase))
        .collect())
}

/// Runs each profile on each entry. Binaries are analyzed concurrently; the
/// output order is fixed.
pub fn run_matrix(entries: &[CorpusEntry], profiles: &[StrategyConfig]) -> MatrixReport {
    let jobs: Vec<(&StrategyConfig, &CorpusEntry)> =
        profiles.iter().flat_map(|p| entries.iter().map(move |e| (p, e))).collect();
    let workers = thread::available_parallelism().map_or(1, |n| n.get()).min(jobs.len().max(1));
    let chunk = jobs.len().div_ceil(workers).max(1);
    let outcomes: Vec<Result<Vec<Metrics>, String>> = thread::scope(|s| {
        let handles: Vec<_> = jobs
            .chunks(chunk)
            .map(|part| s.spawn(move || part.iter().map(|(p, e)| run_one(e, p)).collect::<Vec<_>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("matrix worker"))
            .collect()
    });
    let mut report = MatrixReport::default();
    for ((p, e), outcome) in jobs.iter().zip(outcomes) {
        match outcome {
            Ok(ms) => report
                .metrics
                .extend(ms.into_iter().map(|m| (p.profile.clone(), e.name.clone(), m))),
            Err(message) => report.failures.push(Failure {
                binary: e.name.clone(),
                profile: Some(p.profile.clone()),
                message,
            }),
        }
    }
    report
}

impl MatrixReport {
    pub fn rows(&self) -> Vec<ReportRow> {
        let flat: Vec<(String, Metrics)> = self.metrics.iter().map(|(p, _, m)| (p.clone(), *m)).collect();
        let mut rows = aggregate(&flat);
        let order: Vec<&str> = self.profile_order();
        rows.sort_by_key(|r| (order.iter().position(|p| *p == r.profile), r.phase));
        rows
    }

    fn profile_order(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for (p, ..) in &self.metrics {
            if !out.contains(&p.as_str()) {
                out.push(p);
            }
        }
        out
    }

    pub fn table(&self) -> String {
        emit_report(&self.rows(), ReportFormat::Table)
    }

    pub fn csv(&self) -> String {
        emit_report(&self.rows(), ReportFormat::Csv)
    }

    /// Average precision and recall of each profile next to `baseline`'s,
    /// for the phases both produce.
    pub fn ablation(&self, baseline: &str) -> String {
        let rows = self.rows();
        let base: BTreeMap<Phase, &ReportRow> =
            rows.iter().filter(|r| r.profile == baseline).map(|r| (r.phase, r)).collect();
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<10}  {:<8}  {:>8}  {:>8}  {:>8}  {:>8}  {:>9}",
            "profile", "phase", "base_pre", "base_rec", "avg_pre", "avg_rec", "delta_rec"
        );
        for r in rows.iter().filter(|r| r.profile != baseline) {
            let Some(b) = base.get(&r.phase) else { continue };
            let _ = writeln!(
                s,
                "{:<10}  {:<8}  {:>8.4}  {:>8.4}  {:>8.4}  {:>8.4}  {:>+9.4}",
                r.profile,
                r.phase.name(),
                b.avg_pre,
                b.avg_rec,
                r.avg_pre,
                r.avg_rec,
                r.avg_rec - b.avg_rec
            );
        }
        s
    }

    /// Average recall of `profile` for `phase`, if it was scored.
    pub fn avg_recall(&self, profile: &str, phase: Phase) -> Option<f64> {
        self.rows()
            .into_iter()
            .find(|r| r.profile == profile && r.phase == phase)
            .map(|r| r.avg_rec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus;

    fn entries(names: &[&str]) -> Vec<CorpusEntry> {
        names
            .iter()
            .map(|n| {
                let f = corpus::fixture(n).unwrap();
                CorpusEntry {
                    name: f.name.into(),
                    image: f.image,
                    truth: f.truth,
                }
            })
            .collect()
    }

    #[test]
    fn one_binary_two_profiles_gives_two_rows_per_phase() {
        let e = entries(&["clean_symbols"]);
        let profiles = [StrategyConfig::profile("pure").unwrap(), StrategyConfig::profile("bap").unwrap()];
        let r = run_matrix(&e, &profiles);
        assert!(r.failures.is_empty());
        let rows = r.rows();
        assert_eq!(rows.iter().filter(|r| r.phase == Phase::Inst).count(), 2);
        assert!(rows.iter().all(|r| r.binaries == 1 && r.avg_rec == r.min_rec));
    }

    #[test]
    fn rerun_is_identical() {
        let e = entries(&["switch_relative", "nonret_cascade"]);
        let profiles = [StrategyConfig::profile("angr").unwrap(), StrategyConfig::profile("pure").unwrap()];
        let a = run_matrix(&e, &profiles);
        let b = run_matrix(&e, &profiles);
        assert_eq!(a.csv(), b.csv());
        assert_eq!(a.table(), b.table());
        assert_eq!(a.ablation("pure"), b.ablation("pure"));
    }

    #[test]
    fn unreadable_pairs_are_skipped() {
        let dir = std::env::temp_dir().join(format!("dissect-matrix-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        fs::write(dir.join("bad.truth"), "[inst] 1000 2\n").unwrap();
        fs::write(dir.join("bad.elf"), b"not an elf").unwrap();
        fs::write(dir.join("lonely.truth"), "").unwrap();
        let (ok, failed) = load_corpus(&dir).unwrap();
        assert!(ok.is_empty());
        assert_eq!(failed.len(), 2);
        fs::remove_dir_all(&dir).unwrap();
    }
}
