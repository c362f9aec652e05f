use std::collections::BTreeMap;
use std::fmt::Write as _;

use super::{Metrics, Phase};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Table,
    Csv,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub profile: String,
    pub phase: Phase,
    pub avg_pre: f64,
    pub avg_rec: f64,
    pub min_pre: f64,
    pub min_rec: f64,
    pub binaries: usize,
}

/// Averages and minima per (profile, phase). Input order does not matter.
pub fn aggregate(metrics: &[(String, Metrics)]) -> Vec<ReportRow> {
    let mut groups: BTreeMap<(&str, Phase), Vec<&Metrics>> = BTreeMap::new();
    for (profile, m) in metrics {
        groups.entry((profile.as_str(), m.phase)).or_default().push(m);
    }
    groups
        .into_iter()
        .map(|((profile, phase), ms)| {
            let n = ms.len() as f64;
            let sum = |f: fn(&Metrics) -> f64| ms.iter().map(|m| f(m)).sum::<f64>();
            let min = |f: fn(&Metrics) -> f64| ms.iter().map(|m| f(m)).fold(f64::INFINITY, f64::min);
            ReportRow {
                profile: profile.to_string(),
                phase,
                avg_pre: sum(|m| m.precision) / n,
                avg_rec: sum(|m| m.recall) / n,
                min_pre: min(|m| m.precision),
                min_rec: min(|m| m.recall),
                binaries: ms.len(),
            }
        })
        .collect()
}

pub fn emit_report(rows: &[ReportRow], format: ReportFormat) -> String {
    let mut s = String::new();
    match format {
        ReportFormat::Csv => {
            s.push_str("profile,phase,avg_pre,avg_rec,min_pre,min_rec\n");
            for r in rows {
                let _ = writeln!(
                    s,
                    "{},{},{:.4},{:.4},{:.4},{:.4}",
                    r.profile, r.phase, r.avg_pre, r.avg_rec, r.min_pre, r.min_rec
                );
            }
        }
        ReportFormat::Table => {
            let w = rows.iter().map(|r| r.profile.len()).max().unwrap_or(7).max(7);
            let _ = writeln!(
                s,
                "{:<w$}  {:<8}  {:>7}  {:>7}  {:>7}  {:>7}  {:>4}",
                "profile", "phase", "avg_pre", "avg_rec", "min_pre", "min_rec", "n"
            );
            for r in rows {
                let _ = writeln!(
                    s,
                    "{:<w$}  {:<8}  {:>7.4}  {:>7.4}  {:>7.4}  {:>7.4}  {:>4}",
                    r.profile,
                    r.phase.name(),
                    r.avg_pre,
                    r.avg_rec,
                    r.min_pre,
                    r.min_rec,
                    r.binaries
                );
            }
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(recall_tp: u64, fn_: u64) -> Metrics {
        Metrics::from_counts(Phase::Inst, recall_tp, 0, fn_)
    }

    #[test]
    fn avg_and_min() {
        let rows = aggregate(&[("p".into(), m(10, 0)), ("p".into(), m(8, 2))]);
        assert_eq!(rows.len(), 1);
        assert!((rows[0].avg_rec - 0.9).abs() < 1e-12);
        assert!((rows[0].min_rec - 0.8).abs() < 1e-12);
        let single = aggregate(&[("p".into(), m(8, 2))]);
        assert_eq!(single[0].avg_rec, single[0].min_rec);
    }

    #[test]
    fn csv_header_is_fixed() {
        let rows = aggregate(&[("p".into(), m(1, 0))]);
        let csv = emit_report(&rows, ReportFormat::Csv);
        assert_eq!(
            csv,
            "profile,phase,avg_pre,avg_rec,min_pre,min_rec\np,inst,1.0000,1.0000,1.0000,1.0000\n"
        );
    }
}
