//! Inputs shared by the benchmarks.

use dissect_core::corpus::{self, Fixture};
use dissect_core::matrix::CorpusEntry;
use dissect_core::StrategyConfig;

/// Profiles that exercise distinct pipeline paths.
pub const PROFILES: &[&str] = &["objdump", "psi", "pure", "dyninst", "ghidra", "angr", "radare2"];

pub fn fixtures() -> Vec<Fixture> {
    corpus::fixtures()
}

pub fn entries() -> Vec<CorpusEntry> {
    fixtures()
        .into_iter()
        .map(|f| CorpusEntry {
            name: f.name.to_string(),
            image: f.image,
            truth: f.truth,
        })
        .collect()
}

pub fn profile(name: &str) -> StrategyConfig {
    StrategyConfig::profile(name).expect("built-in profile")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inputs_are_available() {
        assert!(!entries().is_empty());
        for p in PROFILES {
            assert_eq!(profile(p).profile, *p);
        }
    }
}
