//! Strategy switchboard and named tool profiles.
//!
//! Every flag is addressed by a `module.rule` key, e.g.
//! `cfg.jt_bound_threshold`. Profiles expand to a complete flag set; single
//! flags can then be overridden with [`StrategyConfig::set`].

use std::fmt;

use thiserror::Error;

use crate::sweep::SweepPolicy;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ConfigError {
    #[error("unknown profile `{0}` (known: {list})", list = PROFILES.join(", "))]
    UnknownProfile(String),
    #[error("unknown flag `{0}`")]
    UnknownFlag(String),
    #[error("bad value `{value}` for `{key}`: expected {expected}")]
    BadValue {
        key: String,
        value: String,
        expected: &'static str,
    },
    #[error("config line {line}: {message}")]
    Syntax { line: usize, message: String },
}

pub const PROFILES: &[&str] = &[
    "objdump", "psi", "uroboros", "dyninst", "ghidra", "ghidra-ne", "angr", "angr-ns", "bap",
    "radare2", "pure",
];

/// Magic constants never treated as pointers by the GHIDRA rules.
pub const GHIDRA_MAGIC_VALUES: &[u64] = &[
    0xff00,
    0xffff,
    0xff0000,
    0xffffff,
    0xffff0000,
    0xffffff00,
    0xffffffff,
];

pub const DEFAULT_NONRET_SEEDS: &[&str] =
    &["exit", "_exit", "_Exit", "abort", "__stack_chk_fail", "__assert_fail"];

macro_rules! choice {
    ($(#[$m:meta])* $name:ident { $($var:ident => $s:literal),+ $(,)? }) => {
        $(#[$m])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
        pub enum $name { $($var),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$var),+];
            pub const EXPECTED: &'static str = concat!("one of:" $(, " ", $s)+);

            pub fn name(self) -> &'static str {
                match self { $($name::$var => $s),+ }
            }

            pub fn parse(s: &str) -> Option<Self> {
                match s { $($s => Some($name::$var),)+ _ => None }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }
    };
}

choice!(Algorithm { Linear => "linear", Descent => "descent" });
choice!(MainMethod { Off => "off", ArgPropagation => "arg_propagation", BytePattern => "byte_pattern" });
choice!(Alignment { Machine => "machine", FourOrXref => "four_or_xref", None => "none" });
choice!(StringOverlap { Off => "off", PreferString => "prefer_string", PreferPointer => "prefer_pointer" });
choice!(JtStrategy {
    Off => "off",
    PatternRadare2 => "pattern_radare2",
    SliceDyninst => "slice_dyninst",
    PathGhidra => "path_ghidra",
    SliceAngr => "slice_angr",
});
choice!(ConstPropScope { Off => "off", Block => "block", Function => "function" });
choice!(TailCallRules { Off => "off", Radare2 => "radare2", Ghidra => "ghidra", Dyninst => "dyninst", Angr => "angr" });
choice!(NonRetMode {
    Off => "off",
    SeedsOnly => "seeds_only",
    AssumeFallthrough => "assume_fallthrough",
    WorklistPropagate => "worklist_propagate",
    DepthFirst => "depth_first",
    AllPaths => "all_paths",
    FallthroughEvidence => "fallthrough_evidence",
});

/// The complete flag set for one analysis run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StrategyConfig {
    pub profile: String,

    pub algorithm: Algorithm,
    pub sweep_policy: SweepPolicy,
    pub sweep_symbol_ranges: bool,

    pub seed_symbols: bool,
    pub prologue_match: bool,
    pub gap_scan: bool,
    pub xref_seed: bool,

    pub main_method: MainMethod,
    pub eh_frame: bool,
    pub call_targets: bool,
    pub indirect_call_targets: bool,
    pub tailcall_targets: bool,
    pub prologue_entries: bool,
    pub scan_begin_entries: bool,

    pub symbolize: bool,
    pub data_units: bool,
    pub scan_code_gaps: bool,
    pub alignment: Alignment,
    pub entry_only: bool,
    pub value_floor: u64,
    pub magic_values: Vec<u64>,
    pub region_margin: u64,
    pub min_table_size: u64,
    pub table_split_distance: u64,
    pub drop_float: bool,
    pub string_overlap: StringOverlap,
    pub type_sliding: bool,

    pub jt_strategy: JtStrategy,
    pub jt_bound_threshold: u64,
    pub slice_assign_limit: u64,
    pub slice_block_levels: u64,
    pub pc_thunk: bool,
    pub constprop: ConstPropScope,
    pub tailcall_rules: TailCallRules,
    pub tailcall_distance: u64,
    pub nonret_mode: NonRetMode,
    pub nonret_seeds: Vec<String>,
    pub nonret_evidence: u64,
    pub nonret_rounds: u64,
}

impl Default for StrategyConfig {
    fn default() -> Self {
        StrategyConfig::profile("pure").expect("pure profile")
    }
}

/// One-line description per flag, used by `strategies list`.
pub const FLAG_DOCS: &[(&str, &str)] = &[
    ("pipeline.algorithm", "linear sweep or recursive descent as the base disassembler"),
    ("sweep.policy", "what a linear sweep does at an undecodable byte"),
    ("sweep.symbol_ranges", "sweep symbol-delimited ranges before remaining gaps"),
    ("recursive.seed_symbols", "seed descent from entry point, main and function symbols"),
    ("recursive.prologue_match", "seed descent from prologue byte patterns found in gaps"),
    ("recursive.gap_scan", "linearly scan leftover gaps and keep blocks that decode"),
    ("recursive.xref_seed", "seed descent from constants that point into gaps, rolling back on errors"),
    ("funcid.main", "how main is located from the startup routine"),
    ("funcid.eh_frame", "take function entries from unwind records"),
    ("funcid.call_targets", "take function entries from direct call targets"),
    ("funcid.indirect_call_targets", "take function entries from resolved indirect calls"),
    ("funcid.tailcall_targets", "take function entries from tail-call targets"),
    ("funcid.prologue", "report prologue matches as function entries"),
    ("funcid.scan_begin", "report the start of each gap-scanned code piece as an entry"),
    ("symbolize.enabled", "produce cross-references"),
    ("symbolize.data_units", "brute-force machine-size data units as pointer candidates"),
    ("symbolize.scan_code_gaps", "also read data units from undisassembled code"),
    ("symbolize.alignment", "stride for data units: machine-aligned, 4-aligned or unaligned"),
    ("symbolize.entry_only", "code pointers must target known function entries"),
    ("symbolize.value_floor", "constants below this value are never pointers"),
    ("symbolize.magic_values", "constants that are never pointers"),
    ("symbolize.region_margin", "bytes added on both sides of data regions"),
    ("symbolize.min_table_size", "fewest consecutive pointers forming an address table"),
    ("symbolize.table_split_distance", "split address tables where neighbours are farther apart"),
    ("symbolize.drop_float", "ignore data units typed as floating point"),
    ("symbolize.string_overlap", "resolve a pointer that overlaps a string"),
    ("symbolize.type_sliding", "step through data by the extent of the inferred type"),
    ("cfg.jt_strategy", "jump-table resolution method"),
    ("cfg.jt_bound_threshold", "largest accepted jump-table index bound"),
    ("cfg.slice_assign_limit", "assignments followed by the backward index slice"),
    ("cfg.slice_block_levels", "basic-block levels followed by the backward slice"),
    ("cfg.pc_thunk", "recognize get_pc_thunk base computations"),
    ("cfg.constprop", "constant propagation scope for indirect calls"),
    ("cfg.tailcall_rules", "rule set for tail-call detection"),
    ("cfg.tailcall_distance", "jump distance above which a jump is a tail call"),
    ("cfg.nonret_mode", "non-returning function detection method"),
    ("cfg.nonret_seeds", "library routines known not to return"),
    ("cfg.nonret_evidence", "unsafe fall-throughs needed to call a callee non-returning"),
    ("cfg.nonret_rounds", "times the fall-through detection is run"),
];

fn bad(key: &str, value: &str, expected: &'static str) -> ConfigError {
    ConfigError::BadValue {
        key: key.into(),
        value: value.into(),
        expected,
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool, ConfigError> {
    match v {
        "true" | "on" | "1" | "yes" => Ok(true),
        "false" | "off" | "0" | "no" => Ok(false),
        _ => Err(bad(key, v, "a boolean")),
    }
}

fn parse_num(key: &str, v: &str) -> Result<u64, ConfigError> {
    let r = match v.strip_prefix("0x") {
        Some(h) => u64::from_str_radix(h, 16),
        None => v.parse(),
    };
    r.map_err(|_| bad(key, v, "an integer"))
}

fn fmt_list_hex(v: &[u64]) -> String {
    if v.is_empty() {
        return "none".into();
    }
    v.iter().map(|x| format!("{x:#x}")).collect::<Vec<_>>().join(",")
}

impl StrategyConfig {
    fn base(profile: &str) -> Self {
        StrategyConfig {
            profile: profile.into(),
            algorithm: Algorithm::Descent,
            sweep_policy: SweepPolicy::SkipByte,
            sweep_symbol_ranges: true,
            seed_symbols: true,
            prologue_match: false,
            gap_scan: false,
            xref_seed: false,
            main_method: MainMethod::Off,
            eh_frame: false,
            call_targets: true,
            indirect_call_targets: false,
            tailcall_targets: false,
            prologue_entries: false,
            scan_begin_entries: false,
            symbolize: false,
            data_units: true,
            scan_code_gaps: false,
            alignment: Alignment::Machine,
            entry_only: false,
            value_floor: 0,
            magic_values: Vec::new(),
            region_margin: 0,
            min_table_size: 1,
            table_split_distance: 0,
            drop_float: false,
            string_overlap: StringOverlap::Off,
            type_sliding: false,
            jt_strategy: JtStrategy::Off,
            jt_bound_threshold: u64::MAX,
            slice_assign_limit: 50,
            slice_block_levels: 3,
            pc_thunk: true,
            constprop: ConstPropScope::Off,
            tailcall_rules: TailCallRules::Off,
            tailcall_distance: 0x10000,
            nonret_mode: NonRetMode::SeedsOnly,
            nonret_seeds: DEFAULT_NONRET_SEEDS.iter().map(|s| s.to_string()).collect(),
            nonret_evidence: 3,
            nonret_rounds: 2,
        }
    }

    /// Expands a named profile.
    pub fn profile(name: &str) -> Result<Self, ConfigError> {
        let mut c = StrategyConfig::base(name);
        match name {
            "pure" => {}
            "objdump" | "psi" | "uroboros" => {
                c.algorithm = Algorithm::Linear;
                c.call_targets = false;
                c.nonret_mode = NonRetMode::Off;
                c.sweep_policy = match name {
                    "objdump" => SweepPolicy::SkipByte,
                    "psi" => SweepPolicy::PsiRepair,
                    _ => SweepPolicy::ExcludeRegion,
                };
                if name == "uroboros" {
                    c.symbolize = true;
                    c.alignment = Alignment::Machine;
                }
            }
            "dyninst" => {
                c.prologue_match = true;
                c.prologue_entries = true;
                c.main_method = MainMethod::BytePattern;
                c.tailcall_targets = true;
                c.jt_strategy = JtStrategy::SliceDyninst;
                c.pc_thunk = false;
                c.tailcall_rules = TailCallRules::Dyninst;
                c.nonret_mode = NonRetMode::DepthFirst;
            }
            "ghidra" | "ghidra-ne" => {
                c.prologue_match = true;
                c.prologue_entries = true;
                c.xref_seed = true;
                c.eh_frame = name == "ghidra";
                c.indirect_call_targets = true;
                c.tailcall_targets = true;
                c.symbolize = true;
                c.alignment = Alignment::FourOrXref;
                c.entry_only = true;
                c.value_floor = 4096;
                c.magic_values = GHIDRA_MAGIC_VALUES.to_vec();
                c.region_margin = 1024;
                c.min_table_size = 2;
                c.table_split_distance = 0xfffff;
                c.string_overlap = StringOverlap::PreferString;
                c.jt_strategy = JtStrategy::PathGhidra;
                c.jt_bound_threshold = 1024;
                c.constprop = ConstPropScope::Function;
                c.tailcall_rules = TailCallRules::Ghidra;
                c.nonret_mode = NonRetMode::FallthroughEvidence;
            }
            "angr" | "angr-ns" => {
                c.prologue_match = true;
                c.prologue_entries = true;
                c.gap_scan = name == "angr";
                c.scan_begin_entries = name == "angr";
                c.main_method = MainMethod::ArgPropagation;
                c.indirect_call_targets = true;
                c.tailcall_targets = true;
                c.symbolize = true;
                c.scan_code_gaps = true;
                c.alignment = Alignment::None;
                c.region_margin = 1024;
                c.drop_float = true;
                c.string_overlap = StringOverlap::PreferPointer;
                c.type_sliding = true;
                c.jt_strategy = JtStrategy::SliceAngr;
                c.jt_bound_threshold = 100_000;
                c.constprop = ConstPropScope::Block;
                c.tailcall_rules = TailCallRules::Angr;
                c.nonret_mode = NonRetMode::AssumeFallthrough;
            }
            "bap" => {
                c.prologue_match = true;
                c.prologue_entries = true;
                c.main_method = MainMethod::ArgPropagation;
                c.nonret_mode = NonRetMode::AllPaths;
            }
            "radare2" => {
                c.prologue_match = true;
                c.prologue_entries = true;
                c.xref_seed = true;
                c.main_method = MainMethod::BytePattern;
                c.tailcall_targets = true;
                c.jt_strategy = JtStrategy::PatternRadare2;
                c.jt_bound_threshold = 512;
                c.tailcall_rules = TailCallRules::Radare2;
                c.nonret_mode = NonRetMode::WorklistPropagate;
            }
            other => return Err(ConfigError::UnknownProfile(other.into())),
        }
        Ok(c)
    }

    pub fn is_linear(&self) -> bool {
        self.algorithm == Algorithm::Linear
    }

    /// Overrides one flag by key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let v = value.trim();
        macro_rules! pick {
            ($ty:ty) => {
                <$ty>::parse(v).ok_or_else(|| bad(key, v, <$ty>::EXPECTED))?
            };
        }
        match key {
            "pipeline.algorithm" => self.algorithm = pick!(Algorithm),
            "sweep.policy" => {
                self.sweep_policy = SweepPolicy::parse(v)
                    .ok_or_else(|| bad(key, v, "one of: skip_byte psi_repair exclude_region"))?
            }
            "sweep.symbol_ranges" => self.sweep_symbol_ranges = parse_bool(key, v)?,
            "recursive.seed_symbols" => self.seed_symbols = parse_bool(key, v)?,
            "recursive.prologue_match" => self.prologue_match = parse_bool(key, v)?,
            "recursive.gap_scan" => self.gap_scan = parse_bool(key, v)?,
            "recursive.xref_seed" => self.xref_seed = parse_bool(key, v)?,
            "funcid.main" => self.main_method = pick!(MainMethod),
            "funcid.eh_frame" => self.eh_frame = parse_bool(key, v)?,
            "funcid.call_targets" => self.call_targets = parse_bool(key, v)?,
            "funcid.indirect_call_targets" => self.indirect_call_targets = parse_bool(key, v)?,
            "funcid.tailcall_targets" => self.tailcall_targets = parse_bool(key, v)?,
            "funcid.prologue" => self.prologue_entries = parse_bool(key, v)?,
            "funcid.scan_begin" => self.scan_begin_entries = parse_bool(key, v)?,
            "symbolize.enabled" => self.symbolize = parse_bool(key, v)?,
            "symbolize.data_units" => self.data_units = parse_bool(key, v)?,
            "symbolize.scan_code_gaps" => self.scan_code_gaps = parse_bool(key, v)?,
            "symbolize.alignment" => self.alignment = pick!(Alignment),
            "symbolize.entry_only" => self.entry_only = parse_bool(key, v)?,
            "symbolize.value_floor" => self.value_floor = parse_num(key, v)?,
            "symbolize.magic_values" => {
                self.magic_values = match v {
                    "none" | "" => Vec::new(),
                    "default" => GHIDRA_MAGIC_VALUES.to_vec(),
                    list => {
                        let mut out = list
                            .split(',')
                            .map(|x| parse_num(key, x.trim()))
                            .collect::<Result<Vec<_>, _>>()?;
                        out.sort_unstable();
                        out.dedup();
                        out
                    }
                }
            }
            "symbolize.region_margin" => self.region_margin = parse_num(key, v)?,
            "symbolize.min_table_size" => self.min_table_size = parse_num(key, v)?.max(1),
            "symbolize.table_split_distance" => self.table_split_distance = parse_num(key, v)?,
            "symbolize.drop_float" => self.drop_float = parse_bool(key, v)?,
            "symbolize.string_overlap" => self.string_overlap = pick!(StringOverlap),
            "symbolize.type_sliding" => self.type_sliding = parse_bool(key, v)?,
            "cfg.jt_strategy" => self.jt_strategy = pick!(JtStrategy),
            "cfg.jt_bound_threshold" => {
                self.jt_bound_threshold = match v {
                    "none" | "unlimited" => u64::MAX,
                    _ => parse_num(key, v)?,
                }
            }
            "cfg.slice_assign_limit" => self.slice_assign_limit = parse_num(key, v)?,
            "cfg.slice_block_levels" => self.slice_block_levels = parse_num(key, v)?,
            "cfg.pc_thunk" => self.pc_thunk = parse_bool(key, v)?,
            "cfg.constprop" => self.constprop = pick!(ConstPropScope),
            "cfg.tailcall_rules" => self.tailcall_rules = pick!(TailCallRules),
            "cfg.tailcall_distance" => self.tailcall_distance = parse_num(key, v)?,
            "cfg.nonret_mode" => self.nonret_mode = pick!(NonRetMode),
            "cfg.nonret_seeds" => {
                self.nonret_seeds = match v {
                    "none" | "" => Vec::new(),
                    "default" => DEFAULT_NONRET_SEEDS.iter().map(|s| s.to_string()).collect(),
                    list => list.split(',').map(|s| s.trim().to_string()).collect(),
                }
            }
            "cfg.nonret_evidence" => self.nonret_evidence = parse_num(key, v)?,
            "cfg.nonret_rounds" => self.nonret_rounds = parse_num(key, v)?,
            _ => return Err(ConfigError::UnknownFlag(key.into())),
        }
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_file(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                message: format!("expected `key = value`, found `{line}`"),
            })?;
            if k.trim() == "profile" {
                *self = StrategyConfig::profile(v.trim())?;
                continue;
            }
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    /// Every flag as `(key, value)` in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let b = |x: bool| x.to_string();
        let n = |x: u64| {
            if x == u64::MAX {
                "unlimited".to_string()
            } else {
                x.to_string()
            }
        };
        vec![
            ("pipeline.algorithm", self.algorithm.to_string()),
            ("sweep.policy", self.sweep_policy.name().to_string()),
            ("sweep.symbol_ranges", b(self.sweep_symbol_ranges)),
            ("recursive.seed_symbols", b(self.seed_symbols)),
            ("recursive.prologue_match", b(self.prologue_match)),
            ("recursive.gap_scan", b(self.gap_scan)),
            ("recursive.xref_seed", b(self.xref_seed)),
            ("funcid.main", self.main_method.to_string()),
            ("funcid.eh_frame", b(self.eh_frame)),
            ("funcid.call_targets", b(self.call_targets)),
            ("funcid.indirect_call_targets", b(self.indirect_call_targets)),
            ("funcid.tailcall_targets", b(self.tailcall_targets)),
            ("funcid.prologue", b(self.prologue_entries)),
            ("funcid.scan_begin", b(self.scan_begin_entries)),
            ("symbolize.enabled", b(self.symbolize)),
            ("symbolize.data_units", b(self.data_units)),
            ("symbolize.scan_code_gaps", b(self.scan_code_gaps)),
            ("symbolize.alignment", self.alignment.to_string()),
            ("symbolize.entry_only", b(self.entry_only)),
            ("symbolize.value_floor", n(self.value_floor)),
            ("symbolize.magic_values", fmt_list_hex(&self.magic_values)),
            ("symbolize.region_margin", n(self.region_margin)),
            ("symbolize.min_table_size", n(self.min_table_size)),
            ("symbolize.table_split_distance", format!("{:#x}", self.table_split_distance)),
            ("symbolize.drop_float", b(self.drop_float)),
            ("symbolize.string_overlap", self.string_overlap.to_string()),
            ("symbolize.type_sliding", b(self.type_sliding)),
            ("cfg.jt_strategy", self.jt_strategy.to_string()),
            ("cfg.jt_bound_threshold", n(self.jt_bound_threshold)),
            ("cfg.slice_assign_limit", n(self.slice_assign_limit)),
            ("cfg.slice_block_levels", n(self.slice_block_levels)),
            ("cfg.pc_thunk", b(self.pc_thunk)),
            ("cfg.constprop", self.constprop.to_string()),
            ("cfg.tailcall_rules", self.tailcall_rules.to_string()),
            ("cfg.tailcall_distance", format!("{:#x}", self.tailcall_distance)),
            ("cfg.nonret_mode", self.nonret_mode.to_string()),
            (
                "cfg.nonret_seeds",
                if self.nonret_seeds.is_empty() {
                    "none".into()
                } else {
                    self.nonret_seeds.join(",")
                },
            ),
            ("cfg.nonret_evidence", n(self.nonret_evidence)),
            ("cfg.nonret_rounds", n(self.nonret_rounds)),
        ]
    }

    /// Parses a configuration back from its [`entries`](Self::entries).
    pub fn from_entries<'a>(
        profile: &str,
        entries: impl IntoIterator<Item = (&'a str, &'a str)>,
    ) -> Result<Self, ConfigError> {
        let mut c = StrategyConfig::profile(profile).unwrap_or_else(|_| {
            let mut c = StrategyConfig::base(profile);
            c.profile = profile.into();
            c
        });
        for (k, v) in entries {
            c.set(k, v)?;
        }
        Ok(c)
    }
}
