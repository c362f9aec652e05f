use std::fmt::Write as _;
use std::fs;
use std::io::{self, Write};
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dissect_core::config::{FLAG_DOCS, PROFILES};
use dissect_core::eval::{attribute_errors, score, Phase};
use dissect_core::matrix::{load_corpus, run_matrix};
use dissect_core::{analyze, corpus, load_binary, Facts, StrategyConfig};

#[derive(Parser)]
#[command(name = "dissect", version, about = "Strategy-pluggable x86/x64 disassembly and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Analyze a binary and write a result file.
    Disasm(DisasmArgs),
    /// Score a result file against ground truth.
    Eval(EvalArgs),
    /// Run profiles over a corpus of binaries with ground truth.
    Matrix(MatrixArgs),
    /// Inspect strategies and profiles.
    Strategies {
        #[command(subcommand)]
        command: StrategiesCommand,
    },
    /// Write the built-in fixture corpus as ELF files with ground truth.
    Corpus {
        /// Output directory.
        dir: PathBuf,
    },
}

#[derive(Subcommand)]
enum StrategiesCommand {
    /// Print every flag, its meaning and the value each profile uses.
    List,
}

#[derive(Args)]
struct ConfigArgs {
    /// Named tool profile.
    #[arg(long, default_value = "pure")]
    profile: String,
    /// File of `key = value` lines applied after the profile.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Single flag override, `key=value`; may repeat and wins over --config.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct DisasmArgs {
    binary: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    /// Output file; stdout when absent.
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    truth: PathBuf,
    result: PathBuf,
    /// Phases to score; all when absent.
    #[arg(long = "phase")]
    phases: Vec<Phase>,
    /// Label every false positive and false negative with a cause.
    #[arg(long)]
    attribute: bool,
    /// The analyzed binary, enabling byte-level attribution checks.
    #[arg(long)]
    binary: Option<PathBuf>,
}

#[derive(Args)]
struct MatrixArgs {
    /// Directory of `<name>.<ext>` binaries next to `<name>.truth` files.
    corpus: PathBuf,
    /// Comma-separated profiles; all when absent.
    #[arg(long, value_delimiter = ',')]
    profiles: Vec<String>,
    /// Directory for report.txt, report.csv and ablation.txt.
    #[arg(short, long)]
    output: Option<PathBuf>,
}

enum Failure {
    Usage(String),
    Input(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Input(_) => 2,
        }
    }
}

type CmdResult = Result<(), Failure>;

fn build_config(args: &ConfigArgs) -> Result<StrategyConfig, Failure> {
    let mut c = StrategyConfig::profile(&args.profile).map_err(|e| Failure::Usage(e.to_string()))?;
    if let Some(path) = &args.config {
        let text = fs::read_to_string(path).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))?;
        c.apply_file(&text)
            .map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    }
    for kv in &args.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Failure::Usage(format!("--set expects key=value, found `{kv}`")))?;
        c.set(k.trim(), v.trim()).map_err(|e| Failure::Usage(e.to_string()))?;
    }
    Ok(c)
}

fn stdout(text: &str) {
    let _ = io::stdout().lock().write_all(text.as_bytes());
}

fn write_out(path: Option<&Path>, text: &str) -> CmdResult {
    match path {
        Some(p) => fs::write(p, text).map_err(|e| Failure::Input(format!("{}: {e}", p.display()))),
        None => {
            stdout(text);
            Ok(())
        }
    }
}

fn cmd_disasm(args: &DisasmArgs) -> CmdResult {
    let config = build_config(&args.config)?;
    let image = load_binary(&args.binary).map_err(|e| Failure::Input(e.to_string()))?;
    let a = analyze(&image, &config);
    write_out(args.output.as_deref(), &a.facts.emit())
}

fn read_facts(path: &Path, truth: bool) -> Result<Facts, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))?;
    let parsed = if truth { Facts::parse_truth(&text) } else { Facts::parse(&text) };
    parsed.map_err(|e| Failure::Input(format!("{}: {e}", path.display())))
}

fn cmd_eval(args: &EvalArgs) -> CmdResult {
    let truth = read_facts(&args.truth, true)?;
    let result = read_facts(&args.result, false)?;
    let image = match &args.binary {
        Some(p) => Some(load_binary(p).map_err(|e| Failure::Input(e.to_string()))?),
        None => None,
    };
    let phases: Vec<Phase> = if args.phases.is_empty() {
        Phase::ALL.to_vec()
    } else {
        args.phases.clone()
    };
    let disjoint = !truth.instructions.is_empty()
        && !result.instructions.is_empty()
        && truth.instructions.keys().all(|a| !result.instructions.contains_key(a));
    if disjoint {
        eprintln!("warning: result and truth share no instruction address; are they for the same binary?");
    }
    let produced = result.phases();
    let empty = Facts::default();
    let mut out = String::new();
    for phase in phases {
        let side = if produced.contains(&phase) {
            &result
        } else {
            eprintln!("warning: result has no {phase} phase; scoring it as empty");
            &empty
        };
        let _ = writeln!(out, "{}", score(&truth, side, phase));
        if args.attribute {
            for e in attribute_errors(&truth, side, phase, image.as_ref()) {
                let _ = writeln!(out, "  {e}");
            }
        }
    }
    stdout(&out);
    Ok(())
}

fn cmd_matrix(args: &MatrixArgs) -> CmdResult {
    let names: Vec<String> = if args.profiles.is_empty() {
        PROFILES.iter().map(|p| p.to_string()).collect()
    } else {
        args.profiles.clone()
    };
    let profiles = names
        .iter()
        .map(|p| StrategyConfig::profile(p.trim()))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| Failure::Usage(e.to_string()))?;
    let (entries, mut failures) =
        load_corpus(&args.corpus).map_err(|e| Failure::Input(format!("{}: {e}", args.corpus.display())))?;
    if entries.is_empty() {
        return Err(Failure::Input(format!("{}: no binary with ground truth", args.corpus.display())));
    }
    let mut report = run_matrix(&entries, &profiles);
    failures.append(&mut report.failures);
    for f in &failures {
        match &f.profile {
            Some(p) => eprintln!("skipped {} under {p}: {}", f.binary, f.message),
            None => eprintln!("skipped {}: {}", f.binary, f.message),
        }
    }
    let (table, csv) = (report.table(), report.csv());
    let ablation = report.ablation("pure");
    match &args.output {
        Some(dir) => {
            let io = |e: std::io::Error| Failure::Input(format!("{}: {e}", dir.display()));
            fs::create_dir_all(dir).map_err(io)?;
            fs::write(dir.join("report.txt"), &table).map_err(io)?;
            fs::write(dir.join("report.csv"), &csv).map_err(io)?;
            fs::write(dir.join("ablation.txt"), &ablation).map_err(io)?;
            stdout(&table);
        }
        None if names.iter().any(|n| n == "pure") && names.len() > 1 => stdout(&format!("{table}\n{ablation}")),
        None => stdout(&table),
    }
    Ok(())
}

fn cmd_strategies_list() -> CmdResult {
    let configs: Vec<StrategyConfig> = PROFILES
        .iter()
        .map(|p| StrategyConfig::profile(p).expect("built-in profile"))
        .collect();
    let values: Vec<Vec<(&str, String)>> = configs.iter().map(StrategyConfig::entries).collect();
    let mut out = String::new();
    for (key, doc) in FLAG_DOCS {
        let _ = writeln!(out, "{key}\n    {doc}");
        out.push_str("   ");
        for (p, vals) in PROFILES.iter().zip(&values) {
            let v = vals.iter().find(|(k, _)| k == key).map_or("?", |(_, v)| v.as_str());
            let _ = write!(out, " {p}={v}");
        }
        out.push('\n');
    }
    stdout(&out);
    Ok(())
}

fn cmd_corpus(dir: &Path) -> CmdResult {
    let written = corpus::export(dir).map_err(|e| Failure::Input(format!("{}: {e}", dir.display())))?;
    let list: String = written.iter().map(|p| format!("{}\n", p.display())).collect();
    stdout(&list);
    Ok(())
}

fn run(cli: &Cli) -> CmdResult {
    match &cli.command {
        Command::Disasm(a) => cmd_disasm(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Matrix(a) => cmd_matrix(a),
        Command::Strategies {
            command: StrategiesCommand::List,
        } => cmd_strategies_list(),
        Command::Corpus { dir } => cmd_corpus(dir),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match panic::catch_unwind(AssertUnwindSafe(|| run(&cli))) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(f)) => {
            match &f {
                Failure::Usage(m) | Failure::Input(m) => eprintln!("error: {m}"),
            }
            ExitCode::from(f.code())
        }
        Err(_) => ExitCode::from(3),
    }
}
