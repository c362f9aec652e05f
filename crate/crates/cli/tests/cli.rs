use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn dissect(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dissect")).args(args).output().expect("runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn corpus() -> TempDir {
    let dir = TempDir::new().unwrap();
    let o = dissect(&["corpus", dir.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    dir
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).to_str().unwrap().to_string()
}

#[test]
fn linear_profile_writes_only_instructions() {
    let dir = corpus();
    let out = p(dir.path(), "out.res");
    let o = dissect(&["disasm", &p(dir.path(), "data_in_code.elf"), "--profile", "objdump", "-o", &out]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(&out).unwrap();
    let records: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
    assert!(!records.is_empty());
    assert!(records.iter().all(|l| l.starts_with("[inst]")), "{text}");
}

#[test]
fn override_is_echoed_in_header() {
    let dir = corpus();
    let o = dissect(&[
        "disasm",
        &p(dir.path(), "switch_relative.elf"),
        "--profile",
        "ghidra",
        "--set",
        "cfg.jt_bound_threshold=8",
    ]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("# profile = ghidra"));
    assert!(text.contains("# cfg.jt_bound_threshold = 8"), "{text}");
}

#[test]
fn config_file_then_set() {
    let dir = corpus();
    let cfg = p(dir.path(), "flags.conf");
    fs::write(&cfg, "# tuned\ncfg.jt_bound_threshold = 16\nsymbolize.enabled = false\n").unwrap();
    let o = dissect(&[
        "disasm",
        &p(dir.path(), "switch_relative.elf"),
        "--profile",
        "ghidra",
        "--config",
        &cfg,
        "--set",
        "cfg.jt_bound_threshold=4",
    ]);
    let text = stdout(&o);
    assert!(text.contains("# cfg.jt_bound_threshold = 4"));
    assert!(text.contains("# symbolize.enabled = false"));
    assert!(!text.contains("[xref]"));
}

#[test]
fn pure_result_has_no_false_instructions() {
    let dir = corpus();
    for name in ["clean_symbols", "switch_pc_thunk", "nonret_cascade"] {
        let res = p(dir.path(), &format!("{name}.res"));
        dissect(&["disasm", &p(dir.path(), &format!("{name}.elf")), "--profile", "pure", "-o", &res]);
        let o = dissect(&["eval", &p(dir.path(), &format!("{name}.truth")), &res, "--phase", "inst"]);
        assert!(stdout(&o).contains(" fp=0 "), "{name}: {}", stdout(&o));
    }
}

#[test]
fn eval_identity_and_attribution() {
    let dir = corpus();
    let truth = p(dir.path(), "data_in_code.truth");
    let o = dissect(&["eval", &truth, &truth]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert_eq!(text.lines().count(), 8);
    assert!(text.lines().all(|l| l.contains("precision=1.0000 recall=1.0000")), "{text}");

    let res = p(dir.path(), "objdump.res");
    dissect(&["disasm", &p(dir.path(), "data_in_code.elf"), "--profile", "objdump", "-o", &res]);
    let o = dissect(&["eval", &truth, &res, "--phase", "inst", "--attribute", "--binary", &p(dir.path(), "data_in_code.elf")]);
    let text = stdout(&o);
    assert!(text.contains("inst FP") && text.contains("cause=Data"), "{text}");
}

#[test]
fn missing_phase_warns_and_scores_zero_recall() {
    let dir = corpus();
    let truth = p(dir.path(), "nonret_cascade.truth");
    let res = p(dir.path(), "lin.res");
    dissect(&["disasm", &p(dir.path(), "nonret_cascade.elf"), "--profile", "objdump", "-o", &res]);
    let o = dissect(&["eval", &truth, &res, "--phase", "func"]);
    assert!(o.status.success());
    assert!(stderr(&o).contains("warning"));
    assert!(stdout(&o).contains("recall=0.0000"));
}

#[test]
fn disjoint_binaries_warn() {
    let dir = corpus();
    let o = dissect(&["eval", &p(dir.path(), "clean_symbols.truth"), &p(dir.path(), "sliding_string.truth")]);
    assert!(o.status.success());
    assert!(stderr(&o).contains("share no instruction"));
}

#[test]
fn matrix_is_deterministic_and_skips_failures() {
    let dir = corpus();
    fs::write(dir.path().join("broken.truth"), "[inst] 1000 1\n").unwrap();
    fs::write(dir.path().join("broken.bin"), b"garbage").unwrap();
    let run = |out: &str| {
        let o = dissect(&["matrix", dir.path().to_str().unwrap(), "--profiles", "pure,angr", "-o", out]);
        assert!(o.status.success(), "{}", stderr(&o));
        assert!(stderr(&o).contains("skipped broken"));
        (
            fs::read_to_string(Path::new(out).join("report.csv")).unwrap(),
            fs::read_to_string(Path::new(out).join("ablation.txt")).unwrap(),
        )
    };
    let a = run(&p(dir.path(), "m1"));
    let b = run(&p(dir.path(), "m2"));
    assert_eq!(a, b);
    assert!(a.0.starts_with("profile,phase,avg_pre,avg_rec,min_pre,min_rec\n"));
    let rec = |profile: &str| -> f64 {
        let line = a.0.lines().find(|l| l.starts_with(&format!("{profile},inst,"))).unwrap();
        line.split(',').nth(3).unwrap().parse().unwrap()
    };
    assert!(rec("pure") < rec("angr"));
    assert!(a.1.contains("angr"));
}

#[test]
fn strategies_list_covers_every_flag() {
    let o = dissect(&["strategies", "list"]);
    let text = stdout(&o);
    for key in ["sweep.policy", "recursive.prologue_match", "symbolize.alignment", "cfg.jt_strategy", "cfg.nonret_mode"] {
        assert!(text.lines().any(|l| l == key), "{key}");
    }
    assert!(text.contains("radare2=512") && text.contains("ghidra=1024") && text.contains("angr=100000"));
}

#[test]
fn exit_codes() {
    assert_eq!(dissect(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(dissect(&["disasm", "x", "--profile", "nope"]).status.code(), Some(1));
    assert_eq!(dissect(&["disasm", "x", "--set", "nokey"]).status.code(), Some(1));
    assert_eq!(dissect(&["disasm", "/definitely/missing"]).status.code(), Some(2));
    let dir = TempDir::new().unwrap();
    let bad = p(dir.path(), "bad.truth");
    fs::write(&bad, "[inst] 1000 2\n[inst] 1001 3\n").unwrap();
    let o = dissect(&["eval", &bad, &bad]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 2"));
    assert_eq!(dissect(&["--help"]).status.code(), Some(0));
}
