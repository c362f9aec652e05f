//! The fixture programs.

use super::asm::{Asm, Built};
use crate::image::{Mode, SectionKind};

type Build = fn() -> Built;

pub(super) const ALL: &[(&str, &str, Build)] = &[
    ("clean_symbols", "small program with full symbols and no tricks", clean_symbols),
    ("main_via_start", "stripped; main only reachable through the startup argument", main_via_start),
    ("data_in_code", "constant table embedded inside a function symbol", data_in_code),
    ("zero_pad", "stripped; one zero byte of padding before a function", zero_pad),
    ("nopw_pad", "stripped; truncated multi-byte nop that swallows the next prologue", nopw_pad),
    ("loop_bound_constant", "loop bound that looks like a data address", loop_bound_constant),
    ("switch_relative", "four-way switch through a base-relative table", switch_relative),
    ("switch_513", "switch with 514 table entries", switch_513),
    ("switch_unbounded", "switch index narrowed only by a zero extension", switch_unbounded),
    ("switch_double_bound", "absolute table guarded from above and below", switch_double_bound),
    ("switch_sub_index", "switch index rebased with a subtraction", switch_sub_index),
    ("switch_deep_slice", "bound check several blocks before the table jump", switch_deep_slice),
    ("switch_pc_thunk", "32-bit position-independent switch through the GOT pointer", switch_pc_thunk),
    ("fini_margin", "operand pointing into the hole between .fini and .rodata", fini_margin),
    ("sliding_string", "32-bit data where a short string precedes a code pointer", sliding_string),
    ("unaligned_pointer", "code pointer stored at an odd offset", unaligned_pointer),
    ("lone_pointer", "single code pointer next to a two-entry table", lone_pointer),
    ("nonret_cascade", "non-returning call followed by padding and a data-referenced function", nonret_cascade),
    ("nonret_chain", "non-returning functions through calls and a tail jump", nonret_chain),
    ("tailcall_cond", "conditional and unconditional tail calls", tailcall_cond),
    ("tailcall_teardown", "stack teardown before a tail call and before an internal jump", tailcall_teardown),
    ("call_table", "indirect calls through a table and a register", call_table),
    ("stripped_prologues", "functions reachable only through a data table", stripped_prologues),
    ("dead_prologue_x86", "32-bit program with an unreferenced framed function", dead_prologue_x86),
];

const TEXT: u64 = 0x401000;
const RODATA: u64 = 0x402000;
const DATA: u64 = 0x403000;
const GOT: u64 = 0x404000;

// x64 encodings used throughout.
const PUSH_RBP: &[u8] = &[0x55];
const MOV_RBP_RSP: &[u8] = &[0x48, 0x89, 0xe5];
const POP_RBP: &[u8] = &[0x5d];
const RET: &[u8] = &[0xc3];
const XOR_EAX: &[u8] = &[0x31, 0xc0];
const HLT: &[u8] = &[0xf4];
const TEST_EDI: &[u8] = &[0x85, 0xff];
const SUB_RSP_8: &[u8] = &[0x48, 0x83, 0xec, 0x08];
const ADD_RSP_8: &[u8] = &[0x48, 0x83, 0xc4, 0x08];
const NOPW: &[u8] = &[0x66, 0x2e, 0x0f, 0x1f, 0x84, 0x00, 0x00, 0x00, 0x00, 0x00];

fn mov_eax(v: u32) -> Vec<u8> {
    let mut b = vec![0xb8];
    b.extend_from_slice(&v.to_le_bytes());
    b
}

fn mov_edi(v: u32) -> Vec<u8> {
    let mut b = vec![0xbf];
    b.extend_from_slice(&v.to_le_bytes());
    b
}

fn got(a: &mut Asm, vaddr: u64, slots: &[&str]) {
    a.section(".got", vaddr, SectionKind::Data);
    for s in slots {
        a.label(s);
        a.data(&[0; 8]);
    }
}

/// glibc-style `_start` passing `main` to the startup routine.
fn start64(a: &mut Asm, symbol: bool) {
    a.func("_start", symbol);
    a.i(&[0x31, 0xed]);
    a.i(&[0x49, 0x89, 0xd1]);
    a.abs(&[0x48, 0xc7, 0xc7], "main", 0, &[], true);
    a.rel(&[0xff, 0x15], "got_start_main", &[], true);
    a.i(HLT);
    a.end_func();
    a.nonret("_start");
    a.entry("_start");
}

fn start32(a: &mut Asm) {
    a.func("_start", true);
    a.i(&[0x31, 0xed]);
    a.i(&[0x5e]);
    a.i(&[0x89, 0xe1]);
    a.abs(&[0x68], "main", 0, &[], true);
    a.abs(&[0xff, 0x15], "got_start_main", 0, &[], true);
    a.i(HLT);
    a.end_func();
    a.nonret("_start");
    a.entry("_start");
}

fn got32(a: &mut Asm, vaddr: u64) {
    a.section(".got", vaddr, SectionKind::Data);
    a.label("got_start_main");
    a.data(&[0; 4]);
}

fn leaf_return(a: &mut Asm, name: &str, symbol: bool, value: u32) {
    a.func(name, symbol);
    a.i(&mov_eax(value));
    a.i(RET);
    a.end_func();
}

fn clean_symbols() -> Built {
    let mut a = Asm::new(Mode::X64);
    a.text(TEXT);
    start64(&mut a, true);
    a.align(16, 0x90);
    a.func("main", true);
    a.main("main");
    a.i(PUSH_RBP);
    a.i(MOV_RBP_RSP);
    a.i(&mov_edi(5));
    a.call("add1");
    a.i(&[0x89, 0xc7]);
    a.call("sum");
    a.rel(&[0x48, 0x8d, 0x3d], "counter", &[], true);
    a.i(&[0x89, 0x07]);
    a.i(POP_RBP);
    a.i(RET);
    a.end_func();
    a.align(16, 0x90);
    a.func("add1", true);
    a.i(&[0x8d, 0x47, 0x01]);
    a.i(RET);
    a.end_func();
    a.align(16, 0x90);
    a.func("sum", true);
    a.i(XOR_EAX);
    a.label("sum_loop");
    a.i(&[0x01, 0xf8]);
    a.i(&[0xff, 0xcf]);
    a.jcc8(0x5, "sum_loop");
    a.i(RET);
    a.end_func();
    a.section(".data", DATA, SectionKind::Data);
    a.object_symbol("counter");
    a.data(&[0; 8]);
    got(&mut a, GOT, &["got_start_main"]);
    a.finish("clean_symbols")
}

fn main_via_start() -> Built {
    let mut a = Asm::new(Mode::X64);
    a.text(0x40e0c0);
    start64(&mut a, false);
    a.pad(NOPW);
    a.pad(&[0x0f, 0x1f, 0x40, 0x00]);
    a.pad(&[0x90]);
    assert_eq!(a.here(), 0x40e0e2);
    a.func("main", false);
    a.main("main");
    a.i(PUSH_RBP);
    a.i(MOV_RBP_RSP);
    a.call("helper");
    a.i(XOR_EAX);
    a.i(POP_RBP);
    a.i(RET);
    a.align(16, 0x90);
    leaf_return(&mut a, "helper", false, 42);
    got(&mut a, 0x610000, &["got_start_main"]);
    a.finish("main_via_start")
}

fn data_in_code() -> Built {
    let mut a = Asm::new(Mode::X64);
    a.text(TEXT);
    a.func("_start", true);
    a.entry("_start");
    a.nonret("_start");
    a.call("AES_cbc_encrypt");
    a.call("AES_done");
    a.i(HLT);
    a.end_func();
    a.align(16, 0x90);
    a.func("AES_cbc_encrypt", true);
    a.i(&[0x9c]);
    a.i(XOR_EAX);
    a.i(&[0x9d]);
    a.i(&[0xf3, 0xc3]);
    a.align(16, 0x90);
    a.data(&[
        0xc6, 0x63, 0x63, 0xa5, 0xf8, 0x7c, 0x7c, 0x84, 0xee, 0x77, 0x77, 0x99, 0xf6, 0x7b, 0x7b, 0x8d,
    ]);
    a.end_func();
    a.pad(&[0x90; 16]);
    a.func("AES_done", true);
    a.i(XOR_EAX);
    a.i(RET);
    a.end_func();
    a.finish("data_in_code")
}

fn zero_pad() -> Built {
    let mut a = Asm::new(Mode::X64);
    a.text(TEXT);
    a.func("_start", false);
    a.entry("_start");
    a.nonret("_start");
    a.call("f");
    a.call("g");
    a.i(HLT);
    a.func("f", false);
    a.i(PUSH_RBP);
    a.i(MOV_RBP_RSP);
    a.i(POP_RBP);
    a.i(RET);
    a.pad(&[0x00]);
    a.func("g", false);
    a.i(&[0xc7, 0x06, 0x01, 0x00, 0x00, 0x00]);
    a.i(RET);
    a.finish("zero_pad")
}

fn nopw_pad() -> Built {
    let mut a = Asm::new(Mode::X64);
    a.text(TEXT);
    a.func("_start", false);
    a.entry("_start");
    a.nonret("_start");
    a.call("f");
    a.call("g");
    a.i(HLT);
    a.func("f", false);
    a.i(PUSH_RBP);
    a.i(MOV_RBP_RSP);
    a.i(POP_RBP);
    a.i(RET);
    a.pad(&NOPW[..6]);
    a.func("g", false);
    a.i(PUSH_RBP);
    a.i(MOV_RBP_RSP);
    a.i(&mov_eax(1));
    a.i(POP_RBP);
    a.i(RET);
    a.finish("nopw_pad")
}

fn loop_bound_constant() -> Built {
    let mut a = Asm::new(Mode::X64);
    a.text(TEXT);
    start64(&mut a, true);
    a.align(16, 0x90);
    a.func("main", true);
    a.main("main");
    a.rel(&[0x48, 0x8d, 0x3d], "buf", &[], true);
    a.i(&[0xbe, 0xa0, 0xb8, 0x6a, 0x00]);
    a.i(XOR_EAX);
    a.label("loop");
    a.i(&[0x48, 0x83, 0xc0, 0x10]);
    a.i(&[0x48, 0x39, 0xf0]);
    a.jcc8(0x2, "loop");
    a.i(RET);
    a.end_func();
    a.section(".data", 0x6ab000, SectionKind::Data);
    a.data(&[0; 0x100]);
    a.object_symbol("buf");
    a.data(&[0; 0xf00]);
    got(&mut a, 0x6ac000, &["got_start_main"]);
    a.finish("loop_bound_constant")
}

/// `_start` that calls `sw` with a constant and halts.
fn switch_start(a: &mut Asm) {
    a.func("_start", true);
    a.entry("_start");
    a.nonret("_start");
    a.i(&mov_edi(2));
    a.call("sw");
    a.i(HLT);
    a.end_func();
    a.align(16, 0x90);
}

fn cases(a: &mut Asm, n: usize) -> Vec<String> {
    let mut out = Vec::new();
    for k in 0..n {
        let l = format!("case{k}");
        a.label(&l);
        a.i(&mov_eax(k as u32 + 10));
        a.i(RET);
        out.push(l);
    }
    a.label("default");
    a.i(XOR_EAX);
    a.i(RET);
    out
}

fn relative_table(a: &mut Asm, site: u64, targets: &[String]) {
    a.section(".rodata", RODATA, SectionKind::Data);
    a.align(4, 0);
    a.label("table");
    for t in targets {
        a.rel_entry(t, "table");
    }
    let refs: Vec<&str> = targets.iter().map(String::as_str).collect();
    a.table(site, "table", 4, &refs);
}

fn switch_relative() -> Built {
    let mut a = Asm::new(Mode::X64);
    a.text(TEXT);
    switch_start(&mut a);
    a.func("sw", true);
    a.i(&[0x89, 0xf9]);
    a.i(&[0x80, 0xf9, 0x03]);
    a.jcc8(0x7, "default");
    a.rel(&[0x4c, 0x8d, 0x05], "table", &[], true);
    a.i(&[0x0f, 0xb6, 0xc9]);
    a.i(&[0x49, 0x63, 0x04, 0x88]);
    a.i(&[0x4c, 0x01, 0xc0]);
    let site = a.i(&[0xff, 0xe0]);
    let targets = cases(&mut a, 4);
    a.end_func();
    relative_table(&mut a, site, &targets);
    a.finish("switch_relative")
}

fn switch_513() -> Built {
    let mut a = Asm::new(Mode::X64);
    a.text(TEXT);
    switch_start(&mut a);
    a.func("sw", true);
    a.i(&[0x89, 0xf9]);
    a.i(&[0x81, 0xf9, 0x01, 0x02, 0x00, 0x00]);
    a.jcc(0x7, "default");
    a.rel(&[0x4c, 0x8d, 0x05], "table", &[], true);
    a.i(&[0x49, 0x63, 0x04, 0x88]);
    a.i(&[0x4c, 0x01, 0xc0]);
    let site = a.i(&[0xff, 0xe0]);
    let distinct = cases(&mut a, 8);
    a.end_func();
    let targets: Vec<String> = (0..=0x201).map(|i| distinct[i % distinct.len()].clone()).collect();
    relative_table(&mut a, site, &targets);
    a.finish("switch_513")
}

fn switch_unbounded() -> Built {
    let mut a = Asm::new(Mode::X64);
    a.text(TEXT);
    switch_start(&mut a);
    a.func("sw", true);
    a.i(&[0x89, 0xf8]);
    a.i(&[0x83, 0xe8, 0x64]);
    a.i(&[0x0f, 0xb6, 0xc0]);
    a.rel(&[0x4c, 0x8d, 0x15], "table", &[], true);
    a.i(&[0x49, 0x63, 0x04, 0x82]);
    a.i(&[0x4c, 0x01, 0xd0]);
    let site = a.i(&[0xff, 0xe0]);
    let targets = cases(&mut a, 4);
    a.end_func();
    relative_table(&mut a, site, &targets);
    a.finish("switch_unbounded")
}

fn switch_double_bound() -> Built {
    let mut a = Asm::new(Mode::X64);
    a.text(TEXT);
    switch_start(&mut a);
    a.func("sw", true);
    a.i(&[0x48, 0x63, 0xc7]);
    a.i(&[0x48, 0x83, 0xf8, 0x04]);
    a.jcc(0x7, "default");
    a.i(&[0x48, 0x83, 0xf8, 0x00]);
    a.jcc(0xe, "default");
    let site = a.abs(&[0xff, 0x24, 0xc5], "table", 0, &[], true);
    let targets = cases(&mut a, 4);
    a.end_func();
    a.section(".rodata", RODATA, SectionKind::Data);
    a.label("table");
    a.ptr("default");
    for t in &targets {
        a.ptr(t);
    }
    let refs: Vec<&str> = targets.iter().map(String::as_str).collect();
    a.table(site, "table", 8, &refs);
    a.finish("switch_double_bound")
}

fn switch_sub_index() -> Built {
    let mut a = Asm::new(Mode::X64);
    a.text(TEXT);
    switch_start(&mut a);
    a.func("sw", true);
    a.i(&[0x89, 0xf8]);
    a.i(&[0x83, 0xf8, 0x74]);
    a.jcc(0x7, "default");
    a.i(&[0x83, 0xf8, 0x64]);
    a.jcc(0x2, "default");
    a.i(&[0x83, 0xe8, 0x64]);
    a.rel(&[0x48, 0x8d, 0x15], "table", &[], true);
    a.i(&[0x48, 0x63, 0x04, 0x82]);
    a.i(&[0x48, 0x01, 0xd0]);
    let site = a.i(&[0xff, 0xe0]);
    let distinct = cases(&mut a, 5);
    a.end_func();
    let targets: Vec<String> = (0..=0x10).map(|i| distinct[i % distinct.len()].clone()).collect();
    relative_table(&mut a, site, &targets);
    a.finish("switch_sub_index")
}

fn switch_deep_slice() -> Built {
    let mut a = Asm::new(Mode::X64);
    a.text(TEXT);
    switch_start(&mut a);
    a.func("sw", true);
    a.i(&[0x83, 0xff, 0x03]);
    a.jcc(0x7, "default");
    for (k, (test, inc)) in [([0x85, 0xf6], [0xff, 0xc6]), ([0x85, 0xd2], [0xff, 0xc2]), ([0x85, 0xc9], [0xff, 0xc1])]
        .iter()
        .enumerate()
    {
        let next = format!("step{k}");
        a.i(test);
        a.jcc8(0x4, &next);
        a.i(inc);
        a.label(&next);
    }
    a.rel(&[0x4c, 0x8d, 0x0d], "table", &[], true);
    a.i(&[0x49, 0x63, 0x04, 0xb9]);
    a.i(&[0x4c, 0x01, 0xc8]);
    let site = a.i(&[0xff, 0xe0]);
    let targets = cases(&mut a, 4);
    a.end_func();
    relative_table(&mut a, site, &targets);
    a.finish("switch_deep_slice")
}

fn switch_pc_thunk() -> Built {
    let mut a = Asm::new(Mode::X86);
    a.text(0x8048100);
    start32(&mut a);
    a.align(16, 0x90);
    a.func("main", true);
    a.main("main");
    a.i(&[0x6a, 0x02]);
    a.call("sw");
    a.i(&[0x83, 0xc4, 0x04]);
    a.i(RET);
    a.end_func();
    a.align(16, 0x90);
    a.func("sw", true);
    a.i(&[0x53]);
    a.call("__x86.get_pc_thunk.bx");
    a.label("sw_pc");
    a.diff(&[0x81, 0xc3], "got", "sw_pc", &[]);
    a.i(&[0x8b, 0x44, 0x24, 0x08]);
    a.i(&[0x83, 0xf8, 0x03]);
    a.jcc8(0x7, "sw_default");
    a.diff(&[0x8b, 0x84, 0x83], "table", "got", &[]);
    a.i(&[0x01, 0xd8]);
    let site = a.i(&[0xff, 0xe0]);
    let mut targets = Vec::new();
    for k in 0..4u32 {
        let l = format!("case{k}");
        a.label(&l);
        a.i(&mov_eax(k + 10));
        a.i(&[0x5b]);
        a.i(RET);
        targets.push(l);
    }
    a.label("sw_default");
    a.i(XOR_EAX);
    a.i(&[0x5b]);
    a.i(RET);
    a.end_func();
    a.align(16, 0x90);
    a.func("__x86.get_pc_thunk.bx", true);
    a.i(&[0x8b, 0x1c, 0x24]);
    a.i(RET);
    a.end_func();
    a.section(".rodata", 0x8049000, SectionKind::Data);
    a.label("table");
    for t in &targets {
        a.rel_entry(t, "got");
    }
    let refs: Vec<&str> = targets.iter().map(String::as_str).collect();
    a.table(site, "table", 4, &refs);
    a.section(".got.plt", 0x804a000, SectionKind::Data);
    a.label("got");
    a.data(&[0; 12]);
    got32(&mut a, 0x804a100);
    a.finish("switch_pc_thunk")
}

fn fini_margin() -> Built {
    let mut a = Asm::new(Mode::X64);
    a.text(TEXT);
    start64(&mut a, true);
    a.align(16, 0x90);
    a.func("main", true);
    a.main("main");
    a.i(&[0xbb, 0x0e, 0x00, 0x00, 0x00]);
    a.define("before_rodata", 0x4e33be);
    a.abs(&[0x0f, 0xb7, 0x83], "before_rodata", 0, &[], true);
    a.i(RET);
    a.end_func();
    a.section(".fini", 0x4e33b0, SectionKind::Code);
    a.func("_fini", true);
    a.i(SUB_RSP_8);
    a.i(ADD_RSP_8);
    a.i(RET);
    a.end_func();
    a.pad(&[0; 4]);
    a.section(".rodata", 0x4e33c0, SectionKind::Data);
    a.data(&[1, 0, 2, 0, 3, 0, 5, 0, 8, 0, 13, 0, 21, 0, 34, 0]);
    got(&mut a, 0x4e4000, &["got_start_main"]);
    a.finish("fini_margin")
}

fn sliding_string() -> Built {
    let mut a = Asm::new(Mode::X86);
    a.text(0x804c1e0);
    start32(&mut a);
    a.pad(&[0x8d, 0xb6, 0x00, 0x00, 0x00, 0x00]);
    assert_eq!(a.here(), 0x804c1f7);
    a.func("handler", true);
    a.i(PUSH_RBP);
    a.i(&[0x89, 0xe5]);
    a.i(&mov_eax(7));
    a.i(POP_RBP);
    a.i(RET);
    a.end_func();
    a.align(16, 0x90);
    a.func("main", true);
    a.main("main");
    a.abs(&[0xa1], "slot", 0, &[], true);
    a.i(RET);
    a.end_func();
    a.section(".data", 0x804f160, SectionKind::Data);
    a.data(&[0; 12]);
    a.data(&[0x61, 0, 0, 0]);
    a.label("slot");
    a.ptr("handler");
    a.data(&[0; 4]);
    got32(&mut a, 0x8050000);
    a.finish("sliding_string")
}

fn unaligned_pointer() -> Built {
    let mut a = Asm::new(Mode::X64);
    a.text(TEXT);
    start64(&mut a, true);
    a.align(16, 0x90);
    a.func("main", true);
    a.main("main");
    a.rel(&[0x48, 0x8d, 0x05], "packed", &[], true);
    a.i(RET);
    a.end_func();
    a.align(16, 0x90);
    leaf_return(&mut a, "handler", true, 3);
    a.section(".data", DATA, SectionKind::Data);
    a.label("packed");
    a.data(&[1, 2, 3]);
    a.ptr("handler");
    a.data(&[0; 5]);
    got(&mut a, GOT, &["got_start_main"]);
    a.finish("unaligned_pointer")
}

fn lone_pointer() -> Built {
    let mut a = Asm::new(Mode::X64);
    a.text(TEXT);
    start64(&mut a, true);
    a.align(16, 0x90);
    a.func("main", true);
    a.main("main");
    a.rel(&[0x48, 0x8d, 0x05], "vars", &[], true);
    a.i(RET);
    a.end_func();
    for (k, name) in ["f1", "f2", "f3"].iter().enumerate() {
        a.align(16, 0x90);
        leaf_return(&mut a, name, true, k as u32);
    }
    a.section(".data", DATA, SectionKind::Data);
    a.label("vars");
    a.ptr("f1");
    a.data(&[0; 8]);
    a.ptr("f2");
    a.ptr("f3");
    got(&mut a, GOT, &["got_start_main"]);
    a.finish("lone_pointer")
}

fn plt_exit(a: &mut Asm) {
    a.func("exit", true);
    a.rel(&[0xff, 0x25], "got_exit", &[], true);
    a.end_func();
    a.nonret("exit");
    a.align(16, 0x90);
}

fn nonret_cascade() -> Built {
    let mut a = Asm::new(Mode::X64);
    a.text(TEXT);
    start64(&mut a, true);
    a.align(16, 0x90);
    plt_exit(&mut a);
    a.func("main", true);
    a.main("main");
    a.i(SUB_RSP_8);
    a.i(TEST_EDI);
    a.jcc8(0x5, "main_err");
    a.i(XOR_EAX);
    a.i(ADD_RSP_8);
    a.i(RET);
    a.label("main_err");
    a.call("f");
    a.end_func();
    a.align(16, 0x90);
    a.func("f", true);
    a.nonret("f");
    a.rel(&[0x48, 0x8d, 0x3d], "msg", &[], true);
    a.i(&mov_edi(1));
    a.call("exit");
    a.end_func();
    a.pad(NOPW);
    a.pad(&[0, 0, 0]);
    a.func("g", false);
    a.i(&[0x48, 0x83, 0x7e, 0x68, 0x00]);
    a.jcc8(0x4, "g_zero");
    a.i(&[0x48, 0x8b, 0x06]);
    a.i(RET);
    a.label("g_zero");
    a.i(XOR_EAX);
    a.i(RET);
    a.section(".data", DATA, SectionKind::Data);
    a.label("callbacks");
    a.ptr("g");
    a.label("msg");
    a.data(b"fatal error\0");
    got(&mut a, GOT, &["got_start_main", "got_exit"]);
    a.finish("nonret_cascade")
}

fn nonret_chain() -> Built {
    let mut a = Asm::new(Mode::X64);
    a.text(TEXT);
    start64(&mut a, true);
    a.align(16, 0x90);
    plt_exit(&mut a);
    a.func("main", true);
    a.main("main");
    a.i(SUB_RSP_8);
    a.call("usage");
    a.i(&[0x85, 0xc0]);
    a.jcc8(0x5, "main_bad");
    a.i(ADD_RSP_8);
    a.i(RET);
    a.label("main_bad");
    a.call("bail");
    a.end_func();
    a.func("fatal", true);
    a.nonret("fatal");
    a.rel(&[0x48, 0x8d, 0x3d], "msg", &[], true);
    a.i(&mov_edi(2));
    a.call("exit");
    a.end_func();
    a.func("die", true);
    a.nonret("die");
    a.i(&[0x89, 0xfe]);
    a.call("fatal");
    a.end_func();
    a.func("usage", true);
    a.i(TEST_EDI);
    a.jcc8(0x4, "usage_ok");
    a.call("die");
    a.label("usage_ok");
    a.i(XOR_EAX);
    a.i(RET);
    a.end_func();
    a.func("bail", true);
    a.nonret("bail");
    a.i(&[0x31, 0xff]);
    a.tail_jmp("fatal");
    a.end_func();
    a.section(".data", DATA, SectionKind::Data);
    a.label("msg");
    a.data(b"usage: prog\0");
    got(&mut a, GOT, &["got_start_main", "got_exit"]);
    a.finish("nonret_chain")
}

fn tailcall_cond() -> Built {
    let mut a = Asm::new(Mode::X64);
    a.text(TEXT);
    start64(&mut a, true);
    a.align(16, 0x90);
    a.func("main", true);
    a.main("main");
    a.i(SUB_RSP_8);
    a.i(&mov_edi(3));
    a.call("f");
    a.i(&[0x89, 0xc7]);
    a.call("f2");
    a.i(ADD_RSP_8);
    a.i(RET);
    a.end_func();
    a.align(16, 0x90);
    a.func("f", true);
    a.i(TEST_EDI);
    a.tail_jcc(0xe, "g");
    a.i(&mov_eax(1));
    a.i(RET);
    a.end_func();
    a.align(16, 0x90);
    a.func("f2", true);
    a.i(&[0x8d, 0x7f, 0x01]);
    a.tail_jmp("h");
    a.end_func();
    a.align(16, 0x90);
    a.func("g", true);
    a.i(XOR_EAX);
    a.i(RET);
    a.end_func();
    a.align(16, 0x90);
    a.func("h", true);
    a.i(&[0x8d, 0x04, 0x3f]);
    a.i(RET);
    a.end_func();
    got(&mut a, GOT, &["got_start_main"]);
    a.finish("tailcall_cond")
}

fn tailcall_teardown() -> Built {
    let mut a = Asm::new(Mode::X64);
    a.text(TEXT);
    start64(&mut a, true);
    a.align(16, 0x90);
    a.func("main", true);
    a.main("main");
    a.i(SUB_RSP_8);
    a.call("f");
    a.call("f2");
    a.i(ADD_RSP_8);
    a.i(RET);
    a.end_func();
    a.align(16, 0x90);
    a.func("f", true);
    a.i(&[0x48, 0x83, 0xec, 0x18]);
    a.i(&[0x48, 0x89, 0x3c, 0x24]);
    a.i(&[0x48, 0x83, 0xc4, 0x18]);
    a.tail_jmp("h");
    a.end_func();
    a.align(16, 0x90);
    a.func("f2", true);
    a.i(&[0x48, 0x83, 0xec, 0x18]);
    a.i(TEST_EDI);
    a.jcc8(0x4, "f2_skip");
    a.i(&mov_eax(1));
    a.i(&[0x48, 0x83, 0xc4, 0x18]);
    a.jmp8("f2_out");
    a.label("f2_skip");
    a.i(&mov_eax(2));
    a.i(&[0x48, 0x83, 0xc4, 0x18]);
    a.label("f2_out");
    a.i(RET);
    a.end_func();
    a.align(16, 0x90);
    a.func("h", false);
    a.i(XOR_EAX);
    a.i(RET);
    got(&mut a, GOT, &["got_start_main"]);
    a.finish("tailcall_teardown")
}

fn call_table() -> Built {
    let mut a = Asm::new(Mode::X64);
    a.text(TEXT);
    start64(&mut a, true);
    a.align(16, 0x90);
    a.func("main", true);
    a.main("main");
    a.i(SUB_RSP_8);
    a.i(&mov_eax(1));
    let site = a.abs(&[0xff, 0x14, 0xc5], "handlers", 0, &[], true);
    a.indirect_call(site, "app_main");
    a.rel(&[0x48, 0x8d, 0x15], "helper", &[], true);
    let site = a.i(&[0xff, 0xd2]);
    a.indirect_call(site, "helper");
    a.i(ADD_RSP_8);
    a.i(RET);
    a.end_func();
    for (k, name) in ["other", "app_main", "helper"].iter().enumerate() {
        a.align(16, 0x90);
        a.func(name, false);
        a.i(PUSH_RBP);
        a.i(MOV_RBP_RSP);
        a.i(&mov_eax(k as u32));
        a.i(POP_RBP);
        a.i(RET);
    }
    a.section(".data", DATA, SectionKind::Data);
    a.label("handlers");
    a.ptr("other");
    a.ptr("app_main");
    got(&mut a, GOT, &["got_start_main"]);
    a.finish("call_table")
}

fn stripped_prologues() -> Built {
    let mut a = Asm::new(Mode::X64);
    a.text(TEXT);
    start64(&mut a, true);
    a.align(16, 0x90);
    a.func("main", true);
    a.main("main");
    a.rel(&[0x48, 0x8d, 0x05], "ops", &[], true);
    let site = a.i(&[0xff, 0x10]);
    a.indirect_call(site, "framed1");
    a.i(XOR_EAX);
    a.i(RET);
    a.end_func();
    for name in ["framed1", "framed2"] {
        a.align(16, 0x90);
        a.func(name, false);
        a.i(PUSH_RBP);
        a.i(MOV_RBP_RSP);
        a.i(&[0x8d, 0x04, 0x37]);
        a.i(POP_RBP);
        a.i(RET);
    }
    a.align(16, 0x90);
    a.func("leaf1", false);
    a.i(&[0x8d, 0x04, 0x3f]);
    a.i(RET);
    a.align(16, 0x90);
    a.func("leaf2", false);
    a.i(&[0x89, 0xf8]);
    a.i(&[0x0f, 0xaf, 0xc7]);
    a.i(RET);
    a.section(".data", DATA, SectionKind::Data);
    a.label("ops");
    for name in ["framed1", "framed2", "leaf1", "leaf2"] {
        a.ptr(name);
    }
    got(&mut a, GOT, &["got_start_main"]);
    a.finish("stripped_prologues")
}

fn dead_prologue_x86() -> Built {
    let mut a = Asm::new(Mode::X86);
    a.text(0x8048100);
    start32(&mut a);
    a.align(16, 0x90);
    a.func("main", true);
    a.main("main");
    a.i(&mov_eax(0));
    a.i(RET);
    a.end_func();
    a.align(16, 0x90);
    a.func("unused", false);
    a.i(PUSH_RBP);
    a.i(&[0x89, 0xe5]);
    a.i(&[0x83, 0xec, 0x10]);
    a.i(&[0x8b, 0x45, 0x08]);
    a.i(&[0x0f, 0xaf, 0xc0]);
    a.i(&[0xc9]);
    a.i(RET);
    got32(&mut a, 0x804a000);
    a.finish("dead_prologue_x86")
}
