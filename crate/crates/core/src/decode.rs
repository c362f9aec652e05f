//! Single-instruction decoding and control-flow classification.

use std::cell::RefCell;
use std::fmt;

use iced_x86::{Formatter, GasFormatter, OpKind, Register};
use thiserror::Error;

use crate::image::{ByteSource, Mode};

/// Control-flow class of a decoded instruction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FlowKind {
    Fallthrough,
    CallDirect,
    CallIndirect,
    JumpDirect,
    JumpIndirect,
    CondJump,
    Ret,
    Halt,
}

impl FlowKind {
    /// Whether execution may continue at the next instruction.
    pub fn falls_through(self) -> bool {
        matches!(
            self,
            FlowKind::Fallthrough | FlowKind::CallDirect | FlowKind::CallIndirect | FlowKind::CondJump
        )
    }

    pub fn is_call(self) -> bool {
        matches!(self, FlowKind::CallDirect | FlowKind::CallIndirect)
    }

    pub fn is_transfer(self) -> bool {
        !matches!(self, FlowKind::Fallthrough)
    }

    /// Ends a basic block. Calls end blocks too.
    pub fn ends_block(self) -> bool {
        self != FlowKind::Fallthrough
    }
}

/// A general-purpose register family or another register.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Reg {
    /// 0 = rax, 1 = rcx, 2 = rdx, 3 = rbx, 4 = rsp, 5 = rbp, 6 = rsi, 7 = rdi, 8..=15 = r8..r15.
    Gpr(u8),
    Ip,
    Other(u32),
}

pub const RAX: Reg = Reg::Gpr(0);
pub const RCX: Reg = Reg::Gpr(1);
pub const RDX: Reg = Reg::Gpr(2);
pub const RBX: Reg = Reg::Gpr(3);
pub const RSP: Reg = Reg::Gpr(4);
pub const RBP: Reg = Reg::Gpr(5);
pub const RSI: Reg = Reg::Gpr(6);
pub const RDI: Reg = Reg::Gpr(7);

const GPR_NAMES: [&str; 16] = [
    "rax", "rcx", "rdx", "rbx", "rsp", "rbp", "rsi", "rdi", "r8", "r9", "r10", "r11", "r12",
    "r13", "r14", "r15",
];

impl fmt::Display for Reg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Reg::Gpr(n) => f.write_str(GPR_NAMES[*n as usize & 15]),
            Reg::Ip => f.write_str("rip"),
            Reg::Other(n) => write!(f, "reg{n}"),
        }
    }
}

fn map_register(r: Register) -> Reg {
    if r == Register::RIP || r == Register::EIP {
        return Reg::Ip;
    }
    let full = r.full_register();
    let idx = full as u32;
    let base = Register::RAX as u32;
    if (base..base + 16).contains(&idx) && r.is_gpr() {
        Reg::Gpr((idx - base) as u8)
    } else {
        Reg::Other(r as u32)
    }
}

/// Memory operand. RIP-relative displacements are resolved to absolute
/// addresses, with `base` left empty and `rip_relative` set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct MemExpr {
    pub base: Option<Reg>,
    pub index: Option<Reg>,
    pub scale: u8,
    pub displacement: i64,
    pub rip_relative: bool,
    /// Access width in bytes; 0 when not applicable (e.g. `lea`).
    pub size: u8,
}

impl MemExpr {
    /// Absolute address when the expression has no register component.
    pub fn absolute(&self) -> Option<u64> {
        (self.base.is_none() && self.index.is_none()).then_some(self.displacement as u64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Operand {
    Reg { reg: Reg, width: u8 },
    Imm(u64),
    Mem(MemExpr),
    Branch(u64),
    Other,
}

/// A constant operand: immediate or memory displacement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ConstOperand {
    pub position: u8,
    pub value: u64,
    pub from_memory: bool,
}

/// A decoded instruction. Operands are listed destination first.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Instruction {
    pub vaddr: u64,
    pub length: u8,
    pub text: String,
    pub mnemonic: String,
    pub flow: FlowKind,
    pub operands: Vec<Operand>,
    pub const_operands: Vec<ConstOperand>,
    pub branch_target: Option<u64>,
    pub memory: Option<MemExpr>,
    pub first_byte: u8,
    pub is_float: bool,
}

impl Instruction {
    pub fn end(&self) -> u64 {
        self.vaddr + u64::from(self.length)
    }

    pub fn next(&self) -> u64 {
        self.end()
    }

    pub fn is_nop(&self) -> bool {
        self.mnemonic == "nop" || (self.mnemonic == "xchg" && self.text.contains("%ax,%ax"))
    }

    pub fn reg_operand(&self, pos: usize) -> Option<Reg> {
        match self.operands.get(pos) {
            Some(Operand::Reg { reg, .. }) => Some(*reg),
            _ => None,
        }
    }

    pub fn imm_operand(&self, pos: usize) -> Option<u64> {
        match self.operands.get(pos) {
            Some(Operand::Imm(v)) => Some(*v),
            _ => None,
        }
    }

    pub fn mem_operand(&self, pos: usize) -> Option<MemExpr> {
        match self.operands.get(pos) {
            Some(Operand::Mem(m)) => Some(*m),
            _ => None,
        }
    }

    pub fn operand_width(&self, pos: usize) -> u8 {
        match self.operands.get(pos) {
            Some(Operand::Reg { width, .. }) => *width,
            Some(Operand::Mem(m)) => m.size,
            _ => 0,
        }
    }
}

impl fmt::Display for Instruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:x}: {}", self.vaddr, self.text)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Error)]
pub enum DecodeError {
    #[error("address {0:#x} is outside the image")]
    OutOfImage(u64),
    #[error("invalid opcode at {vaddr:#x} (first byte {byte:#04x})")]
    InvalidOpcode { vaddr: u64, byte: u8 },
}

impl DecodeError {
    pub fn vaddr(&self) -> u64 {
        match self {
            DecodeError::OutOfImage(a) => *a,
            DecodeError::InvalidOpcode { vaddr, .. } => *vaddr,
        }
    }
}

/// Pluggable instruction decoder.
pub trait InstructionDecoder {
    fn decode(&self, bytes: &[u8], vaddr: u64, mode: Mode) -> Result<Instruction, DecodeError>;
}

/// Decoder backed by iced-x86 with AT&T rendering.
#[derive(Debug, Default, Clone, Copy)]
pub struct IcedDecoder;

thread_local! {
    static FORMATTER: RefCell<GasFormatter> = RefCell::new({
        let mut f = GasFormatter::new();
        f.options_mut().set_uppercase_hex(false);
        f.options_mut().set_rip_relative_addresses(true);
        f.options_mut().set_space_after_operand_separator(false);
        f
    });
}

const JCC: &[&str] = &[
    "ja", "jae", "jb", "jbe", "je", "jg", "jge", "jl", "jle", "jne", "jno", "jnp", "jns", "jo",
    "jp", "js", "jcxz", "jecxz", "jrcxz", "loop", "loope", "loopne",
];

fn imm_value(ins: &iced_x86::Instruction, kind: OpKind, i: u32) -> u64 {
    let v = ins.immediate(i);
    match kind {
        OpKind::Immediate8to16 | OpKind::Immediate16 => v & 0xffff,
        OpKind::Immediate8to32 | OpKind::Immediate32 => v & 0xffff_ffff,
        _ => v,
    }
}

fn is_float_register(r: Register) -> bool {
    r.is_xmm() || r.is_ymm() || r.is_zmm() || r.is_st()
}

impl InstructionDecoder for IcedDecoder {
    fn decode(&self, bytes: &[u8], vaddr: u64, mode: Mode) -> Result<Instruction, DecodeError> {
        let Some(&first_byte) = bytes.first() else {
            return Err(DecodeError::OutOfImage(vaddr));
        };
        let window = &bytes[..bytes.len().min(15)];
        let mut decoder =
            iced_x86::Decoder::with_ip(mode.bitness(), window, vaddr, iced_x86::DecoderOptions::NONE);
        let ins = decoder.decode();
        if ins.is_invalid() {
            return Err(DecodeError::InvalidOpcode {
                vaddr,
                byte: first_byte,
            });
        }
        let mnemonic = format!("{:?}", ins.mnemonic()).to_lowercase();
        let mut text = String::new();
        FORMATTER.with(|f| f.borrow_mut().format(&ins, &mut text));

        let mut operands = Vec::with_capacity(ins.op_count() as usize);
        let mut const_operands = Vec::new();
        let mut memory = None;
        let mut branch_target = None;
        let mut is_float = false;
        for i in 0..ins.op_count() {
            let kind = ins.op_kind(i);
            let op = match kind {
                OpKind::Register => {
                    let r = ins.op_register(i);
                    is_float |= is_float_register(r);
                    Operand::Reg {
                        reg: map_register(r),
                        width: r.size() as u8,
                    }
                }
                OpKind::NearBranch16 | OpKind::NearBranch32 | OpKind::NearBranch64 => {
                    let t = ins.near_branch_target();
                    branch_target = Some(t);
                    Operand::Branch(t)
                }
                OpKind::Immediate8
                | OpKind::Immediate8_2nd
                | OpKind::Immediate16
                | OpKind::Immediate32
                | OpKind::Immediate64
                | OpKind::Immediate8to16
                | OpKind::Immediate8to32
                | OpKind::Immediate8to64
                | OpKind::Immediate32to64 => {
                    let v = imm_value(&ins, kind, i);
                    const_operands.push(ConstOperand {
                        position: i as u8,
                        value: v,
                        from_memory: false,
                    });
                    Operand::Imm(v)
                }
                OpKind::Memory => {
                    let rip = ins.is_ip_rel_memory_operand();
                    let base = ins.memory_base();
                    let index = ins.memory_index();
                    let disp = if rip {
                        ins.ip_rel_memory_address() as i64
                    } else if mode == Mode::X86 {
                        i64::from(ins.memory_displacement32() as i32)
                    } else {
                        ins.memory_displacement64() as i64
                    };
                    let m = MemExpr {
                        base: (!rip && base != Register::None).then(|| map_register(base)),
                        index: (index != Register::None).then(|| map_register(index)),
                        scale: ins.memory_index_scale() as u8,
                        displacement: disp,
                        rip_relative: rip,
                        size: ins.memory_size().size() as u8,
                    };
                    if disp != 0 {
                        let value = if mode == Mode::X86 {
                            disp as u64 & 0xffff_ffff
                        } else {
                            disp as u64
                        };
                        const_operands.push(ConstOperand {
                            position: i as u8,
                            value,
                            from_memory: true,
                        });
                    }
                    memory.get_or_insert(m);
                    Operand::Mem(m)
                }
                _ => Operand::Other,
            };
            operands.push(op);
        }
        let x87 = mnemonic.starts_with('f')
            && !matches!(mnemonic.as_str(), "fwait" | "femms" | "fxsave" | "fxrstor");
        let packed_int = mnemonic.starts_with('p') || mnemonic.starts_with("vp");
        let is_float = x87 || (is_float && !packed_int);

        let mut out = Instruction {
            vaddr,
            length: ins.len() as u8,
            text,
            mnemonic,
            flow: FlowKind::Fallthrough,
            operands,
            const_operands,
            branch_target,
            memory,
            first_byte,
            is_float,
        };
        out.flow = classify(&out);
        Ok(out)
    }
}

/// Control-flow class from mnemonic and operand kinds.
pub fn classify(ins: &Instruction) -> FlowKind {
    let m = ins.mnemonic.as_str();
    let direct = matches!(ins.operands.first(), Some(Operand::Branch(_)));
    match m {
        "ret" | "retf" | "iret" | "iretd" | "iretq" | "sysret" | "sysretq" | "sysexit"
        | "sysexitq" => FlowKind::Ret,
        "hlt" | "ud0" | "ud1" | "ud2" => FlowKind::Halt,
        "jmp" | "ljmp" | "jmpe" => {
            if direct {
                FlowKind::JumpDirect
            } else {
                FlowKind::JumpIndirect
            }
        }
        "call" | "lcall" => {
            if direct {
                FlowKind::CallDirect
            } else {
                FlowKind::CallIndirect
            }
        }
        _ if JCC.contains(&m) => FlowKind::CondJump,
        _ => FlowKind::Fallthrough,
    }
}

/// Decodes one instruction from raw bytes with the default decoder.
pub fn decode_bytes(bytes: &[u8], vaddr: u64, mode: Mode) -> Result<Instruction, DecodeError> {
    IcedDecoder.decode(bytes, vaddr, mode)
}

/// Decodes one instruction at `vaddr` from any byte source.
pub fn decode_at<S: ByteSource + ?Sized>(
    src: &S,
    vaddr: u64,
    mode: Mode,
) -> Result<Instruction, DecodeError> {
    let bytes = src.bytes_at(vaddr).ok_or(DecodeError::OutOfImage(vaddr))?;
    decode_bytes(bytes, vaddr, mode)
}
