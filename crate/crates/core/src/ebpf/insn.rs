//! Instruction encoding: the standard 64-bit eBPF layout.
//!
//! ```text
//! byte 0      opcode
//! byte 1      dst (low nibble) | src (high nibble)
//! bytes 2..4  offset, i16 LE
//! bytes 4..8  immediate, i32 LE
//! ```
//!
//! `lddw` occupies two slots; the second has opcode 0 and carries the upper
//! 32 bits of the immediate.

use std::fmt;

use thiserror::Error;

pub const INSN_SIZE: usize = 8;

// Instruction classes.
pub const BPF_LD: u8 = 0x00;
pub const BPF_LDX: u8 = 0x01;
pub const BPF_ST: u8 = 0x02;
pub const BPF_STX: u8 = 0x03;
pub const BPF_ALU: u8 = 0x04;
pub const BPF_JMP: u8 = 0x05;
pub const BPF_JMP32: u8 = 0x06;
pub const BPF_ALU64: u8 = 0x07;

// Sizes and modes for loads/stores.
pub const BPF_W: u8 = 0x00;
pub const BPF_H: u8 = 0x08;
pub const BPF_B: u8 = 0x10;
pub const BPF_DW: u8 = 0x18;
pub const BPF_IMM: u8 = 0x00;
pub const BPF_MEM: u8 = 0x60;

pub const BPF_K: u8 = 0x00;
pub const BPF_X: u8 = 0x08;

pub const LD_DW_IMM: u8 = BPF_LD | BPF_DW | BPF_IMM;

pub const CLASS_MASK: u8 = 0x07;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AluOp {
    Add,
    Sub,
    Mul,
    Div,
    Or,
    And,
    Lsh,
    Rsh,
    Mod,
    Xor,
    Mov,
    Arsh,
}

impl AluOp {
    fn from_code(code: u8) -> Option<AluOp> {
        Some(match code {
            0x00 => AluOp::Add,
            0x10 => AluOp::Sub,
            0x20 => AluOp::Mul,
            0x30 => AluOp::Div,
            0x40 => AluOp::Or,
            0x50 => AluOp::And,
            0x60 => AluOp::Lsh,
            0x70 => AluOp::Rsh,
            0x90 => AluOp::Mod,
            0xa0 => AluOp::Xor,
            0xb0 => AluOp::Mov,
            0xc0 => AluOp::Arsh,
            _ => return None,
        })
    }

    pub fn code(self) -> u8 {
        match self {
            AluOp::Add => 0x00,
            AluOp::Sub => 0x10,
            AluOp::Mul => 0x20,
            AluOp::Div => 0x30,
            AluOp::Or => 0x40,
            AluOp::And => 0x50,
            AluOp::Lsh => 0x60,
            AluOp::Rsh => 0x70,
            AluOp::Mod => 0x90,
            AluOp::Xor => 0xa0,
            AluOp::Mov => 0xb0,
            AluOp::Arsh => 0xc0,
        }
    }

    pub fn mnemonic(self) -> &'static str {
        match self {
            AluOp::Add => "add",
            AluOp::Sub => "sub",
            AluOp::Mul => "mul",
            AluOp::Div => "div",
            AluOp::Or => "or",
            AluOp::And => "and",
            AluOp::Lsh => "lsh",
            AluOp::Rsh => "rsh",
            AluOp::Mod => "mod",
            AluOp::Xor => "xor",
            AluOp::Mov => "mov",
            AluOp::Arsh => "arsh",
        }
    }

    pub const ALL: [AluOp; 12] = [
        AluOp::Add,
        AluOp::Sub,
        AluOp::Mul,
        AluOp::Div,
        AluOp::Or,
        AluOp::And,
        AluOp::Lsh,
        AluOp::Rsh,
        AluOp::Mod,
        AluOp::Xor,
        AluOp::Mov,
        AluOp::Arsh,
    ];
}

const ALU_NEG: u8 = 0x80;
const ALU_END: u8 = 0xd0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Cond {
    Eq,
    Gt,
    Ge,
    Set,
    Ne,
    Sgt,
    Sge,
    Lt,
    Le,
    Slt,
    Sle,
}

impl Cond {
    fn from_code(code: u8) -> Option<Cond> {
        Some(match code {
            0x10 => Cond::Eq,
            0x20 => Cond::Gt,
            0x30 => Cond::Ge,
            0x40 => Cond::Set,
            0x50 => Cond::Ne,
            0x60 => Cond::Sgt,
            0x70 => Cond::Sge,
            0xa0 => Cond::Lt,
            0xb0 => Cond::Le,
            0xc0 => Cond::Slt,
            0xd0 => Cond::Sle,
            _ => return None,
        })
    }

    pub fn code(self) -> u8 {
        match self {
            Cond::Eq => 0x10,
            Cond::Gt => 0x20,
            Cond::Ge => 0x30,
            Cond::Set => 0x40,
            Cond::Ne => 0x50,
            Cond::Sgt => 0x60,
            Cond::Sge => 0x70,
            Cond::Lt => 0xa0,
            Cond::Le => 0xb0,
            Cond::Slt => 0xc0,
            Cond::Sle => 0xd0,
        }
    }

    pub fn mnemonic(self) -> &'static str {
        match self {
            Cond::Eq => "jeq",
            Cond::Gt => "jgt",
            Cond::Ge => "jge",
            Cond::Set => "jset",
            Cond::Ne => "jne",
            Cond::Sgt => "jsgt",
            Cond::Sge => "jsge",
            Cond::Lt => "jlt",
            Cond::Le => "jle",
            Cond::Slt => "jslt",
            Cond::Sle => "jsle",
        }
    }

    pub const ALL: [Cond; 11] = [
        Cond::Eq,
        Cond::Gt,
        Cond::Ge,
        Cond::Set,
        Cond::Ne,
        Cond::Sgt,
        Cond::Sge,
        Cond::Lt,
        Cond::Le,
        Cond::Slt,
        Cond::Sle,
    ];

    /// Evaluates the condition on two 64-bit operands.
    pub fn eval(self, a: u64, b: u64) -> bool {
        match self {
            Cond::Eq => a == b,
            Cond::Gt => a > b,
            Cond::Ge => a >= b,
            Cond::Set => a & b != 0,
            Cond::Ne => a != b,
            Cond::Sgt => (a as i64) > (b as i64),
            Cond::Sge => (a as i64) >= (b as i64),
            Cond::Lt => a < b,
            Cond::Le => a <= b,
            Cond::Slt => (a as i64) < (b as i64),
            Cond::Sle => (a as i64) <= (b as i64),
        }
    }

    pub fn eval32(self, a: u64, b: u64) -> bool {
        let (a, b) = (a as u32, b as u32);
        match self {
            Cond::Sgt => (a as i32) > (b as i32),
            Cond::Sge => (a as i32) >= (b as i32),
            Cond::Slt => (a as i32) < (b as i32),
            Cond::Sle => (a as i32) <= (b as i32),
            other => other.eval(a as u64, b as u64),
        }
    }

    pub fn is_signed(self) -> bool {
        matches!(self, Cond::Sgt | Cond::Sge | Cond::Slt | Cond::Sle)
    }
}

const JMP_JA: u8 = 0x00;
const JMP_CALL: u8 = 0x80;
const JMP_EXIT: u8 = 0x90;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Size {
    B,
    H,
    W,
    DW,
}

impl Size {
    pub fn bytes(self) -> usize {
        match self {
            Size::B => 1,
            Size::H => 2,
            Size::W => 4,
            Size::DW => 8,
        }
    }

    fn from_code(code: u8) -> Size {
        match code & 0x18 {
            BPF_W => Size::W,
            BPF_H => Size::H,
            BPF_B => Size::B,
            _ => Size::DW,
        }
    }

    pub fn code(self) -> u8 {
        match self {
            Size::W => BPF_W,
            Size::H => BPF_H,
            Size::B => BPF_B,
            Size::DW => BPF_DW,
        }
    }

    pub fn suffix(self) -> &'static str {
        match self {
            Size::B => "b",
            Size::H => "h",
            Size::W => "w",
            Size::DW => "dw",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Operand {
    Reg(u8),
    Imm(i32),
}

/// Decoded form of one instruction slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Op {
    Alu {
        wide: bool,
        op: AluOp,
        dst: u8,
        src: Operand,
    },
    Neg {
        wide: bool,
        dst: u8,
    },
    /// Byte-order conversion to little (`to_be == false`) or big endian.
    Endian {
        to_be: bool,
        bits: u32,
        dst: u8,
    },
    LoadImm64 {
        dst: u8,
        imm: u64,
    },
    Load {
        size: Size,
        dst: u8,
        base: u8,
        off: i16,
    },
    Store {
        size: Size,
        base: u8,
        off: i16,
        src: Operand,
    },
    Jump {
        off: i16,
    },
    Branch {
        wide: bool,
        cond: Cond,
        lhs: u8,
        rhs: Operand,
        off: i16,
    },
    Call {
        helper: u32,
    },
    Exit,
    /// Second half of `lddw`; never executed.
    Filler,
}

impl Op {
    pub fn is_terminator(&self) -> bool {
        matches!(self, Op::Jump { .. } | Op::Branch { .. } | Op::Exit)
    }

    /// Static jump target, if any, for an instruction at `pc`.
    pub fn jump_target(&self, pc: usize) -> Option<i64> {
        match *self {
            Op::Jump { off } | Op::Branch { off, .. } => Some(pc as i64 + 1 + off as i64),
            _ => None,
        }
    }
}

/// One raw 8-byte instruction slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Insn {
    pub opc: u8,
    pub dst: u8,
    pub src: u8,
    pub off: i16,
    pub imm: i32,
}

impl Insn {
    pub fn new(opc: u8, dst: u8, src: u8, off: i16, imm: i32) -> Self {
        Insn {
            opc,
            dst,
            src,
            off,
            imm,
        }
    }

    pub fn from_bytes(b: &[u8; INSN_SIZE]) -> Self {
        Insn {
            opc: b[0],
            dst: b[1] & 0x0f,
            src: b[1] >> 4,
            off: i16::from_le_bytes([b[2], b[3]]),
            imm: i32::from_le_bytes([b[4], b[5], b[6], b[7]]),
        }
    }

    pub fn to_bytes(self) -> [u8; INSN_SIZE] {
        let off = self.off.to_le_bytes();
        let imm = self.imm.to_le_bytes();
        [
            self.opc,
            (self.src << 4) | (self.dst & 0x0f),
            off[0],
            off[1],
            imm[0],
            imm[1],
            imm[2],
            imm[3],
        ]
    }

    pub fn class(self) -> u8 {
        self.opc & CLASS_MASK
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeErrorKind {
    MalformedEncoding,
    UnknownOpcode,
    TruncatedWideInstruction,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{kind:?} at byte offset {offset}: {detail}")]
pub struct DecodeError {
    pub kind: DecodeErrorKind,
    pub offset: usize,
    pub detail: String,
}

impl DecodeError {
    fn new(kind: DecodeErrorKind, offset: usize, detail: impl Into<String>) -> Self {
        DecodeError {
            kind,
            offset,
            detail: detail.into(),
        }
    }
}

/// Decodes the slot at `pc`. `next` is the following slot, consumed by
/// `lddw`.
pub fn decode_op(insn: Insn, next: Option<Insn>) -> Result<Op, (DecodeErrorKind, String)> {
    use DecodeErrorKind::*;
    if insn.dst > 10 || insn.src > 10 {
        return Err((
            MalformedEncoding,
            format!("register out of range in {:#04x}", insn.opc),
        ));
    }
    let reg_or_imm = |x: bool| {
        if x {
            Operand::Reg(insn.src)
        } else {
            Operand::Imm(insn.imm)
        }
    };
    let class = insn.class();
    let op = match class {
        BPF_ALU | BPF_ALU64 => {
            let wide = class == BPF_ALU64;
            let code = insn.opc & 0xf0;
            let x = insn.opc & BPF_X != 0;
            match code {
                ALU_NEG => Op::Neg {
                    wide,
                    dst: insn.dst,
                },
                ALU_END => {
                    if wide {
                        return Err((UnknownOpcode, format!("{:#04x}", insn.opc)));
                    }
                    if !matches!(insn.imm, 16 | 32 | 64) {
                        return Err((MalformedEncoding, format!("endian width {}", insn.imm)));
                    }
                    Op::Endian {
                        to_be: x,
                        bits: insn.imm as u32,
                        dst: insn.dst,
                    }
                }
                _ => match AluOp::from_code(code) {
                    Some(op) => Op::Alu {
                        wide,
                        op,
                        dst: insn.dst,
                        src: reg_or_imm(x),
                    },
                    None => return Err((UnknownOpcode, format!("{:#04x}", insn.opc))),
                },
            }
        }
        BPF_JMP | BPF_JMP32 => {
            let wide = class == BPF_JMP;
            let code = insn.opc & 0xf0;
            let x = insn.opc & BPF_X != 0;
            match code {
                JMP_JA if wide && !x => Op::Jump { off: insn.off },
                JMP_CALL if wide && !x => Op::Call {
                    helper: insn.imm as u32,
                },
                JMP_EXIT if wide && !x => Op::Exit,
                _ => match Cond::from_code(code) {
                    Some(cond) => Op::Branch {
                        wide,
                        cond,
                        lhs: insn.dst,
                        rhs: reg_or_imm(x),
                        off: insn.off,
                    },
                    None => return Err((UnknownOpcode, format!("{:#04x}", insn.opc))),
                },
            }
        }
        BPF_LDX if insn.opc & 0xe0 == BPF_MEM => Op::Load {
            size: Size::from_code(insn.opc),
            dst: insn.dst,
            base: insn.src,
            off: insn.off,
        },
        BPF_STX if insn.opc & 0xe0 == BPF_MEM => Op::Store {
            size: Size::from_code(insn.opc),
            base: insn.dst,
            off: insn.off,
            src: Operand::Reg(insn.src),
        },
        BPF_ST if insn.opc & 0xe0 == BPF_MEM => Op::Store {
            size: Size::from_code(insn.opc),
            base: insn.dst,
            off: insn.off,
            src: Operand::Imm(insn.imm),
        },
        BPF_LD if insn.opc == LD_DW_IMM => {
            let hi = match next {
                Some(n) if n.opc == 0 && n.dst == 0 && n.src == 0 && n.off == 0 => n.imm,
                Some(_) => return Err((MalformedEncoding, "bad lddw second slot".into())),
                None => return Err((TruncatedWideInstruction, "lddw without second slot".into())),
            };
            if insn.src != 0 {
                return Err((MalformedEncoding, "lddw pseudo sources unsupported".into()));
            }
            Op::LoadImm64 {
                dst: insn.dst,
                imm: (insn.imm as u32 as u64) | ((hi as u32 as u64) << 32),
            }
        }
        _ => return Err((UnknownOpcode, format!("{:#04x}", insn.opc))),
    };
    Ok(op)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Section {
    #[default]
    Datapath,
    Init,
}

/// A decoded, not yet verified, bytecode image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Program {
    pub name: String,
    pub section: Section,
    insns: Vec<Insn>,
    ops: Vec<Op>,
}

impl Program {
    /// Decodes a little-endian bytecode image.
    pub fn load(image: &[u8]) -> Result<Program, DecodeError> {
        Self::load_named("anonymous", image)
    }

    pub fn load_named(name: &str, image: &[u8]) -> Result<Program, DecodeError> {
        use DecodeErrorKind::*;
        if image.is_empty() {
            return Err(DecodeError::new(MalformedEncoding, 0, "empty image"));
        }
        if !image.len().is_multiple_of(INSN_SIZE) {
            let tail = image.len() - image.len() % INSN_SIZE;
            let kind =
                if image.len() < INSN_SIZE || image[tail..].first().copied() == Some(LD_DW_IMM) {
                    TruncatedWideInstruction
                } else {
                    MalformedEncoding
                };
            return Err(DecodeError::new(
                kind,
                tail,
                format!("length {} is not a multiple of 8", image.len()),
            ));
        }
        let insns: Vec<Insn> = image
            .chunks_exact(INSN_SIZE)
            .map(|c| Insn::from_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        Self::from_insns(name, insns)
    }

    pub fn from_insns(name: &str, insns: Vec<Insn>) -> Result<Program, DecodeError> {
        let mut ops = Vec::with_capacity(insns.len());
        let mut pc = 0;
        while pc < insns.len() {
            let op = decode_op(insns[pc], insns.get(pc + 1).copied())
                .map_err(|(kind, detail)| DecodeError::new(kind, pc * INSN_SIZE, detail))?;
            ops.push(op);
            if matches!(op, Op::LoadImm64 { .. }) {
                ops.push(Op::Filler);
                pc += 2;
            } else {
                pc += 1;
            }
        }
        if insns.is_empty() {
            return Err(DecodeError::new(
                DecodeErrorKind::MalformedEncoding,
                0,
                "empty program",
            ));
        }
        Ok(Program {
            name: name.to_string(),
            section: Section::Datapath,
            insns,
            ops,
        })
    }

    pub fn with_section(mut self, section: Section) -> Self {
        self.section = section;
        self
    }

    pub fn encode(&self) -> Vec<u8> {
        self.insns.iter().flat_map(|i| i.to_bytes()).collect()
    }

    pub fn insns(&self) -> &[Insn] {
        &self.insns
    }

    pub fn ops(&self) -> &[Op] {
        &self.ops
    }

    pub fn len(&self) -> usize {
        self.insns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.insns.is_empty()
    }
}

impl fmt::Display for Program {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&super::asm::disassemble(self))
    }
}

/// Builders for raw instruction slots, mostly for tests and generators.
pub mod build {
    use super::*;

    pub fn alu64(op: AluOp, dst: u8, src: Operand) -> Insn {
        alu(BPF_ALU64, op, dst, src)
    }

    pub fn alu32(op: AluOp, dst: u8, src: Operand) -> Insn {
        alu(BPF_ALU, op, dst, src)
    }

    fn alu(class: u8, op: AluOp, dst: u8, src: Operand) -> Insn {
        match src {
            Operand::Reg(r) => Insn::new(class | op.code() | BPF_X, dst, r, 0, 0),
            Operand::Imm(i) => Insn::new(class | op.code() | BPF_K, dst, 0, 0, i),
        }
    }

    pub fn mov64_imm(dst: u8, imm: i32) -> Insn {
        alu64(AluOp::Mov, dst, Operand::Imm(imm))
    }

    pub fn mov64_reg(dst: u8, src: u8) -> Insn {
        alu64(AluOp::Mov, dst, Operand::Reg(src))
    }

    pub fn neg(wide: bool, dst: u8) -> Insn {
        let class = if wide { BPF_ALU64 } else { BPF_ALU };
        Insn::new(class | ALU_NEG, dst, 0, 0, 0)
    }

    pub fn endian(to_be: bool, bits: i32, dst: u8) -> Insn {
        let x = if to_be { BPF_X } else { BPF_K };
        Insn::new(BPF_ALU | ALU_END | x, dst, 0, 0, bits)
    }

    pub fn lddw(dst: u8, imm: u64) -> [Insn; 2] {
        [
            Insn::new(LD_DW_IMM, dst, 0, 0, imm as u32 as i32),
            Insn::new(0, 0, 0, 0, (imm >> 32) as u32 as i32),
        ]
    }

    pub fn ldx(size: Size, dst: u8, base: u8, off: i16) -> Insn {
        Insn::new(BPF_LDX | BPF_MEM | size.code(), dst, base, off, 0)
    }

    pub fn stx(size: Size, base: u8, off: i16, src: u8) -> Insn {
        Insn::new(BPF_STX | BPF_MEM | size.code(), base, src, off, 0)
    }

    pub fn st(size: Size, base: u8, off: i16, imm: i32) -> Insn {
        Insn::new(BPF_ST | BPF_MEM | size.code(), base, 0, off, imm)
    }

    pub fn ja(off: i16) -> Insn {
        Insn::new(BPF_JMP | JMP_JA, 0, 0, off, 0)
    }

    pub fn branch(wide: bool, cond: Cond, lhs: u8, rhs: Operand, off: i16) -> Insn {
        let class = if wide { BPF_JMP } else { BPF_JMP32 };
        match rhs {
            Operand::Reg(r) => Insn::new(class | cond.code() | BPF_X, lhs, r, off, 0),
            Operand::Imm(i) => Insn::new(class | cond.code() | BPF_K, lhs, 0, off, i),
        }
    }

    pub fn call(helper: u32) -> Insn {
        Insn::new(BPF_JMP | JMP_CALL, 0, 0, 0, helper as i32)
    }

    pub fn exit() -> Insn {
        Insn::new(BPF_JMP | JMP_EXIT, 0, 0, 0, 0)
    }
}
