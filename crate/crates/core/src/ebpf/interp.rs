//! Fuel-metered interpreter for verified programs.

use super::helpers::{
    DatapathEnv, HelperCall, HelperTable, Memory, Trap, FRAME_POINTER, PACKET_BASE, WINDOW_BASE,
};
use super::insn::{AluOp, Op, Operand};
use super::verifier::VerifiedProgram;

/// Result of one execution. `return_value` is r0 at EXIT, or 0 on a trap.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExecOutcome {
    pub return_value: u64,
    pub trap: Option<Trap>,
    pub fuel_used: u64,
}

impl ExecOutcome {
    pub fn ok(&self) -> bool {
        self.trap.is_none()
    }
}

/// Single-use state for one run: memory, helpers, environment and fuel.
pub struct ExecutionContext<'a> {
    pub mem: Memory,
    pub helpers: &'a HelperTable,
    pub env: &'a mut dyn DatapathEnv,
    pub fuel: u64,
}

impl<'a> ExecutionContext<'a> {
    pub fn new(
        packet: Vec<u8>,
        helpers: &'a HelperTable,
        env: &'a mut dyn DatapathEnv,
        fuel: u64,
    ) -> Self {
        ExecutionContext {
            mem: Memory::new(packet),
            helpers,
            env,
            fuel,
        }
    }
}

/// Evaluates a binary ALU op. 32-bit results are zero-extended.
pub fn alu_eval(wide: bool, op: AluOp, a: u64, b: u64) -> Result<u64, Trap> {
    if wide {
        Ok(match op {
            AluOp::Add => a.wrapping_add(b),
            AluOp::Sub => a.wrapping_sub(b),
            AluOp::Mul => a.wrapping_mul(b),
            AluOp::Div => a.checked_div(b).ok_or(Trap::DivideByZero)?,
            AluOp::Mod => a.checked_rem(b).ok_or(Trap::DivideByZero)?,
            AluOp::Or => a | b,
            AluOp::And => a & b,
            AluOp::Xor => a ^ b,
            AluOp::Lsh => a << (b & 63),
            AluOp::Rsh => a >> (b & 63),
            AluOp::Arsh => ((a as i64) >> (b & 63)) as u64,
            AluOp::Mov => b,
        })
    } else {
        let (a, b) = (a as u32, b as u32);
        let r = match op {
            AluOp::Add => a.wrapping_add(b),
            AluOp::Sub => a.wrapping_sub(b),
            AluOp::Mul => a.wrapping_mul(b),
            AluOp::Div => a.checked_div(b).ok_or(Trap::DivideByZero)?,
            AluOp::Mod => a.checked_rem(b).ok_or(Trap::DivideByZero)?,
            AluOp::Or => a | b,
            AluOp::And => a & b,
            AluOp::Xor => a ^ b,
            AluOp::Lsh => a << (b & 31),
            AluOp::Rsh => a >> (b & 31),
            AluOp::Arsh => ((a as i32) >> (b & 31)) as u32,
            AluOp::Mov => b,
        };
        Ok(r as u64)
    }
}

pub fn neg_eval(wide: bool, a: u64) -> u64 {
    if wide {
        a.wrapping_neg()
    } else {
        (a as u32).wrapping_neg() as u64
    }
}

pub fn endian_eval(to_be: bool, bits: u32, a: u64) -> u64 {
    match (to_be, bits) {
        (false, 16) => a as u16 as u64,
        (false, 32) => a as u32 as u64,
        (true, 16) => (a as u16).swap_bytes() as u64,
        (true, 32) => (a as u32).swap_bytes() as u64,
        (true, _) => a.swap_bytes(),
        (false, _) => a,
    }
}

/// Immediate as seen by an operation of the given width.
pub fn imm_value(wide: bool, imm: i32) -> u64 {
    if wide {
        imm as i64 as u64
    } else {
        imm as u32 as u64
    }
}

/// Initial register file: r1 = packet, r2 = window, r10 = frame pointer.
pub fn entry_registers() -> [u64; 11] {
    let mut regs = [0u64; 11];
    regs[1] = PACKET_BASE;
    regs[2] = WINDOW_BASE;
    regs[10] = FRAME_POINTER;
    regs
}

/// Runs `vp` to EXIT or a trap.
pub fn execute(vp: &VerifiedProgram, ctx: &mut ExecutionContext<'_>) -> ExecOutcome {
    run_ops(vp.ops(), ctx)
}

/// Runs decoded ops without the verifier's guarantees. Memory is still
/// bounds-checked, so a malformed program traps rather than misbehaving.
pub fn run_ops(ops: &[Op], ctx: &mut ExecutionContext<'_>) -> ExecOutcome {
    let mut regs = entry_registers();
    let mut pc = 0usize;
    let mut used = 0u64;
    let trap = |t: Trap, used: u64| ExecOutcome {
        return_value: 0,
        trap: Some(t),
        fuel_used: used,
    };
    loop {
        if ctx.fuel == 0 {
            return trap(Trap::FuelExhausted, used);
        }
        let Some(&op) = ops.get(pc) else {
            return trap(Trap::OutOfBounds, used);
        };
        ctx.fuel -= 1;
        used += 1;
        pc += 1;
        match op {
            Op::Alu { wide, op, dst, src } => {
                let b = match src {
                    Operand::Reg(r) => regs[r as usize],
                    Operand::Imm(i) => imm_value(wide, i),
                };
                match alu_eval(wide, op, regs[dst as usize], b) {
                    Ok(v) => regs[dst as usize] = v,
                    Err(t) => return trap(t, used),
                }
            }
            Op::Neg { wide, dst } => regs[dst as usize] = neg_eval(wide, regs[dst as usize]),
            Op::Endian { to_be, bits, dst } => {
                regs[dst as usize] = endian_eval(to_be, bits, regs[dst as usize])
            }
            Op::LoadImm64 { dst, imm } => {
                regs[dst as usize] = imm;
                pc += 1;
            }
            Op::Load {
                size,
                dst,
                base,
                off,
            } => {
                let addr = regs[base as usize].wrapping_add(off as i64 as u64);
                match ctx.mem.load(addr, size.bytes()) {
                    Ok(v) => regs[dst as usize] = v,
                    Err(t) => return trap(t, used),
                }
            }
            Op::Store {
                size,
                base,
                off,
                src,
            } => {
                let addr = regs[base as usize].wrapping_add(off as i64 as u64);
                let v = match src {
                    Operand::Reg(r) => regs[r as usize],
                    Operand::Imm(i) => i as i64 as u64,
                };
                if let Err(t) = ctx.mem.store(addr, size.bytes(), v) {
                    return trap(t, used);
                }
            }
            Op::Jump { off } => pc = (pc as i64 + off as i64) as usize,
            Op::Branch {
                wide,
                cond,
                lhs,
                rhs,
                off,
            } => {
                let a = regs[lhs as usize];
                let b = match rhs {
                    Operand::Reg(r) => regs[r as usize],
                    Operand::Imm(i) => imm_value(wide, i),
                };
                let taken = if wide {
                    cond.eval(a, b)
                } else {
                    cond.eval32(a, b)
                };
                if taken {
                    pc = (pc as i64 + off as i64) as usize;
                }
            }
            Op::Call { helper } => {
                let Some(h) = ctx.helpers.get(helper) else {
                    return trap(Trap::UnknownHelper, used);
                };
                let mut call = HelperCall {
                    args: [regs[1], regs[2], regs[3], regs[4], regs[5]],
                    mem: &mut ctx.mem,
                    env: &mut *ctx.env,
                };
                match (h.func)(&mut call) {
                    Ok(v) => regs[0] = v,
                    Err(t) => return trap(t, used),
                }
                // Caller-saved registers are clobbered.
                for r in &mut regs[1..=5] {
                    *r = 0;
                }
            }
            Op::Exit => {
                return ExecOutcome {
                    return_value: regs[0],
                    trap: None,
                    fuel_used: used,
                }
            }
            Op::Filler => return trap(Trap::OutOfBounds, used),
        }
    }
}
