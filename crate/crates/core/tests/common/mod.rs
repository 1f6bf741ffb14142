//! Test support: a reference interpreter written straight from the
//! instruction encoding, and a random generator of mostly-valid programs.
//!
//! The reference VM shares no code with the crate's interpreter. It works
//! on raw `(opcode, dst, src, off, imm)` tuples and keeps its own memory.

#![allow(dead_code)]

pub mod curated;

use hyperion::ebpf::Insn;
use rand::seq::IndexedRandom;
use rand::Rng;

pub const STACK_BASE: u64 = 0x1000_0000;
pub const PACKET_BASE: u64 = 0x2000_0000;
pub const WINDOW_BASE: u64 = 0x3000_0000;
pub const STACK_LEN: u64 = 512;
pub const WINDOW_LEN: u64 = 4096;
pub const OUTPUT_LIMIT: usize = 8192 - 24;
pub const NOW_NS: u64 = 123_456;

// trap codes
pub const FUEL: u8 = 1;
pub const DIV_ZERO: u8 = 2;
pub const ISOLATION: u8 = 4;
pub const OOB: u8 = 5;
pub const NO_HELPER: u8 = 6;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RefOutcome {
    pub r0: u64,
    pub trap: Option<u8>,
    pub output: Vec<u8>,
    pub steps: u64,
}

pub struct RefVm {
    pub regs: [u64; 11],
    pub stack: Vec<u8>,
    pub packet: Vec<u8>,
    pub window: Vec<u8>,
    pub output: Vec<u8>,
}

pub enum Flow {
    Next(usize),
    Exit(u64),
}

impl RefVm {
    pub fn new(packet: &[u8]) -> Self {
        let mut regs = [0u64; 11];
        regs[1] = PACKET_BASE;
        regs[2] = WINDOW_BASE;
        regs[10] = STACK_BASE + STACK_LEN;
        RefVm {
            regs,
            stack: vec![0; STACK_LEN as usize],
            packet: packet.to_vec(),
            window: vec![0; WINDOW_LEN as usize],
            output: Vec::new(),
        }
    }

    fn mem(&mut self, addr: u64, len: u64) -> Result<&mut [u8], u8> {
        let plen = self.packet.len() as u64;
        let (buf, base, size) = if (STACK_BASE..STACK_BASE + STACK_LEN).contains(&addr) {
            (&mut self.stack, STACK_BASE, STACK_LEN)
        } else if (PACKET_BASE..PACKET_BASE + plen).contains(&addr) {
            (&mut self.packet, PACKET_BASE, plen)
        } else if (WINDOW_BASE..WINDOW_BASE + WINDOW_LEN).contains(&addr) {
            (&mut self.window, WINDOW_BASE, WINDOW_LEN)
        } else {
            return Err(OOB);
        };
        let start = addr - base;
        if start + len > size {
            return Err(OOB);
        }
        Ok(&mut buf[start as usize..(start + len) as usize])
    }

    /// Executes the instruction at `pc`.
    pub fn step(&mut self, code: &[Insn], pc: usize) -> Result<Flow, u8> {
        let Some(i) = code.get(pc) else {
            return Err(OOB);
        };
        let (opc, dst, src) = (i.opc, i.dst as usize, i.src as usize);
        let class = opc & 7;
        let next = Flow::Next(pc + 1);
        match class {
            4 | 7 => {
                let wide = class == 7;
                let op = opc & 0xf0;
                let b = if opc & 8 != 0 {
                    self.regs[src]
                } else if wide {
                    i.imm as i64 as u64
                } else {
                    i.imm as u32 as u64
                };
                let a = self.regs[dst];
                let r = if wide {
                    match op {
                        0x00 => a.wrapping_add(b),
                        0x10 => a.wrapping_sub(b),
                        0x20 => a.wrapping_mul(b),
                        0x30 => {
                            if b == 0 {
                                return Err(DIV_ZERO);
                            } else {
                                a / b
                            }
                        }
                        0x40 => a | b,
                        0x50 => a & b,
                        0x60 => a.wrapping_shl(b as u32 & 63),
                        0x70 => a.wrapping_shr(b as u32 & 63),
                        0x80 => 0u64.wrapping_sub(a),
                        0x90 => {
                            if b == 0 {
                                return Err(DIV_ZERO);
                            } else {
                                a % b
                            }
                        }
                        0xa0 => a ^ b,
                        0xb0 => b,
                        0xc0 => ((a as i64) >> (b & 63)) as u64,
                        _ => panic!("opcode {opc:#x}"),
                    }
                } else {
                    let (x, y) = (a as u32, b as u32);
                    match op {
                        0x00 => x.wrapping_add(y) as u64,
                        0x10 => x.wrapping_sub(y) as u64,
                        0x20 => x.wrapping_mul(y) as u64,
                        0x30 => {
                            if y == 0 {
                                return Err(DIV_ZERO);
                            } else {
                                (x / y) as u64
                            }
                        }
                        0x40 => (x | y) as u64,
                        0x50 => (x & y) as u64,
                        0x60 => (x << (y & 31)) as u64,
                        0x70 => (x >> (y & 31)) as u64,
                        0x80 => 0u32.wrapping_sub(x) as u64,
                        0x90 => {
                            if y == 0 {
                                return Err(DIV_ZERO);
                            } else {
                                (x % y) as u64
                            }
                        }
                        0xa0 => (x ^ y) as u64,
                        0xb0 => y as u64,
                        0xc0 => ((x as i32) >> (y & 31)) as u32 as u64,
                        0xd0 => {
                            let be = opc & 8 != 0;
                            match (be, i.imm) {
                                (false, 16) => a & 0xffff,
                                (false, 32) => a & 0xffff_ffff,
                                (false, _) => a,
                                (true, 16) => (a as u16).swap_bytes() as u64,
                                (true, 32) => (a as u32).swap_bytes() as u64,
                                (true, _) => a.swap_bytes(),
                            }
                        }
                        _ => panic!("opcode {opc:#x}"),
                    }
                };
                self.regs[dst] = r;
                Ok(next)
            }
            0 => {
                let hi = code[pc + 1].imm as u32 as u64;
                self.regs[dst] = hi << 32 | i.imm as u32 as u64;
                Ok(Flow::Next(pc + 2))
            }
            1..=3 => {
                let width = [4u64, 2, 1, 8][((opc >> 3) & 3) as usize];
                let base = if class == 1 {
                    self.regs[src]
                } else {
                    self.regs[dst]
                };
                let addr = base.wrapping_add(i.off as i64 as u64);
                match class {
                    1 => {
                        let m = self.mem(addr, width)?;
                        let mut b = [0u8; 8];
                        b[..width as usize].copy_from_slice(m);
                        self.regs[dst] = u64::from_le_bytes(b);
                    }
                    _ => {
                        let v = if class == 2 {
                            i.imm as i64 as u64
                        } else {
                            self.regs[src]
                        };
                        let m = self.mem(addr, width)?;
                        m.copy_from_slice(&v.to_le_bytes()[..width as usize]);
                    }
                }
                Ok(next)
            }
            5 | 6 => {
                let op = opc & 0xf0;
                match op {
                    0x00 => return Ok(Flow::Next((pc as i64 + 1 + i.off as i64) as usize)),
                    0x90 => return Ok(Flow::Exit(self.regs[0])),
                    0x80 => {
                        let r = self.call(i.imm as u32)?;
                        self.regs[0] = r;
                        for k in 1..=5 {
                            self.regs[k] = 0;
                        }
                        return Ok(next);
                    }
                    _ => {}
                }
                let a = self.regs[dst];
                let b = if opc & 8 != 0 {
                    self.regs[src]
                } else {
                    i.imm as i64 as u64
                };
                let taken = if class == 5 {
                    cond(op, a, b, a as i64, b as i64)
                } else {
                    let (x, y) = (a as u32, b as u32);
                    cond(op, x as u64, y as u64, x as i32 as i64, y as i32 as i64)
                };
                Ok(Flow::Next(if taken {
                    (pc as i64 + 1 + i.off as i64) as usize
                } else {
                    pc + 1
                }))
            }
            _ => panic!("class {class}"),
        }
    }

    fn call(&mut self, id: u32) -> Result<u64, u8> {
        match id {
            1 | 2 => Err(ISOLATION),
            3 => Ok(self.packet.len() as u64),
            4 => {
                let (ptr, len) = (self.regs[1], self.regs[2]);
                if self.output.len() as u64 + len > OUTPUT_LIMIT as u64 {
                    return Ok(1);
                }
                if len > 0 {
                    let bytes = self.mem(ptr, len)?.to_vec();
                    self.output.extend_from_slice(&bytes);
                }
                Ok(0)
            }
            5 => Ok(NOW_NS),
            6 => Ok(2),
            _ => Err(NO_HELPER),
        }
    }
}

fn cond(op: u8, a: u64, b: u64, sa: i64, sb: i64) -> bool {
    match op {
        0x10 => a == b,
        0x20 => a > b,
        0x30 => a >= b,
        0x40 => a & b != 0,
        0x50 => a != b,
        0x60 => sa > sb,
        0x70 => sa >= sb,
        0xa0 => a < b,
        0xb0 => a <= b,
        0xc0 => sa < sb,
        0xd0 => sa <= sb,
        _ => panic!("jump op {op:#x}"),
    }
}

/// Runs `code` from pc 0 with at most `fuel` instruction steps.
pub fn reference_run(code: &[Insn], packet: &[u8], fuel: u64) -> RefOutcome {
    let mut vm = RefVm::new(packet);
    let mut pc = 0;
    let mut steps = 0;
    let (r0, trap) = loop {
        if steps == fuel {
            break (0, Some(FUEL));
        }
        steps += 1;
        match vm.step(code, pc) {
            Ok(Flow::Next(n)) => pc = n,
            Ok(Flow::Exit(r0)) => break (r0, None),
            Err(t) => break (0, Some(t)),
        }
    };
    RefOutcome {
        r0,
        trap,
        output: vm.output,
        steps,
    }
}

// ---- generator ----

fn ins(opc: u8, dst: u8, src: u8, off: i16, imm: i32) -> Insn {
    Insn::new(opc, dst, src, off, imm)
}

const ALU64: u8 = 0x07;
const ALU32: u8 = 0x04;
const X: u8 = 0x08;
const JMP: u8 = 0x05;
const JMP32: u8 = 0x06;
const MOV: u8 = 0xb0;

pub fn mov_imm(dst: u8, imm: i32) -> Insn {
    ins(ALU64 | MOV, dst, 0, 0, imm)
}

pub fn mov_reg(dst: u8, src: u8) -> Insn {
    ins(ALU64 | MOV | X, dst, src, 0, 0)
}

pub fn call(id: i32) -> Insn {
    ins(JMP | 0x80, 0, 0, 0, id)
}

pub fn exit() -> Insn {
    ins(JMP | 0x90, 0, 0, 0, 0)
}

/// Registers the generator writes freely. r6 holds the packet pointer and
/// r7 the packet length throughout.
const SCRATCH: [u8; 6] = [0, 3, 4, 5, 8, 9];
const READABLE: [u8; 7] = [0, 3, 4, 5, 7, 8, 9];
const ALU_OPS: [u8; 12] = [
    0x00, 0x10, 0x20, 0x30, 0x40, 0x50, 0x60, 0x70, 0x90, 0xa0, 0xb0, 0xc0,
];
const JMP_OPS: [u8; 11] = [
    0x10, 0x20, 0x30, 0x40, 0x50, 0x60, 0x70, 0xa0, 0xb0, 0xc0, 0xd0,
];
const SIZES: [(u8, i16); 4] = [(0x00, 4), (0x08, 2), (0x10, 1), (0x18, 8)];

#[derive(Debug, Clone, Copy)]
pub struct GenConfig {
    pub min_items: usize,
    pub max_items: usize,
    /// Allow forward branches and bounded loops.
    pub control_flow: bool,
    /// Allow helper calls.
    pub calls: bool,
    /// Chance that a packet load is guarded incorrectly or not at all.
    pub sloppy: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            min_items: 4,
            max_items: 40,
            control_flow: true,
            calls: true,
            sloppy: 0.0,
        }
    }
}

fn imm<R: Rng>(rng: &mut R) -> i32 {
    match rng.random_range(0..6) {
        0 => 0,
        1 => 1,
        2 => -1,
        3 => rng.random_range(-16..16),
        4 => rng.random_range(0..64),
        _ => rng.random(),
    }
}

enum Item {
    Plain(Vec<Insn>),
    /// Conditional branch over the next `skip` items.
    Branch {
        insn: Insn,
        skip: usize,
    },
}

fn gen_item<R: Rng>(rng: &mut R, cfg: &GenConfig) -> Item {
    let dst = *SCRATCH.choose(rng).unwrap();
    let src = *READABLE.choose(rng).unwrap();
    let choice = rng.random_range(0..if cfg.control_flow { 14 } else { 11 });
    let plain = |v: Vec<Insn>| Item::Plain(v);
    match choice {
        0..=3 => {
            let op = *ALU_OPS.choose(rng).unwrap();
            let class = if rng.random_bool(0.6) { ALU64 } else { ALU32 };
            if rng.random_bool(0.5) {
                plain(vec![ins(class | op | X, dst, src, 0, 0)])
            } else {
                plain(vec![ins(class | op, dst, 0, 0, imm(rng))])
            }
        }
        4 => {
            let class = if rng.random_bool(0.5) { ALU64 } else { ALU32 };
            plain(vec![ins(class | 0x80, dst, 0, 0, 0)])
        }
        5 => {
            let bits = *[16, 32, 64].choose(rng).unwrap();
            let be = if rng.random_bool(0.5) { X } else { 0 };
            plain(vec![ins(ALU32 | 0xd0 | be, dst, 0, 0, bits)])
        }
        6 => {
            let v: u64 = rng.random();
            plain(vec![
                ins(0x18, dst, 0, 0, v as u32 as i32),
                ins(0, 0, 0, 0, (v >> 32) as u32 as i32),
            ])
        }
        7 => {
            // stack store, register or immediate
            let (sz, w) = *SIZES.choose(rng).unwrap();
            let off = -8 * rng.random_range(1..=8) + w * rng.random_range(0..8 / w);
            if rng.random_bool(0.5) {
                plain(vec![ins(0x03 | 0x60 | sz, 10, src, off, 0)])
            } else {
                plain(vec![ins(0x02 | 0x60 | sz, 10, 0, off, imm(rng))])
            }
        }
        8 => {
            let (sz, w) = *SIZES.choose(rng).unwrap();
            let off = -8 * rng.random_range(1..=8) + w * rng.random_range(0..8 / w);
            plain(vec![ins(0x01 | 0x60 | sz, dst, 10, off, 0)])
        }
        9 => {
            // packet load behind a length check
            let (sz, w) = *SIZES.choose(rng).unwrap();
            let off = rng.random_range(0..24i16);
            let need = (off + w) as i32;
            let load = ins(0x01 | 0x60 | sz, dst, 6, off, 0);
            if rng.random_bool(cfg.sloppy) {
                if rng.random_bool(0.5) {
                    plain(vec![load])
                } else {
                    plain(vec![ins(JMP | 0xa0, 7, 0, 1, need - 1), load])
                }
            } else {
                plain(vec![ins(JMP | 0xa0, 7, 0, 1, need), load])
            }
        }
        10 => {
            if !cfg.calls {
                return plain(vec![mov_imm(dst, imm(rng))]);
            }
            let mut v = match rng.random_range(0..3) {
                0 => vec![call(5)],
                1 => vec![call(3)],
                _ => {
                    let len = rng.random_range(0..=16);
                    vec![
                        mov_reg(1, 10),
                        ins(ALU64, 1, 0, 0, -16),
                        mov_imm(2, len),
                        call(4),
                    ]
                }
            };
            // calls clobber r1..r5
            v.extend([
                mov_imm(3, imm(rng)),
                mov_imm(4, imm(rng)),
                mov_imm(5, imm(rng)),
            ]);
            plain(v)
        }
        11 | 12 => {
            let op = *JMP_OPS.choose(rng).unwrap();
            let class = if rng.random_bool(0.7) { JMP } else { JMP32 };
            let lhs = *READABLE.choose(rng).unwrap();
            let insn = if rng.random_bool(0.5) {
                ins(class | op | X, lhs, src, 0, 0)
            } else {
                ins(class | op, lhs, 0, 0, imm(rng))
            };
            Item::Branch {
                insn,
                skip: rng.random_range(0..4),
            }
        }
        _ => {
            // counted loop over r8
            let k = rng.random_range(1..12);
            let body_op = *[0x00, 0x10, 0x40, 0xa0, 0x20].choose(rng).unwrap();
            let acc = *[0u8, 9].choose(rng).unwrap();
            plain(vec![
                mov_imm(8, 0),
                ins(JMP | 0x30, 8, 0, 3, k),
                ins(ALU64 | body_op | X, acc, 8, 0, 0),
                ins(ALU64, 8, 0, 0, 1),
                ins(JMP, 0, 0, -4, 0),
            ])
        }
    }
}

/// A random program that starts by saving the packet pointer in r6 and its
/// length in r7, zeroes the stack, initializes scratch registers, and ends in
/// `exit`.
pub fn random_program<R: Rng>(rng: &mut R, cfg: &GenConfig) -> Vec<Insn> {
    let mut code = vec![mov_reg(6, 1), call(3), mov_reg(7, 0)];
    for &r in &SCRATCH {
        code.push(mov_imm(r, imm(rng)));
    }
    for k in 1..=8 {
        code.push(ins(0x02 | 0x60 | 0x18, 10, 0, -8 * k, 0));
    }
    let n = rng.random_range(cfg.min_items..=cfg.max_items);
    let items: Vec<Item> = (0..n).map(|_| gen_item(rng, cfg)).collect();
    let len = |it: &Item| match it {
        Item::Plain(v) => v.len(),
        Item::Branch { .. } => 1,
    };
    for (idx, it) in items.iter().enumerate() {
        match it {
            Item::Plain(v) => code.extend_from_slice(v),
            Item::Branch { insn, skip } => {
                let end = (idx + 1 + skip).min(items.len());
                let off: usize = items[idx + 1..end].iter().map(len).sum();
                let mut b = *insn;
                b.off = off as i16;
                code.push(b);
            }
        }
    }
    code.push(exit());
    code
}

pub fn random_packet<R: Rng>(rng: &mut R) -> Vec<u8> {
    let n = rng.random_range(0..40);
    (0..n).map(|_| rng.random()).collect()
}
