//! Static verifier.
//!
//! Abstract interpretation over register states. Every register holds one
//! of: uninitialized, a scalar interval, the packet length, or a pointer into
//! stack/packet/window with an offset interval. Paths are explored one at a
//! time; loops are unrolled until they exit. At checkpoints (jump targets and
//! branch fall-throughs) a state that is covered by an already explored state
//! is pruned, and a state covered by its own in-progress ancestor is a loop
//! that makes no progress.
//!
//! Packet bounds use a "slack" annotation: a scalar or packet offset with
//! slack `k` satisfies `value + k <= packet_len`. A compare against the
//! packet length establishes slack, so `if i < len { pkt[i] }` verifies.

use std::collections::{BTreeSet, HashMap};

use thiserror::Error;

use super::helpers::{
    ArgKind, HelperTable, Region, RetKind, MAX_PACKET, STACK_SIZE, TENANT_HELPER_BASE, WINDOW_SIZE,
};
use super::insn::{AluOp, Cond, Op, Operand, Program};
use super::interp::{alu_eval, endian_eval, imm_value, neg_eval};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Limits {
    pub max_insns: usize,
    /// Cap on explored checkpoint states.
    pub max_states: usize,
}

impl Default for Limits {
    fn default() -> Self {
        Limits {
            max_insns: 4096,
            max_states: 65536,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum VerifierErrorKind {
    UninitializedRegister,
    UnboundedLoop,
    OutOfBoundsAccess,
    UnknownHelper,
    TooLarge,
    ReadOnlyFramePointer,
    BadJump,
    MissingExit,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{kind:?} at pc {pc}: {detail}")]
pub struct VerifierError {
    pub kind: VerifierErrorKind,
    pub pc: usize,
    pub detail: String,
}

fn fail<T>(
    kind: VerifierErrorKind,
    pc: usize,
    detail: impl Into<String>,
) -> Result<T, VerifierError> {
    Err(VerifierError {
        kind,
        pc,
        detail: detail.into(),
    })
}

/// A program that passed [`verify`].
#[derive(Debug, Clone)]
pub struct VerifiedProgram {
    program: Program,
    bound: u64,
    helper_ids: BTreeSet<u32>,
    stack_usage: usize,
    regions: Vec<u8>,
}

impl VerifiedProgram {
    pub fn program(&self) -> &Program {
        &self.program
    }

    pub fn ops(&self) -> &[Op] {
        self.program.ops()
    }

    /// Upper bound on instructions executed by any run.
    pub fn max_instructions_executed(&self) -> u64 {
        self.bound
    }

    pub fn accessed_helper_ids(&self) -> &BTreeSet<u32> {
        &self.helper_ids
    }

    /// Bytes of stack below the frame pointer the program may touch.
    pub fn stack_usage(&self) -> usize {
        self.stack_usage
    }

    /// Memory regions the load or store at `pc` may touch.
    pub fn regions_at(&self, pc: usize) -> Vec<Region> {
        let mask = self.regions.get(pc).copied().unwrap_or(0);
        [Region::Stack, Region::Packet, Region::Window]
            .into_iter()
            .filter(|r| mask & region_bit(*r) != 0)
            .collect()
    }
}

fn region_bit(r: Region) -> u8 {
    match r {
        Region::Stack => 1,
        Region::Packet => 2,
        Region::Window => 4,
    }
}

/// Pointer offsets beyond this magnitude are treated as unbounded.
const OFF_LIMIT: i64 = 1 << 32;
/// Active ancestors at a pc compared against a new state. Older ones are
/// skipped; the state cap still ends exploration.
const LOOP_WINDOW: usize = 64;
const WILD_LO: i64 = i64::MIN / 4;
const WILD_HI: i64 = i64::MAX / 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum Val {
    Uninit,
    Scalar {
        lo: u64,
        hi: u64,
        slack: Option<u64>,
    },
    PktLen,
    Ptr {
        region: Region,
        lo: i64,
        hi: i64,
        slack: Option<u64>,
    },
}

const UNKNOWN: Val = Val::Scalar {
    lo: 0,
    hi: u64::MAX,
    slack: None,
};

fn scalar(lo: u64, hi: u64) -> Val {
    Val::Scalar {
        lo,
        hi,
        slack: None,
    }
}

fn konst(v: u64) -> Val {
    scalar(v, v)
}

fn ptr(region: Region, lo: i64, hi: i64, slack: Option<u64>) -> Val {
    if lo < -OFF_LIMIT || hi > OFF_LIMIT || lo > hi {
        Val::Ptr {
            region,
            lo: WILD_LO,
            hi: WILD_HI,
            slack: None,
        }
    } else {
        Val::Ptr {
            region,
            lo,
            hi,
            slack,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Sc {
    lo: u64,
    hi: u64,
    slack: Option<u64>,
}

impl Sc {
    fn is_const(&self) -> bool {
        self.lo == self.hi
    }

    fn val(self) -> Val {
        Val::Scalar {
            lo: self.lo,
            hi: self.hi,
            slack: self.slack,
        }
    }
}

fn slack_covers(old: Option<u64>, new: Option<u64>) -> bool {
    match (old, new) {
        (None, _) => true,
        (Some(a), Some(b)) => b >= a,
        (Some(_), None) => false,
    }
}

fn covers(old: Val, new: Val) -> bool {
    match (old, new) {
        (Val::Uninit, _) => true,
        (
            Val::Scalar { lo, hi, slack },
            Val::Scalar {
                lo: l2,
                hi: h2,
                slack: s2,
            },
        ) => lo <= l2 && h2 <= hi && slack_covers(slack, s2),
        (Val::PktLen, Val::PktLen) => true,
        (
            Val::Ptr {
                region,
                lo,
                hi,
                slack,
            },
            Val::Ptr {
                region: r2,
                lo: l2,
                hi: h2,
                slack: s2,
            },
        ) => region == r2 && lo <= l2 && h2 <= hi && slack_covers(slack, s2),
        _ => false,
    }
}

fn join_slack(a: Option<u64>, b: Option<u64>) -> Option<u64> {
    Some(a?.min(b?))
}

fn join(a: Val, b: Val) -> Option<Val> {
    match (a, b) {
        (Val::Uninit, Val::Uninit) => Some(Val::Uninit),
        (
            Val::Scalar { lo, hi, slack },
            Val::Scalar {
                lo: l2,
                hi: h2,
                slack: s2,
            },
        ) => Some(Val::Scalar {
            lo: lo.min(l2),
            hi: hi.max(h2),
            slack: join_slack(slack, s2),
        }),
        (Val::PktLen, Val::PktLen) => Some(Val::PktLen),
        (
            Val::Ptr {
                region,
                lo,
                hi,
                slack,
            },
            Val::Ptr {
                region: r2,
                lo: l2,
                hi: h2,
                slack: s2,
            },
        ) if region == r2 => Some(Val::Ptr {
            region,
            lo: lo.min(l2),
            hi: hi.max(h2),
            slack: join_slack(slack, s2),
        }),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct State {
    regs: [Val; 11],
    /// Known lower bound on the packet length.
    pkt_min: u64,
    /// 8-byte aligned stack slots holding a known value, sorted by slot.
    spills: Vec<(u8, Val)>,
}

impl State {
    fn entry() -> State {
        let mut regs = [Val::Uninit; 11];
        regs[1] = ptr(Region::Packet, 0, 0, Some(0));
        regs[2] = ptr(Region::Window, 0, 0, None);
        regs[10] = ptr(Region::Stack, STACK_SIZE as i64, STACK_SIZE as i64, None);
        State {
            regs,
            pkt_min: 0,
            spills: Vec::new(),
        }
    }

    fn spill(&self, slot: u8) -> Val {
        match self.spills.binary_search_by_key(&slot, |s| s.0) {
            Ok(i) => self.spills[i].1,
            Err(_) => UNKNOWN,
        }
    }

    fn as_scalar(&self, v: Val) -> Option<Sc> {
        match v {
            Val::Scalar { lo, hi, slack } => Some(Sc { lo, hi, slack }),
            Val::PktLen => Some(Sc {
                lo: self.pkt_min,
                hi: MAX_PACKET as u64,
                slack: Some(0),
            }),
            _ => None,
        }
    }

    /// PktLen seen as the scalar range it stands for.
    fn widen_len(&self, v: Val, other: Val) -> Val {
        match (v, other) {
            (Val::PktLen, Val::Scalar { .. }) => self.as_scalar(v).map_or(v, Sc::val),
            _ => v,
        }
    }

    fn covered_by(&self, old: &State, live: u16) -> bool {
        if old.pkt_min > self.pkt_min {
            return false;
        }
        for r in 0..11 {
            if live & (1 << r) != 0
                && !covers(old.regs[r], self.widen_len(self.regs[r], old.regs[r]))
            {
                return false;
            }
        }
        // Both spill lists are sorted; a slot missing on one side is UNKNOWN.
        let (a, b) = (&old.spills, &self.spills);
        let (mut i, mut j) = (0, 0);
        while i < a.len() || j < b.len() {
            let (ov, nv) = match (a.get(i), b.get(j)) {
                (Some(x), Some(y)) if x.0 == y.0 => {
                    i += 1;
                    j += 1;
                    (x.1, y.1)
                }
                (Some(x), y) if y.is_none_or(|y| x.0 < y.0) => {
                    i += 1;
                    (x.1, UNKNOWN)
                }
                (_, Some(y)) => {
                    j += 1;
                    (UNKNOWN, y.1)
                }
                _ => unreachable!(),
            };
            if !covers(ov, nv) {
                return false;
            }
        }
        true
    }

    fn join(&self, other: &State) -> Option<State> {
        let mut regs = [Val::Uninit; 11];
        for (r, slot) in regs.iter_mut().enumerate() {
            let (a, b) = (self.regs[r], other.regs[r]);
            *slot = join(self.widen_len(a, b), other.widen_len(b, a))?;
        }
        let slots: BTreeSet<u8> = self
            .spills
            .iter()
            .chain(other.spills.iter())
            .map(|s| s.0)
            .collect();
        let mut spills = Vec::new();
        for s in slots {
            let v = join(self.spill(s), other.spill(s))?;
            if v != UNKNOWN {
                spills.push((s, v));
            }
        }
        Some(State {
            regs,
            pkt_min: self.pkt_min.min(other.pkt_min),
            spills,
        })
    }

    fn kill_dead(&mut self, live: u16) {
        for r in 0..10 {
            if live & (1 << r) == 0 {
                self.regs[r] = Val::Uninit;
            }
        }
    }

    /// Forgets spilled values overlapping `[lo, hi)`.
    fn clobber_stack(&mut self, lo: i64, hi: i64) {
        self.spills.retain(|&(s, _)| {
            let start = s as i64 * 8;
            start + 8 <= lo || start >= hi
        });
    }

    fn set_spill(&mut self, slot: u8, v: Val) {
        match self.spills.binary_search_by_key(&slot, |s| s.0) {
            Ok(i) => self.spills[i].1 = v,
            Err(i) => self.spills.insert(i, (slot, v)),
        }
        if v == UNKNOWN {
            self.spills.retain(|s| s.0 != slot);
        }
    }
}

fn mask_for(bytes: usize) -> u64 {
    if bytes >= 8 {
        u64::MAX
    } else {
        (1u64 << (bytes * 8)) - 1
    }
}

fn bits_cover(x: u64) -> u64 {
    if x == 0 {
        0
    } else {
        u64::MAX >> x.leading_zeros()
    }
}

/// Interval result of a scalar ALU op on non-constant inputs.
fn range_op(op: AluOp, a: Sc, b: Sc, wide: bool) -> (u64, u64) {
    let full = if wide { u64::MAX } else { u32::MAX as u64 };
    let r = match op {
        AluOp::Add => match (a.lo.checked_add(b.lo), a.hi.checked_add(b.hi)) {
            (Some(lo), Some(hi)) => (lo, hi),
            _ => (0, full),
        },
        AluOp::Sub if a.lo >= b.hi => (a.lo - b.hi, a.hi - b.lo),
        AluOp::Mul => match (a.lo.checked_mul(b.lo), a.hi.checked_mul(b.hi)) {
            (Some(lo), Some(hi)) => (lo, hi),
            _ => (0, full),
        },
        AluOp::Div => (a.lo / b.hi.max(1), a.hi / b.lo.max(1)),
        AluOp::Mod => (0, a.hi.min(b.hi.saturating_sub(1))),
        AluOp::And => (0, a.hi.min(b.hi)),
        AluOp::Or => (a.lo.max(b.lo), bits_cover(a.hi.max(b.hi))),
        AluOp::Xor => (0, bits_cover(a.hi.max(b.hi))),
        AluOp::Lsh if b.is_const() => {
            let s = b.lo & if wide { 63 } else { 31 };
            if a.hi.leading_zeros() as u64 >= s {
                (a.lo << s, a.hi << s)
            } else {
                (0, full)
            }
        }
        AluOp::Rsh if b.is_const() => {
            let s = b.lo & if wide { 63 } else { 31 };
            (a.lo >> s, a.hi >> s)
        }
        AluOp::Rsh => (0, a.hi),
        AluOp::Arsh if a.hi <= full >> 1 => {
            if b.is_const() {
                let s = b.lo & if wide { 63 } else { 31 };
                (a.lo >> s, a.hi >> s)
            } else {
                (0, a.hi)
            }
        }
        AluOp::Mov => (b.lo, b.hi),
        _ => (0, full),
    };
    if r.1 > full {
        (0, full)
    } else {
        r
    }
}

fn slack_after(op: AluOp, wide: bool, a: Sc, b: Sc) -> Option<u64> {
    let k = a.slack?;
    let full = if wide { u64::MAX } else { u32::MAX as u64 };
    if a.hi > full {
        return None;
    }
    match op {
        AluOp::Add if b.is_const() && a.hi.checked_add(b.lo).is_some_and(|v| v <= full) => {
            k.checked_sub(b.lo)
        }
        AluOp::Sub if b.is_const() && a.lo >= b.lo => k.checked_add(b.lo),
        AluOp::And | AluOp::Rsh | AluOp::Mod | AluOp::Div => Some(k),
        AluOp::Arsh if a.hi <= full >> 1 => Some(k),
        _ => None,
    }
}

fn truncate32(s: Sc) -> Sc {
    if s.hi <= u32::MAX as u64 {
        s
    } else {
        Sc {
            lo: 0,
            hi: u32::MAX as u64,
            slack: None,
        }
    }
}

/// Branch condition as applied on one side of a branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Rel {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
    Set,
    NotSet,
}

fn relation(cond: Cond, taken: bool) -> Rel {
    let r = match cond {
        Cond::Eq => Rel::Eq,
        Cond::Ne => Rel::Ne,
        Cond::Lt | Cond::Slt => Rel::Lt,
        Cond::Le | Cond::Sle => Rel::Le,
        Cond::Gt | Cond::Sgt => Rel::Gt,
        Cond::Ge | Cond::Sge => Rel::Ge,
        Cond::Set => Rel::Set,
    };
    if taken {
        r
    } else {
        match r {
            Rel::Eq => Rel::Ne,
            Rel::Ne => Rel::Eq,
            Rel::Lt => Rel::Ge,
            Rel::Le => Rel::Gt,
            Rel::Gt => Rel::Le,
            Rel::Ge => Rel::Lt,
            Rel::Set => Rel::NotSet,
            Rel::NotSet => Rel::Set,
        }
    }
}

/// Narrows `(a, b)` under `a rel b` on unsigned values. `None` if the
/// relation cannot hold.
fn refine(rel: Rel, a: (u64, u64), b: (u64, u64)) -> Option<((u64, u64), (u64, u64))> {
    let (al, ah) = a;
    let (bl, bh) = b;
    match rel {
        Rel::Lt => {
            if al >= bh {
                return None;
            }
            Some(((al, ah.min(bh - 1)), (bl.max(al + 1), bh)))
        }
        Rel::Le => {
            if al > bh {
                return None;
            }
            Some(((al, ah.min(bh)), (bl.max(al), bh)))
        }
        Rel::Gt => refine(Rel::Lt, b, a).map(|(b, a)| (a, b)),
        Rel::Ge => refine(Rel::Le, b, a).map(|(b, a)| (a, b)),
        Rel::Eq => {
            let lo = al.max(bl);
            let hi = ah.min(bh);
            (lo <= hi).then_some(((lo, hi), (lo, hi)))
        }
        Rel::Ne => {
            if al == ah && bl == bh && al == bl {
                return None;
            }
            let shave = |x: (u64, u64), c: (u64, u64)| {
                if c.0 != c.1 || x.0 == x.1 {
                    x
                } else if x.0 == c.0 {
                    (x.0 + 1, x.1)
                } else if x.1 == c.0 {
                    (x.0, x.1 - 1)
                } else {
                    x
                }
            };
            Some((shave(a, b), shave(b, a)))
        }
        Rel::Set => {
            if ah == 0 || bh == 0 || (al == ah && bl == bh && al & bl == 0) {
                return None;
            }
            let a2 = if bl == bh && al == 0 { (1, ah) } else { a };
            Some((a2, b))
        }
        Rel::NotSet => {
            if al == ah && bl == bh && al & bl != 0 {
                return None;
            }
            Some((a, b))
        }
    }
}

enum Outcome {
    Terminal(u64),
    Succ(u64, usize, State),
}

struct Node {
    pc: usize,
    state: State,
    parent: Option<usize>,
    cost: u64,
    pending: usize,
    best: u64,
}

struct Verifier<'a> {
    ops: &'a [Op],
    helpers: &'a HelperTable,
    checkpoint: Vec<bool>,
    live: Vec<u16>,
    regions: Vec<u8>,
    stack_low: i64,
    helper_ids: BTreeSet<u32>,
    in_loop: Vec<bool>,
}

/// Checks `program` against `helpers` and computes its instruction bound.
pub fn verify(
    program: &Program,
    helpers: &HelperTable,
    limits: Limits,
) -> Result<VerifiedProgram, VerifierError> {
    let ops = program.ops();
    if ops.len() > limits.max_insns {
        return fail(
            VerifierErrorKind::TooLarge,
            0,
            format!(
                "{} instructions exceeds limit {}",
                ops.len(),
                limits.max_insns
            ),
        );
    }
    let mut checkpoint = vec![false; ops.len()];
    checkpoint[0] = true;
    let mut back_edges = false;
    let mut in_loop = vec![false; ops.len()];
    for (pc, op) in ops.iter().enumerate() {
        let writes = match *op {
            Op::Alu { dst, .. }
            | Op::Neg { dst, .. }
            | Op::Endian { dst, .. }
            | Op::LoadImm64 { dst, .. } => Some(dst),
            Op::Load { dst, .. } => Some(dst),
            _ => None,
        };
        if writes == Some(10) {
            return fail(VerifierErrorKind::ReadOnlyFramePointer, pc, "write to r10");
        }
        if let Some(t) = op.jump_target(pc) {
            if t < 0 || t as usize >= ops.len() || ops[t as usize] == Op::Filler {
                return fail(VerifierErrorKind::BadJump, pc, format!("jump target {t}"));
            }
            checkpoint[t as usize] = true;
            if t as usize <= pc {
                back_edges = true;
                in_loop[t as usize..=pc].iter_mut().for_each(|x| *x = true);
            }
            if matches!(op, Op::Branch { .. }) && pc + 1 < ops.len() {
                checkpoint[pc + 1] = true;
            }
        }
        if let Op::Call { helper } = *op {
            if helpers.get(helper).is_none() {
                return fail(
                    VerifierErrorKind::UnknownHelper,
                    pc,
                    format!("helper {helper}"),
                );
            }
        }
    }
    let mut v = Verifier {
        ops,
        helpers,
        checkpoint,
        live: liveness(ops, helpers),
        regions: vec![0; ops.len()],
        stack_low: STACK_SIZE as i64,
        helper_ids: BTreeSet::new(),
        in_loop,
    };
    let bound = v.explore(limits, back_edges)?;
    Ok(VerifiedProgram {
        program: program.clone(),
        bound,
        helper_ids: v.helper_ids,
        stack_usage: (STACK_SIZE as i64 - v.stack_low).max(0) as usize,
        regions: v.regions,
    })
}

fn reads_writes(op: &Op, helpers: &HelperTable) -> (u16, u16) {
    let bit = |r: u8| 1u16 << r;
    let opnd = |o: Operand| match o {
        Operand::Reg(r) => bit(r),
        Operand::Imm(_) => 0,
    };
    match *op {
        Op::Alu {
            op: AluOp::Mov,
            dst,
            src,
            ..
        } => (opnd(src), bit(dst)),
        Op::Alu { dst, src, .. } => (bit(dst) | opnd(src), bit(dst)),
        Op::Neg { dst, .. } | Op::Endian { dst, .. } => (bit(dst), bit(dst)),
        Op::LoadImm64 { dst, .. } => (0, bit(dst)),
        Op::Load { dst, base, .. } => (bit(base), bit(dst)),
        Op::Store { base, src, .. } => (bit(base) | opnd(src), 0),
        Op::Branch { lhs, rhs, .. } => (bit(lhs) | opnd(rhs), 0),
        Op::Call { helper } => {
            let n = helpers.signature(helper).map_or(5, |s| s.args.len());
            let reads = (0..n as u8).fold(0, |m, i| m | bit(1 + i));
            (reads, 0b11_1111)
        }
        Op::Exit => (bit(0), 0),
        Op::Jump { .. } | Op::Filler => (0, 0),
    }
}

/// Live-in register sets per pc.
fn liveness(ops: &[Op], helpers: &HelperTable) -> Vec<u16> {
    let n = ops.len();
    let rw: Vec<(u16, u16)> = ops.iter().map(|o| reads_writes(o, helpers)).collect();
    let succs = |pc: usize| -> Vec<usize> {
        let mut s = Vec::with_capacity(2);
        match ops[pc] {
            Op::Exit | Op::Filler => {}
            Op::Jump { .. } => s.push(ops[pc].jump_target(pc).unwrap() as usize),
            Op::Branch { .. } => {
                s.push(ops[pc].jump_target(pc).unwrap() as usize);
                s.push(pc + 1);
            }
            Op::LoadImm64 { .. } => s.push(pc + 2),
            _ => s.push(pc + 1),
        }
        s.retain(|&x| x < n);
        s
    };
    let mut live = vec![0u16; n];
    let mut changed = true;
    while changed {
        changed = false;
        for pc in (0..n).rev() {
            let out = succs(pc).into_iter().fold(0u16, |m, s| m | live[s]);
            let (r, w) = rw[pc];
            let inn = r | (out & !w);
            if inn != live[pc] {
                live[pc] = inn;
                changed = true;
            }
        }
    }
    live
}

impl<'a> Verifier<'a> {
    fn explore(&mut self, limits: Limits, back_edges: bool) -> Result<u64, VerifierError> {
        let mut nodes = vec![Node {
            pc: 0,
            state: State::entry(),
            parent: None,
            cost: 0,
            pending: 0,
            best: 0,
        }];
        let mut active: HashMap<usize, Vec<usize>> = HashMap::new();
        let mut done: HashMap<usize, Vec<usize>> = HashMap::new();
        let mut stack = vec![0usize];
        while let Some(n) = stack.pop() {
            let outcomes = self.run_segment(nodes[n].pc, nodes[n].state.clone())?;
            let mut pending = 0;
            for outcome in outcomes {
                match outcome {
                    Outcome::Terminal(cost) => nodes[n].best = nodes[n].best.max(cost),
                    Outcome::Succ(cost, pc, mut state) => {
                        let live = self.live[pc];
                        state.kill_dead(live);
                        let done_here = done.get(&pc).map(Vec::as_slice).unwrap_or(&[]);
                        if let Some(&d) = done_here
                            .iter()
                            .rev()
                            .find(|&&d| state.covered_by(&nodes[d].state, live))
                        {
                            nodes[n].best = nodes[n].best.max(cost + nodes[d].best);
                            continue;
                        }
                        let ancestors = active.get(&pc).map(Vec::as_slice).unwrap_or(&[]);
                        let recent = &ancestors[ancestors.len().saturating_sub(LOOP_WINDOW)..];
                        let looping =
                            |s: &State| recent.iter().any(|&a| s.covered_by(&nodes[a].state, live));
                        if looping(&state)
                            || (pc == nodes[n].pc && state.covered_by(&nodes[n].state, live))
                        {
                            return fail(
                                VerifierErrorKind::UnboundedLoop,
                                pc,
                                "loop revisits a state without progress",
                            );
                        }
                        // Joining inside a loop would blur its counter and make
                        // the next iteration look like no progress.
                        if !self.in_loop[pc] {
                            if let Some(j) = done_here
                                .iter()
                                .rev()
                                .find_map(|&d| nodes[d].state.join(&state))
                            {
                                if !looping(&j) {
                                    state = j;
                                }
                            }
                        }
                        if nodes.len() >= limits.max_states {
                            let kind = if back_edges {
                                VerifierErrorKind::UnboundedLoop
                            } else {
                                VerifierErrorKind::TooLarge
                            };
                            return fail(
                                kind,
                                pc,
                                format!("more than {} states", limits.max_states),
                            );
                        }
                        nodes.push(Node {
                            pc,
                            state,
                            parent: Some(n),
                            cost,
                            pending: 0,
                            best: 0,
                        });
                        stack.push(nodes.len() - 1);
                        pending += 1;
                    }
                }
            }
            nodes[n].pending = pending;
            active.entry(nodes[n].pc).or_default().push(n);
            let mut cur = n;
            while nodes[cur].pending == 0 {
                let pc = nodes[cur].pc;
                let list = active.get_mut(&pc).expect("active node");
                let pos = list.iter().rposition(|&x| x == cur).expect("active node");
                list.remove(pos);
                done.entry(pc).or_default().push(cur);
                match nodes[cur].parent {
                    Some(p) => {
                        let total = nodes[cur].cost + nodes[cur].best;
                        nodes[p].best = nodes[p].best.max(total);
                        nodes[p].pending -= 1;
                        cur = p;
                    }
                    None => return Ok(nodes[0].best),
                }
            }
        }
        unreachable!("exploration ends when the root completes")
    }

    fn read(&self, st: &State, pc: usize, r: u8) -> Result<Val, VerifierError> {
        match st.regs[r as usize] {
            Val::Uninit => fail(
                VerifierErrorKind::UninitializedRegister,
                pc,
                format!("r{r} read before write"),
            ),
            v => Ok(v),
        }
    }

    fn operand(&self, st: &State, pc: usize, wide: bool, o: Operand) -> Result<Val, VerifierError> {
        match o {
            Operand::Reg(r) => self.read(st, pc, r),
            Operand::Imm(i) => Ok(konst(imm_value(wide, i))),
        }
    }

    /// Checks an access of `size` bytes at `base + off`.
    fn check_access(
        &mut self,
        st: &State,
        pc: usize,
        base: Val,
        off: i64,
        size: u64,
    ) -> Result<(Region, i64, i64), VerifierError> {
        let Val::Ptr {
            region,
            lo,
            hi,
            slack,
        } = base
        else {
            return fail(
                VerifierErrorKind::OutOfBoundsAccess,
                pc,
                "memory access through a non-pointer",
            );
        };
        let start = lo.saturating_add(off);
        let end = hi.saturating_add(off).saturating_add(size as i64);
        let limit = match region {
            Region::Stack => STACK_SIZE as i64,
            Region::Window => WINDOW_SIZE as i64,
            Region::Packet => st.pkt_min as i64,
        };
        let ok = start >= 0
            && (end <= limit
                || (region == Region::Packet
                    && slack.is_some_and(|k| off + size as i64 <= k as i64)));
        if !ok {
            return fail(
                VerifierErrorKind::OutOfBoundsAccess,
                pc,
                format!("{region:?} access [{start}, {end}) outside [0, {limit})"),
            );
        }
        if region == Region::Stack {
            self.stack_low = self.stack_low.min(start);
        }
        if let Some(m) = self.regions.get_mut(pc) {
            *m |= region_bit(region);
        }
        Ok((region, start, end))
    }

    fn alu(&self, st: &State, wide: bool, op: AluOp, d: Val, s: Val) -> Option<Val> {
        if op == AluOp::Mov {
            return Some(match (wide, s) {
                (true, v) => v,
                (false, v) => match st.as_scalar(v) {
                    Some(sc) => truncate32(sc).val(),
                    None => scalar(0, u32::MAX as u64),
                },
            });
        }
        if let Val::Ptr {
            region,
            lo,
            hi,
            slack,
        } = d
        {
            if !wide {
                return Some(scalar(0, u32::MAX as u64));
            }
            return Some(match (op, s) {
                (AluOp::Add | AluOp::Sub, v) if st.as_scalar(v).is_some() => {
                    let b = st.as_scalar(v).unwrap();
                    let sub = op == AluOp::Sub;
                    if b.is_const() {
                        let delta = if sub {
                            (b.lo as i64).wrapping_neg()
                        } else {
                            b.lo as i64
                        };
                        let slack = slack.and_then(|k| {
                            if delta >= 0 {
                                k.checked_sub(delta as u64)
                            } else {
                                k.checked_add(delta.unsigned_abs())
                            }
                        });
                        ptr(
                            region,
                            lo.saturating_add(delta),
                            hi.saturating_add(delta),
                            slack,
                        )
                    } else if b.hi > OFF_LIMIT as u64 {
                        ptr(region, WILD_LO, WILD_HI, None)
                    } else if sub {
                        ptr(region, lo - b.hi as i64, hi - b.lo as i64, slack)
                    } else {
                        let slack = if lo == hi && lo >= 0 {
                            b.slack.and_then(|k| k.checked_sub(lo as u64))
                        } else {
                            None
                        };
                        ptr(region, lo + b.lo as i64, hi + b.hi as i64, slack)
                    }
                }
                (
                    AluOp::Sub,
                    Val::Ptr {
                        region: r2,
                        lo: l2,
                        hi: h2,
                        ..
                    },
                ) if r2 == region && lo == hi && l2 == h2 => konst(lo.wrapping_sub(l2) as u64),
                _ => UNKNOWN,
            });
        }
        if let (Some(_), Val::Ptr { .. }) = (st.as_scalar(d), s) {
            if wide && op == AluOp::Add {
                return self.alu(st, wide, op, s, d);
            }
            return Some(if wide {
                UNKNOWN
            } else {
                scalar(0, u32::MAX as u64)
            });
        }
        let a = st.as_scalar(d)?;
        let b = st.as_scalar(s)?;
        let (a, b) = if wide {
            (a, b)
        } else {
            (truncate32(a), truncate32(b))
        };
        if matches!(op, AluOp::Div | AluOp::Mod) && b.lo == 0 && b.hi == 0 {
            return None;
        }
        let slack = slack_after(op, wide, a, b);
        if a.is_const() && b.is_const() {
            let v = alu_eval(wide, op, a.lo, b.lo).ok()?;
            return Some(Val::Scalar {
                lo: v,
                hi: v,
                slack,
            });
        }
        let (lo, hi) = range_op(op, a, b, wide);
        Some(Val::Scalar { lo, hi, slack })
    }

    /// Feasible successor states of a conditional branch: `[taken, fallthrough]`.
    fn branch(
        &self,
        st: &State,
        pc: usize,
        wide: bool,
        cond: Cond,
        lhs: u8,
        rhs: Operand,
    ) -> Result<[Option<State>; 2], VerifierError> {
        let a = self.read(st, pc, lhs)?;
        let b = self.operand(st, pc, wide, rhs)?;
        let (Some(sa), Some(sb)) = (st.as_scalar(a), st.as_scalar(b)) else {
            return Ok([Some(st.clone()), Some(st.clone())]);
        };
        let full = |s: Sc| {
            if s.hi <= i64::MAX as u64 {
                Some(s)
            } else {
                None
            }
        };
        let fits = match (wide, cond.is_signed()) {
            (true, false) => true,
            (true, true) => full(sa).is_some() && full(sb).is_some(),
            (false, false) => sa.hi <= u32::MAX as u64 && sb.hi <= u32::MAX as u64,
            (false, true) => sa.hi <= i32::MAX as u64 && sb.hi <= i32::MAX as u64,
        };
        let mut out = [None, None];
        for (i, taken) in [true, false].into_iter().enumerate() {
            if !fits {
                if sa.is_const() && sb.is_const() {
                    let t = if wide {
                        cond.eval(sa.lo, sb.lo)
                    } else {
                        cond.eval32(sa.lo, sb.lo)
                    };
                    if t == taken {
                        out[i] = Some(st.clone());
                    }
                } else {
                    out[i] = Some(st.clone());
                }
                continue;
            }
            let rel = relation(cond, taken);
            let Some((ra, rb)) = refine(rel, (sa.lo, sa.hi), (sb.lo, sb.hi)) else {
                continue;
            };
            let mut ns = st.clone();
            let mut na = Sc {
                lo: ra.0,
                hi: ra.1,
                ..sa
            };
            let mut nb = Sc {
                lo: rb.0,
                hi: rb.1,
                ..sb
            };
            let a_len = a == Val::PktLen;
            let b_len = b == Val::PktLen;
            if !a_len && b_len {
                let k = match rel {
                    Rel::Lt => Some(1),
                    Rel::Le | Rel::Eq => Some(0),
                    _ => None,
                };
                if let Some(k) = k {
                    na.slack = Some(na.slack.map_or(k, |s| s.max(k)));
                }
            }
            if a_len && !b_len {
                let k = match rel {
                    Rel::Gt => Some(1),
                    Rel::Ge | Rel::Eq => Some(0),
                    _ => None,
                };
                if let Some(k) = k {
                    nb.slack = Some(nb.slack.map_or(k, |s| s.max(k)));
                }
            }
            for (sc, is_len) in [(na, a_len), (nb, b_len)] {
                if is_len {
                    ns.pkt_min = ns.pkt_min.max(sc.lo);
                } else if let Some(k) = sc.slack {
                    ns.pkt_min = ns.pkt_min.max(sc.lo.saturating_add(k));
                }
            }
            if ns.pkt_min > MAX_PACKET as u64 {
                continue;
            }
            if !a_len {
                ns.regs[lhs as usize] = na.val();
            }
            if let Operand::Reg(r) = rhs {
                if !b_len && r != lhs {
                    ns.regs[r as usize] = nb.val();
                }
            }
            out[i] = Some(ns);
        }
        Ok(out)
    }

    fn run_segment(&mut self, mut pc: usize, mut st: State) -> Result<Vec<Outcome>, VerifierError> {
        let mut cost = 0u64;
        loop {
            let op = self.ops[pc];
            cost += 1;
            let mut next = pc + 1;
            match op {
                Op::Alu { wide, op, dst, src } => {
                    let s = self.operand(&st, pc, wide, src)?;
                    let d = if op == AluOp::Mov {
                        Val::Uninit
                    } else {
                        self.read(&st, pc, dst)?
                    };
                    match self.alu(&st, wide, op, d, s) {
                        Some(v) => st.regs[dst as usize] = v,
                        None => return Ok(vec![Outcome::Terminal(cost)]),
                    }
                }
                Op::Neg { wide, dst } => {
                    let d = self.read(&st, pc, dst)?;
                    st.regs[dst as usize] = match st.as_scalar(d) {
                        Some(s) if s.is_const() => konst(neg_eval(wide, s.lo)),
                        _ => scalar(0, if wide { u64::MAX } else { u32::MAX as u64 }),
                    };
                }
                Op::Endian { to_be, bits, dst } => {
                    let d = self.read(&st, pc, dst)?;
                    let m = mask_for(bits as usize / 8);
                    st.regs[dst as usize] = match st.as_scalar(d) {
                        Some(s) if s.is_const() => konst(endian_eval(to_be, bits, s.lo)),
                        Some(s) if !to_be && s.hi <= m => s.val(),
                        _ => scalar(0, m),
                    };
                }
                Op::LoadImm64 { dst, imm } => {
                    st.regs[dst as usize] = konst(imm);
                    next = pc + 2;
                }
                Op::Load {
                    size,
                    dst,
                    base,
                    off,
                } => {
                    let b = self.read(&st, pc, base)?;
                    let n = size.bytes() as u64;
                    let (region, start, end) = self.check_access(&st, pc, b, off as i64, n)?;
                    st.regs[dst as usize] = if region == Region::Stack
                        && n == 8
                        && start + 8 == end
                        && start % 8 == 0
                    {
                        st.spill((start / 8) as u8)
                    } else {
                        scalar(0, mask_for(n as usize))
                    };
                }
                Op::Store {
                    size,
                    base,
                    off,
                    src,
                } => {
                    let b = self.read(&st, pc, base)?;
                    let v = match src {
                        Operand::Reg(r) => self.read(&st, pc, r)?,
                        Operand::Imm(i) => konst(i as i64 as u64),
                    };
                    let n = size.bytes() as u64;
                    let (region, start, end) = self.check_access(&st, pc, b, off as i64, n)?;
                    if region == Region::Stack {
                        st.clobber_stack(start, end);
                        if n == 8 && start + 8 == end && start % 8 == 0 {
                            st.set_spill((start / 8) as u8, v);
                        }
                    }
                }
                Op::Jump { off } => {
                    let t = (pc as i64 + 1 + off as i64) as usize;
                    return Ok(vec![Outcome::Succ(cost, t, st)]);
                }
                Op::Branch {
                    wide,
                    cond,
                    lhs,
                    rhs,
                    off,
                } => {
                    let t = (pc as i64 + 1 + off as i64) as usize;
                    let [taken, fall] = self.branch(&st, pc, wide, cond, lhs, rhs)?;
                    let mut out = Vec::with_capacity(2);
                    if let Some(s) = taken {
                        out.push(Outcome::Succ(cost, t, s));
                    }
                    if let Some(s) = fall {
                        if pc + 1 >= self.ops.len() {
                            return fail(
                                VerifierErrorKind::MissingExit,
                                pc,
                                "branch falls off the end",
                            );
                        }
                        out.push(Outcome::Succ(cost, pc + 1, s));
                    }
                    return Ok(out);
                }
                Op::Call { helper } => {
                    let sig = self
                        .helpers
                        .signature(helper)
                        .expect("checked up front")
                        .clone();
                    for (i, kind) in sig.args.iter().enumerate() {
                        let r = 1 + i as u8;
                        let v = self.read(&st, pc, r)?;
                        if let ArgKind::ReadPtr { len_arg } = *kind {
                            let len = self.read(&st, pc, 1 + len_arg as u8)?;
                            let Some(len) = st.as_scalar(len) else {
                                return fail(
                                    VerifierErrorKind::OutOfBoundsAccess,
                                    pc,
                                    "length argument is a pointer",
                                );
                            };
                            let within_packet = match (v, len.slack) {
                                (
                                    Val::Ptr {
                                        region: Region::Packet,
                                        lo,
                                        hi,
                                        ..
                                    },
                                    Some(k),
                                ) => lo == hi && lo >= 0 && lo as u64 <= k,
                                _ => false,
                            };
                            if within_packet {
                                if let Some(m) = self.regions.get_mut(pc) {
                                    *m |= region_bit(Region::Packet);
                                }
                            } else if len.hi > 0 {
                                self.check_access(&st, pc, v, 0, len.hi)?;
                            }
                        }
                    }
                    self.helper_ids.insert(helper);
                    st.regs[0] = match sig.ret {
                        RetKind::Scalar => UNKNOWN,
                        RetKind::PacketLen => Val::PktLen,
                    };
                    for r in 1..=5 {
                        st.regs[r] = Val::Uninit;
                    }
                    if helper >= TENANT_HELPER_BASE {
                        st.spills.clear();
                    }
                }
                Op::Exit => {
                    self.read(&st, pc, 0)?;
                    return Ok(vec![Outcome::Terminal(cost)]);
                }
                Op::Filler => unreachable!("fillers are skipped"),
            }
            if next >= self.ops.len() {
                return fail(
                    VerifierErrorKind::MissingExit,
                    pc,
                    "execution falls off the end",
                );
            }
            if self.checkpoint[next] {
                return Ok(vec![Outcome::Succ(cost, next, st)]);
            }
            pc = next;
        }
    }
}
