//! Pipeline compiler: dependency analysis, per-block list scheduling into
//! fixed-width stages, and a resource cost estimate.
//!
//! Two instructions of a basic block may share a stage only when they
//! satisfy the Bernstein conditions: neither writes what the other reads or
//! writes. Locations are the eleven registers, the three memory regions, and
//! a single "helper world" that orders every helper call. Blocks are laid out
//! one after another; a block's terminator takes effect after its last stage.
//!
//! Weights: ALU 1, memory access or helper call 4, branch/jump/exit 2.

use std::collections::BTreeSet;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use crate::ebpf::asm::format_op;
use crate::ebpf::helpers::{HelperTable, Region};
use crate::ebpf::insn::{AluOp, Op, Operand};
use crate::ebpf::verifier::VerifiedProgram;

pub const DEFAULT_LANE_WIDTH: usize = 4;
pub const DEFAULT_SLOT_BUDGET: u64 = 256;

pub const WEIGHT_ALU: u64 = 1;
pub const WEIGHT_MEMORY: u64 = 4;
pub const WEIGHT_BRANCH: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Loc {
    Reg(u8),
    Mem(Region),
    HelperWorld,
}

impl fmt::Display for Loc {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Loc::Reg(r) => write!(f, "r{r}"),
            Loc::Mem(Region::Stack) => f.write_str("stack"),
            Loc::Mem(Region::Packet) => f.write_str("packet"),
            Loc::Mem(Region::Window) => f.write_str("window"),
            Loc::HelperWorld => f.write_str("helper-world"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EdgeKind {
    Raw,
    War,
    Waw,
    Control,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Edge {
    pub from: usize,
    pub to: usize,
    pub kind: EdgeKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InsnClass {
    Alu,
    Memory,
    Branch,
}

impl InsnClass {
    pub fn weight(self) -> u64 {
        match self {
            InsnClass::Alu => WEIGHT_ALU,
            InsnClass::Memory => WEIGHT_MEMORY,
            InsnClass::Branch => WEIGHT_BRANCH,
        }
    }

    pub fn of(op: &Op) -> InsnClass {
        match op {
            Op::Load { .. } | Op::Store { .. } | Op::Call { .. } => InsnClass::Memory,
            Op::Jump { .. } | Op::Branch { .. } | Op::Exit => InsnClass::Branch,
            _ => InsnClass::Alu,
        }
    }
}

/// Instruction-level dependency graph. Nodes are numbered `0..len()` and
/// carry the program counter they came from; data edges only run forward
/// inside one block.
#[derive(Debug, Clone, Default)]
pub struct DependencyGraph {
    pub pcs: Vec<usize>,
    pub classes: Vec<InsnClass>,
    pub reads: Vec<BTreeSet<Loc>>,
    pub writes: Vec<BTreeSet<Loc>>,
    pub edges: Vec<Edge>,
    /// Node index ranges, one per basic block, in program order.
    pub blocks: Vec<std::ops::Range<usize>>,
}

impl DependencyGraph {
    pub fn len(&self) -> usize {
        self.pcs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pcs.is_empty()
    }

    /// A single block of `n` ALU nodes with the given data edges.
    pub fn from_edges(n: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Self {
        DependencyGraph {
            pcs: (0..n).collect(),
            classes: vec![InsnClass::Alu; n],
            reads: vec![BTreeSet::new(); n],
            writes: vec![BTreeSet::new(); n],
            edges: edges
                .into_iter()
                .map(|(from, to)| Edge {
                    from,
                    to,
                    kind: EdgeKind::Raw,
                })
                .collect(),
            blocks: vec![0..n],
        }
    }

    /// Length in nodes of the longest data-dependency chain.
    pub fn critical_path(&self) -> usize {
        let mut depth = vec![1usize; self.len()];
        let mut data: Vec<&Edge> = self
            .edges
            .iter()
            .filter(|e| e.kind != EdgeKind::Control)
            .collect();
        data.sort_by_key(|e| (e.to, e.from));
        for e in data {
            depth[e.to] = depth[e.to].max(depth[e.from] + 1);
        }
        depth.into_iter().max().unwrap_or(0)
    }
}

/// Read and write sets of one instruction.
pub fn access_sets(
    op: &Op,
    regions: &[Region],
    helpers: &HelperTable,
) -> (BTreeSet<Loc>, BTreeSet<Loc>) {
    let mut r = BTreeSet::new();
    let mut w = BTreeSet::new();
    let opnd = |o: Operand, r: &mut BTreeSet<Loc>| {
        if let Operand::Reg(x) = o {
            r.insert(Loc::Reg(x));
        }
    };
    match *op {
        Op::Alu {
            op: AluOp::Mov,
            dst,
            src,
            ..
        } => {
            opnd(src, &mut r);
            w.insert(Loc::Reg(dst));
        }
        Op::Alu { dst, src, .. } => {
            opnd(src, &mut r);
            r.insert(Loc::Reg(dst));
            w.insert(Loc::Reg(dst));
        }
        Op::Neg { dst, .. } | Op::Endian { dst, .. } => {
            r.insert(Loc::Reg(dst));
            w.insert(Loc::Reg(dst));
        }
        Op::LoadImm64 { dst, .. } => {
            w.insert(Loc::Reg(dst));
        }
        Op::Load { dst, base, .. } => {
            r.insert(Loc::Reg(base));
            r.extend(regions.iter().map(|&g| Loc::Mem(g)));
            w.insert(Loc::Reg(dst));
        }
        Op::Store { base, src, .. } => {
            r.insert(Loc::Reg(base));
            opnd(src, &mut r);
            w.extend(regions.iter().map(|&g| Loc::Mem(g)));
        }
        Op::Branch { lhs, rhs, .. } => {
            r.insert(Loc::Reg(lhs));
            opnd(rhs, &mut r);
        }
        Op::Call { helper } => {
            let n = helpers.signature(helper).map_or(5, |s| s.args.len());
            r.extend((1..=n as u8).map(Loc::Reg));
            w.extend((0..=5).map(Loc::Reg));
            for g in [Region::Stack, Region::Packet, Region::Window] {
                r.insert(Loc::Mem(g));
                w.insert(Loc::Mem(g));
            }
            r.insert(Loc::HelperWorld);
            w.insert(Loc::HelperWorld);
        }
        Op::Exit => {
            r.insert(Loc::Reg(0));
        }
        Op::Jump { .. } | Op::Filler => {}
    }
    (r, w)
}

/// Builds the dependency graph of a verified program.
pub fn analyze_dependencies(vp: &VerifiedProgram, helpers: &HelperTable) -> DependencyGraph {
    let ops = vp.ops();
    let mut leader = vec![false; ops.len()];
    leader[0] = true;
    for (pc, op) in ops.iter().enumerate() {
        if let Some(t) = op.jump_target(pc) {
            leader[t as usize] = true;
        }
        if op.is_terminator() && pc + 1 < ops.len() {
            leader[pc + 1] = true;
        }
    }
    let mut g = DependencyGraph::default();
    let mut node_of_pc = vec![usize::MAX; ops.len()];
    let mut block_start = 0;
    for (pc, op) in ops.iter().enumerate() {
        if *op == Op::Filler {
            continue;
        }
        if leader[pc] && !g.pcs.is_empty() {
            g.blocks.push(block_start..g.pcs.len());
            block_start = g.pcs.len();
        }
        node_of_pc[pc] = g.pcs.len();
        let (r, w) = access_sets(op, &vp.regions_at(pc), helpers);
        g.pcs.push(pc);
        g.classes.push(InsnClass::of(op));
        g.reads.push(r);
        g.writes.push(w);
    }
    g.blocks.push(block_start..g.pcs.len());

    for block in &g.blocks {
        for j in block.clone() {
            for i in block.start..j {
                let kinds = [
                    (EdgeKind::Raw, !g.writes[i].is_disjoint(&g.reads[j])),
                    (EdgeKind::War, !g.reads[i].is_disjoint(&g.writes[j])),
                    (EdgeKind::Waw, !g.writes[i].is_disjoint(&g.writes[j])),
                ];
                for (kind, hit) in kinds {
                    if hit {
                        g.edges.push(Edge {
                            from: i,
                            to: j,
                            kind,
                        });
                    }
                }
            }
        }
    }
    // Control edges: last node of each block to the first node of each successor.
    for block in &g.blocks {
        let last = block.end - 1;
        let pc = g.pcs[last];
        let mut succ = Vec::new();
        match ops[pc] {
            Op::Exit => {}
            Op::Jump { .. } => succ.push(ops[pc].jump_target(pc).unwrap() as usize),
            Op::Branch { .. } => {
                succ.push(ops[pc].jump_target(pc).unwrap() as usize);
                succ.push(pc + 1);
            }
            _ => succ.push(g.pcs.get(last + 1).copied().unwrap_or(usize::MAX)),
        }
        for s in succ {
            if let Some(&to) = node_of_pc.get(s) {
                if to != usize::MAX {
                    g.edges.push(Edge {
                        from: last,
                        to,
                        kind: EdgeKind::Control,
                    });
                }
            }
        }
    }
    g
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PipelinePlan {
    pub lane_width: usize,
    /// Node indices per stage.
    pub stages: Vec<Vec<usize>>,
    /// Stage of each node.
    pub stage_of: Vec<usize>,
}

impl PipelinePlan {
    pub fn stage_count(&self) -> usize {
        self.stages.len()
    }
}

/// Greedy list schedule: blocks in order, each node placed in the earliest
/// stage after all its predecessors that still has a free lane.
pub fn schedule(g: &DependencyGraph, lane_width: usize) -> PipelinePlan {
    let lane_width = lane_width.max(1);
    let mut preds: Vec<Vec<usize>> = vec![Vec::new(); g.len()];
    for e in &g.edges {
        if e.kind != EdgeKind::Control && e.from < e.to {
            preds[e.to].push(e.from);
        }
    }
    let mut stages: Vec<Vec<usize>> = Vec::new();
    let mut stage_of = vec![0usize; g.len()];
    for block in &g.blocks {
        let base = stages.len();
        for n in block.clone() {
            let earliest = preds[n]
                .iter()
                .map(|&p| stage_of[p] + 1)
                .max()
                .unwrap_or(base)
                .max(base);
            let mut s = earliest;
            while s < stages.len() && stages[s].len() >= lane_width {
                s += 1;
            }
            if s == stages.len() {
                stages.push(Vec::new());
            }
            stages[s].push(n);
            stage_of[n] = s;
        }
    }
    PipelinePlan {
        lane_width,
        stages,
        stage_of,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResourceCost {
    pub stage_count: usize,
    pub logic_units: u64,
    pub budget: u64,
    pub fits: bool,
}

pub fn cost(g: &DependencyGraph, plan: &PipelinePlan, budget: u64) -> ResourceCost {
    let logic_units = plan
        .stages
        .iter()
        .flatten()
        .map(|&n| g.classes[n].weight())
        .sum();
    ResourceCost {
        stage_count: plan.stage_count(),
        logic_units,
        budget,
        fits: logic_units <= budget,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DumpFormat {
    Dot,
    Text,
}

impl FromStr for DumpFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "dot" => Ok(DumpFormat::Dot),
            "text" => Ok(DumpFormat::Text),
            other => Err(format!(
                "unknown dump format `{other}` (expected dot or text)"
            )),
        }
    }
}

/// Everything the compiler produces for one program.
#[derive(Debug, Clone)]
pub struct Compiled {
    pub graph: DependencyGraph,
    pub plan: PipelinePlan,
    pub cost: ResourceCost,
}

pub fn compile(
    vp: &VerifiedProgram,
    helpers: &HelperTable,
    lane_width: usize,
    budget: u64,
) -> Compiled {
    let graph = analyze_dependencies(vp, helpers);
    let plan = schedule(&graph, lane_width);
    let cost = cost(&graph, &plan, budget);
    Compiled { graph, plan, cost }
}

impl Compiled {
    fn label(&self, vp: &VerifiedProgram, n: usize) -> String {
        let pc = self.graph.pcs[n];
        format_op(&vp.ops()[pc]).unwrap_or_default()
    }

    pub fn dump(&self, vp: &VerifiedProgram, format: DumpFormat) -> String {
        match format {
            DumpFormat::Text => self.dump_text(vp),
            DumpFormat::Dot => self.dump_dot(vp),
        }
    }

    fn dump_text(&self, vp: &VerifiedProgram) -> String {
        let mut out = String::new();
        let c = &self.cost;
        let _ = writeln!(
            out,
            "stages {}  logic_units {}  budget {}  fits {}  lanes {}",
            c.stage_count, c.logic_units, c.budget, c.fits, self.plan.lane_width
        );
        for (s, nodes) in self.plan.stages.iter().enumerate() {
            let cells: Vec<String> = nodes
                .iter()
                .map(|&n| format!("{:>4}: {}", self.graph.pcs[n], self.label(vp, n)))
                .collect();
            let _ = writeln!(out, "stage {s:>4} | {}", cells.join(" | "));
        }
        out
    }

    fn dump_dot(&self, vp: &VerifiedProgram) -> String {
        let mut out = String::from(
            "digraph pipeline {\n  rankdir=TB;\n  node [shape=box, fontname=monospace];\n",
        );
        for (s, nodes) in self.plan.stages.iter().enumerate() {
            let _ = writeln!(out, "  subgraph cluster_s{s} {{\n    label=\"stage {s}\";");
            for &n in nodes {
                let _ = writeln!(
                    out,
                    "    n{n} [label=\"{}: {}\"];",
                    self.graph.pcs[n],
                    self.label(vp, n).replace('"', "\\\"")
                );
            }
            out.push_str("  }\n");
        }
        for e in &self.graph.edges {
            let style = match e.kind {
                EdgeKind::Raw => "color=black",
                EdgeKind::War => "color=blue, style=dashed",
                EdgeKind::Waw => "color=red, style=dashed",
                EdgeKind::Control => "color=gray, style=dotted",
            };
            let _ = writeln!(
                out,
                "  n{} -> n{} [{style}, label=\"{:?}\"];",
                e.from, e.to, e.kind
            );
        }
        out.push_str("}\n");
        out
    }
}
