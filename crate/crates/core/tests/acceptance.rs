//! Acceptance suite. One test per criterion; `cargo test --test acceptance
//! -- --nocapture --test-threads 1` also prints the measured numbers.

mod common;

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use common::curated::{INVALID, VALID};
use common::*;
use hyperion::client::{
    provision, run_bench, value_for, BenchReport, Client, VirtualTransport, WorkloadKind,
    WorkloadSpec,
};
use hyperion::dpu::{Dpu, DpuConfig, BUILTIN_KV};
use hyperion::ebpf::{
    assemble, execute, verify, DetachedEnv, ExecutionContext, HelperTable, Insn, Limits, Program,
    Trap,
};
use hyperion::kv::{BTree, DeleteOutcome, MemStore, PutOutcome, Value};
use hyperion::nvme::{BlockAddress, DeviceConfig};
use hyperion::pipeline::{
    compile, schedule, DependencyGraph, DEFAULT_LANE_WIDTH, DEFAULT_SLOT_BUDGET,
};
use hyperion::programs;
use hyperion::sim::{Distribution, LatencyModel};
use hyperion::wire::{Message, Opcode, Status, HEX_EXAMPLE};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOKEN: [u8; 32] = [7; 32];

fn report(criterion: u8, ok: bool, detail: String) {
    println!(
        "criterion {criterion}: {} {detail}",
        if ok { "PASS" } else { "FAIL" }
    );
}

// ---- 1: GET latency ----

/// Per-GET end-to-end latencies on a tree preloaded with `keys` sequential keys.
fn get_latencies(keys: u64, seed: u64) -> (u64, Vec<u64>) {
    let dpu = Dpu::new(DpuConfig {
        latency: LatencyModel::with_distribution(Distribution::FixedMax),
        tenants: vec![(1, TOKEN)],
        seed,
        ..DpuConfig::default()
    })
    .unwrap();
    let mut c = Client::new(VirtualTransport::new(dpu), 1, Some(TOKEN));
    c.rtt_ns = 1_000;
    let slot = c.create_slot(BUILTIN_KV, 1024, u32::MAX).unwrap();
    c.transport
        .dpu
        .slots_mut()
        .preload(slot, (0..keys).map(|k| (k, value_for(k))))
        .unwrap();
    let height = c
        .transport
        .dpu
        .slots()
        .slot(slot)
        .unwrap()
        .tree()
        .unwrap()
        .height();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lat = (0..200)
        .map(|_| {
            let key = rng.random_range(0..keys);
            let (v, t) = c.get(slot, key).unwrap();
            assert_eq!(v, Some(value_for(key)));
            t.latency_ns(c.rtt_ns)
        })
        .collect();
    (height, lat)
}

#[test]
fn c1_get_latency_matches_height_formula() {
    let start = Instant::now();
    let (h3, l3) = get_latencies(5_000, 1);
    let (h2, l2) = get_latencies(800, 1);
    let elapsed = start.elapsed();
    let ok =
        h3 == 3 && h2 == 2 && l3.iter().all(|&l| l == 25_000) && l2.iter().all(|&l| l == 17_000);
    report(
        1,
        ok && elapsed < Duration::from_secs(1),
        format!(
            "height {h3}: {}ns, height {h2}: {}ns, {elapsed:.2?}",
            l3[0], l2[0]
        ),
    );
    assert!(ok);
    assert!(elapsed < Duration::from_secs(1), "took {elapsed:?}");
}

// ---- 2: throughput ----

fn throughput_run(ops: u64, seed: u64, trace: &std::path::Path) -> (u64, BenchReport) {
    let config = DpuConfig {
        tenants: vec![(1, TOKEN)],
        seed,
        ..DpuConfig::default()
    };
    assert_eq!(config.devices.device_count, 4);
    assert_eq!(config.devices.queue_depth, 16);
    let mut c = Client::new(
        VirtualTransport::new(Dpu::new(config).unwrap()),
        1,
        Some(TOKEN),
    );
    c.rtt_ns = 1_000;
    let spec = WorkloadSpec {
        kind: WorkloadKind::KvUniform,
        key_space: 4096,
        op_count: ops,
        concurrency: 64,
        slot_count: 64,
        seed,
        ..WorkloadSpec::default()
    };
    let slots = provision(&mut c, &spec).unwrap();
    let height = c
        .transport
        .dpu
        .slots()
        .slot(slots[0])
        .unwrap()
        .tree()
        .unwrap()
        .height();
    let mut r = run_bench(&mut c, &spec, &slots, Some(trace)).unwrap();
    r.trace_path = None;
    (height, r)
}

#[test]
fn c2_throughput_meets_littles_law() {
    let dir = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let (height, r) = throughput_run(1_000_000, 2, &dir.path().join("t.csv"));
    let elapsed = start.elapsed();
    let mean_io_s = (5_000.0 + 8_000.0) / 2.0 / 1e9;
    let predicted = 64.0 / (height as f64 * mean_io_s);
    let ratio = r.throughput / predicted;
    let ok = height == 3
        && r.ops == 1_000_000
        && r.errors == 0
        && r.throughput >= 1.0e6
        && (ratio - 1.0).abs() <= 0.10;
    report(
        2,
        ok && elapsed < Duration::from_secs(30),
        format!(
            "{:.0} ops/s, predicted {predicted:.0}, ratio {ratio:.3}, {elapsed:.1?}",
            r.throughput
        ),
    );
    assert!(ok, "{r}");
    assert!(elapsed < Duration::from_secs(30), "took {elapsed:?}");
}

// ---- 3: pipeline stages ----

fn longest_path(n: usize, edges: &[(usize, usize)]) -> usize {
    let mut succ = vec![Vec::new(); n];
    for &(a, b) in edges {
        succ[a].push(b);
    }
    fn walk(v: usize, succ: &[Vec<usize>], memo: &mut [usize]) -> usize {
        if memo[v] == 0 {
            memo[v] = 1 + succ[v]
                .iter()
                .map(|&s| walk(s, succ, memo))
                .max()
                .unwrap_or(0);
        }
        memo[v]
    }
    let mut memo = vec![0; n];
    (0..n).map(|v| walk(v, &succ, &mut memo)).max().unwrap_or(0)
}

#[test]
fn c3_kv_get_is_deep_and_stage_counts_behave() {
    let helpers = HelperTable::standard();
    let vp = verify(&programs::kv_get(), &helpers, Limits::default()).unwrap();
    let c = compile(&vp, &helpers, DEFAULT_LANE_WIDTH, DEFAULT_SLOT_BUDGET);
    let deep = c.cost.stage_count > 100 && c.cost.logic_units > DEFAULT_SLOT_BUDGET && !c.cost.fits;

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut failures = Vec::new();
    for dag in 0..200 {
        let n = rng.random_range(1..80);
        let p = rng.random_range(0.02..0.4);
        let edges: Vec<(usize, usize)> = (0..n)
            .flat_map(|j| (0..j).map(move |i| (i, j)))
            .filter(|_| rng.random_bool(p))
            .collect();
        let g = DependencyGraph::from_edges(n, edges.iter().copied());
        let longest = longest_path(n, &edges);
        let cp = g.critical_path();
        if cp != longest {
            failures.push(format!("dag {dag}: critical_path {cp}, longest {longest}"));
        }
        if schedule(&g, n).stage_count() != longest {
            failures.push(format!(
                "dag {dag}: unbounded lanes give {}, longest {longest}",
                schedule(&g, n).stage_count()
            ));
        }
        let mut prev = usize::MAX;
        for w in 1..=n.min(24) {
            let s = schedule(&g, w).stage_count();
            if s < longest || s > prev {
                failures.push(format!(
                    "dag {dag}: width {w} gives {s} stages (previous {prev}, longest {longest})"
                ));
            }
            prev = s;
        }
    }
    report(
        3,
        deep && failures.is_empty(),
        format!(
            "kv get: {} stages, {} logic units vs budget {}; {} DAG violations",
            c.cost.stage_count,
            c.cost.logic_units,
            DEFAULT_SLOT_BUDGET,
            failures.len()
        ),
    );
    assert!(deep, "{:?}", c.cost);
    assert!(failures.is_empty(), "{failures:#?}");
}

// ---- 4: VM conformance ----

fn run_main(code: &[Insn], packet: &[u8]) -> Option<(RefOutcome, u64)> {
    let helpers = HelperTable::standard();
    let program = Program::from_insns("gen", code.to_vec()).unwrap();
    let vp = verify(&program, &helpers, Limits::default()).ok()?;
    let bound = vp.max_instructions_executed();
    let mut env = DetachedEnv { now_ns: NOW_NS };
    let mut ctx = ExecutionContext::new(packet.to_vec(), &helpers, &mut env, bound);
    let out = execute(&vp, &mut ctx);
    let outcome = RefOutcome {
        r0: out.return_value,
        trap: out.trap.map(|t| t.code()),
        output: ctx.mem.output.clone(),
        steps: out.fuel_used,
    };
    Some((outcome, bound))
}

#[test]
fn c4_interpreter_matches_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cfg = GenConfig::default();
    let (mut accepted, mut divergent, mut traps) = (0, Vec::new(), 0);
    while accepted < 10_000 {
        let code = random_program(&mut rng, &cfg);
        let packet = random_packet(&mut rng);
        let Some((got, bound)) = run_main(&code, &packet) else {
            continue;
        };
        accepted += 1;
        traps += got.trap.is_some() as u32;
        let want = reference_run(&code, &packet, bound);
        if (got.r0, got.trap) != (want.r0, want.trap) {
            divergent.push(code);
        }
    }
    report(
        4,
        divergent.is_empty(),
        format!(
            "{accepted} programs, {traps} trapped, {} divergent",
            divergent.len()
        ),
    );
    assert!(
        divergent.is_empty(),
        "first divergent program: {:?}",
        divergent[0]
    );
}

// ---- 5: verifier suite ----

#[test]
fn c5_verifier_curated_and_fuzzed() {
    let helpers = HelperTable::standard();
    let rejected = INVALID
        .iter()
        .filter(|(name, kind, src)| matches!(verify(&assemble(name, src).unwrap(), &helpers, Limits::default()), Err(e) if e.kind == *kind))
        .count();
    let accepted = VALID
        .iter()
        .filter(|(name, src)| {
            verify(&assemble(name, src).unwrap(), &helpers, Limits::default()).is_ok()
        })
        .count();

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cfg = GenConfig {
        sloppy: 0.3,
        ..GenConfig::default()
    };
    let (mut runs, mut oob) = (0u32, 0u32);
    while runs < 100_000 {
        let program = Program::from_insns("fuzz", random_program(&mut rng, &cfg)).unwrap();
        let Ok(vp) = verify(&program, &helpers, Limits::default()) else {
            continue;
        };
        for _ in 0..5 {
            let mut env = DetachedEnv { now_ns: NOW_NS };
            let mut ctx = ExecutionContext::new(
                random_packet(&mut rng),
                &helpers,
                &mut env,
                vp.max_instructions_executed(),
            );
            oob += (execute(&vp, &mut ctx).trap == Some(Trap::OutOfBounds)) as u32;
            runs += 1;
        }
    }
    let ok = rejected == 20 && accepted == 20 && oob == 0;
    report(
        5,
        ok,
        format!("rejected {rejected}/20, accepted {accepted}/20, {oob} OOB traps in {runs} runs"),
    );
    assert!(ok);
}

// ---- 6: B+ tree oracle ----

#[derive(Debug, PartialEq)]
struct KvRun {
    outcomes: Vec<u64>,
    checkpoints: usize,
    dirty_checkpoints: usize,
    height_mismatches: usize,
    oracle_mismatches: usize,
    blocks: Vec<(u64, Box<hyperion::nvme::Block>)>,
}

fn kv_oracle_run(seed: u64) -> KvRun {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = MemStore::new(1 << 16);
    let mut tree = BTree::format(&mut store).unwrap();
    let mut oracle = BTreeMap::<u64, Value>::new();
    let mut run = KvRun {
        outcomes: Vec::with_capacity(100_000),
        checkpoints: 0,
        dirty_checkpoints: 0,
        height_mismatches: 0,
        oracle_mismatches: 0,
        blocks: Vec::new(),
    };
    for i in 1..=100_000u32 {
        // drift the key range so the tree both grows and shrinks
        let hi = if i < 60_000 { 20_000 } else { 2_000 };
        let key = rng.random_range(0..hi);
        let r: f64 = rng.random();
        let outcome = if r < 0.4 {
            let (got, trace) = tree.get(&mut store, key).unwrap();
            run.height_mismatches += (trace.blocks_read != tree.height()) as usize;
            run.oracle_mismatches += (got.as_ref() != oracle.get(&key)) as usize;
            got.map_or(0, |v| v[0] as u64 + 1)
        } else if r < 0.7 || i < 60_000 {
            let mut v = [0u8; 128];
            rng.fill(&mut v[..]);
            let replaced = tree.put(&mut store, key, &v).unwrap() == PutOutcome::Replaced;
            run.oracle_mismatches += (replaced != oracle.insert(key, v).is_some()) as usize;
            replaced as u64
        } else {
            let deleted = tree.delete(&mut store, key).unwrap() == DeleteOutcome::Deleted;
            run.oracle_mismatches += (deleted != oracle.remove(&key).is_some()) as usize;
            deleted as u64
        };
        run.outcomes.push(outcome);
        if i % 1_000 == 0 {
            run.checkpoints += 1;
            run.dirty_checkpoints += !tree.check_integrity(&mut store).is_clean() as usize;
            run.oracle_mismatches += (tree.len() != oracle.len() as u64) as usize;
        }
    }
    let entries = tree.entries(&mut store).unwrap();
    run.oracle_mismatches += (entries.into_iter().collect::<BTreeMap<_, _>>() != oracle) as usize;
    run.blocks = store.snapshot();
    run
}

#[test]
fn c6_btree_matches_ordered_map() {
    let run = kv_oracle_run(6);
    let ok = run.oracle_mismatches == 0
        && run.dirty_checkpoints == 0
        && run.height_mismatches == 0
        && run.checkpoints == 100;
    report(
        6,
        ok,
        format!(
            "{} mismatches, {}/{} dirty checkpoints, {} gets with blocks_read != height",
            run.oracle_mismatches, run.dirty_checkpoints, run.checkpoints, run.height_mismatches
        ),
    );
    assert!(ok);
}

// ---- 7: isolation ----

const PROBE: &str = "
    mov r6, r1
    call 3
    jlt r0, 16, short
    ldxdw r1, [r6+0]
    ldxdw r2, [r6+8]
    mov r3, 0
    call 1
    mov r0, 0
    exit
short:
    mov r0, 1
    exit
";

#[test]
fn c7_out_of_extent_access_faults() {
    let dpu = Dpu::new(DpuConfig {
        tenants: vec![(1, TOKEN), (2, [2; 32])],
        devices: DeviceConfig {
            access_log: true,
            ..DeviceConfig::default()
        },
        ..DpuConfig::default()
    })
    .unwrap();
    let mut victim = Client::new(VirtualTransport::new(dpu), 1, Some(TOKEN));
    let kv = victim.create_slot(BUILTIN_KV, 64, u32::MAX).unwrap();
    victim.put(kv, 1, &[b's'; 128]).unwrap();

    let mut c = Client::new(victim.transport, 2, Some([2; 32]));
    let id = c
        .load_program(&assemble("probe", PROBE).unwrap().encode())
        .unwrap();
    let slot = c.create_slot(id, 8, u32::MAX).unwrap();
    let extent = c.transport.dpu.slots().slot(slot).unwrap().extent;

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut faults = 0;
    for i in 0..1_000u64 {
        let (device, lba): (u64, u64) = match i % 4 {
            0 => (0, rng.random_range(extent.block_count..1 << 40)),
            1 => (
                rng.random_range(1..64),
                rng.random_range(0..extent.block_count),
            ),
            2 => (0, u64::MAX - rng.random_range(0..1_000)),
            _ => (rng.random(), rng.random()),
        };
        let mut packet = device.to_le_bytes().to_vec();
        packet.extend_from_slice(&lba.to_le_bytes());
        let t = c.call(Opcode::RawDispatch, slot, packet).unwrap();
        faults += (t.message.status == Status::Trap
            && t.body.first() == Some(&Trap::IsolationFault.code())) as u32;
    }
    let log = c.transport.dpu.slots().nvme().access_log().unwrap();
    let outside = log
        .iter()
        .filter(|a| {
            a.owner == Some(slot)
                && !extent.contains(BlockAddress {
                    device: a.device,
                    lba: a.lba,
                })
        })
        .count();
    let ok = faults == 1_000 && outside == 0;
    report(
        7,
        ok,
        format!("{faults}/1000 isolation faults, {outside} logged accesses outside the extent"),
    );
    assert!(ok);
}

// ---- 8: determinism ----

#[test]
fn c8_same_seed_same_results() {
    let latency = get_latencies(5_000, 8) == get_latencies(5_000, 8)
        && get_latencies(800, 8) == get_latencies(800, 8);

    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    let ra = throughput_run(1_000_000, 8, &a);
    let rb = throughput_run(1_000_000, 8, &b);
    let traces = std::fs::read(&a).unwrap() == std::fs::read(&b).unwrap();
    let bench = ra == rb && traces;

    let kv = kv_oracle_run(8) == kv_oracle_run(8);
    let ok = latency && bench && kv;
    report(
        8,
        ok,
        format!("latency {latency}, throughput report and trace {bench}, b+ tree {kv}"),
    );
    assert!(ok);
}

// ---- 9: wire protocol ----

fn random_message(rng: &mut ChaCha8Rng) -> Message {
    let len = if rng.random_bool(0.05) {
        8192
    } else {
        rng.random_range(0..300)
    };
    let mut payload = vec![0u8; len];
    rng.fill(&mut payload[..]);
    Message {
        opcode: Opcode::from_code(rng.random()),
        tenant: rng.random(),
        slot: rng.random(),
        status: Status::from_code(rng.random()),
        reserved: rng.random(),
        request_id: rng.random(),
        payload,
    }
}

#[test]
fn c9_wire_round_trips_and_hex_example() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut bad = 0;
    for _ in 0..10_000 {
        let m = random_message(&mut rng);
        let bytes = m.encode();
        match Message::decode(&bytes) {
            Ok(d) => bad += (d != m || d.encode() != bytes) as u32,
            Err(_) => bad += 1,
        }
    }
    let ex = Message::decode(&HEX_EXAMPLE).unwrap();
    let documented = ex.opcode == Opcode::Get
        && ex.tenant == 1
        && ex.slot == 2
        && ex.status == Status::Ok
        && ex.reserved == 0
        && ex.request_id == 0x0102_0304_0506_0708
        && ex.payload == 7u64.to_le_bytes()
        && Message::request(
            Opcode::Get,
            1,
            2,
            0x0102_0304_0506_0708,
            7u64.to_le_bytes().to_vec(),
        )
        .encode()
            == HEX_EXAMPLE;
    report(
        9,
        bad == 0 && documented,
        format!("{bad} of 10000 round trips differ, hex example {documented}"),
    );
    assert_eq!(bad, 0);
    assert!(documented, "{ex:?}");
}
