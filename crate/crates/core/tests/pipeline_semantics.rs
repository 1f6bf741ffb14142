//! A pipeline plan must compute what the program computes. Each basic block
//! is run node by node in stage order; the block's jump takes effect after
//! the whole block has run.

mod common;

use std::collections::HashMap;

use common::*;
use hyperion::ebpf::{verify, HelperTable, Insn, Limits, Program};
use hyperion::pipeline::{compile, DependencyGraph, PipelinePlan, DEFAULT_SLOT_BUDGET};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn run_plan(
    code: &[Insn],
    g: &DependencyGraph,
    plan: &PipelinePlan,
    packet: &[u8],
    reverse: bool,
) -> RefOutcome {
    let block_at: HashMap<usize, usize> = g
        .blocks
        .iter()
        .enumerate()
        .map(|(i, b)| (g.pcs[b.start], i))
        .collect();
    let mut vm = RefVm::new(packet);
    let mut pc = 0;
    let mut steps = 0u64;
    loop {
        let block = &g.blocks[block_at[&pc]];
        let mut order: Vec<usize> = block.clone().collect();
        order.sort_by_key(|&n| {
            let s = plan.stage_of[n];
            (s, if reverse { usize::MAX - n } else { n })
        });
        let last = block.end - 1;
        let mut flow = None;
        for n in order {
            steps += 1;
            if steps > 1_000_000 {
                panic!("plan execution does not terminate");
            }
            match vm.step(code, g.pcs[n]) {
                Ok(f) if n == last => flow = Some(f),
                Ok(_) => {}
                Err(t) => {
                    return RefOutcome {
                        r0: 0,
                        trap: Some(t),
                        output: vm.output,
                        steps,
                    }
                }
            }
        }
        match flow.expect("block ran its last node") {
            Flow::Exit(r0) => {
                return RefOutcome {
                    r0,
                    trap: None,
                    output: vm.output,
                    steps,
                }
            }
            Flow::Next(next) => pc = next,
        }
    }
}

fn check(code: Vec<Insn>, packet: &[u8], lanes: usize) -> bool {
    let helpers = HelperTable::standard();
    let program = Program::from_insns("p", code.clone()).unwrap();
    let Ok(vp) = verify(&program, &helpers, Limits::default()) else {
        return false;
    };
    let c = compile(&vp, &helpers, lanes, DEFAULT_SLOT_BUDGET);
    let want = reference_run(&code, packet, vp.max_instructions_executed());
    for reverse in [false, true] {
        let got = run_plan(&code, &c.graph, &c.plan, packet, reverse);
        match want.trap {
            None => {
                assert_eq!(
                    (got.r0, got.trap, &got.output),
                    (want.r0, None, &want.output),
                    "lanes {lanes} reverse {reverse}\n{code:?}"
                );
            }
            Some(_) => assert!(
                got.trap.is_some(),
                "sequential run trapped, plan did not\n{code:?}"
            ),
        }
    }
    true
}

#[test]
fn plans_preserve_program_results() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cfg = GenConfig::default();
    let mut checked = 0;
    while checked < 1_500 {
        let code = random_program(&mut rng, &cfg);
        let packet = random_packet(&mut rng);
        let lanes = [1, 2, 4, 64][checked % 4];
        checked += check(code, &packet, lanes) as usize;
    }
}

#[test]
fn bundled_programs_preserve_results() {
    use hyperion::programs;
    let cases = [
        (programs::echo(), b"hello pipeline".to_vec()),
        (
            programs::logfilter(),
            programs::pad_record(b"sshd: auth-fail for root").to_vec(),
        ),
    ];
    for (p, packet) in cases {
        for lanes in [1, 3, 8] {
            // block helpers fault in the reference, so only the echo path runs to the end
            assert!(check(p.insns().to_vec(), &packet, lanes));
        }
    }
}

proptest! {
    #[test]
    fn straight_line_plans_reorder_safely(seed in any::<u64>(), lanes in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = GenConfig { control_flow: false, min_items: 10, max_items: 60, ..GenConfig::default() };
        let code = random_program(&mut rng, &cfg);
        let packet = random_packet(&mut rng);
        check(code, &packet, lanes);
    }
}
