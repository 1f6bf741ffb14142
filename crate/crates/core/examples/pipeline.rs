//! Verifies the bundled programs and lays each one out as a pipeline,
//! sweeping the lane width. `cargo run --example pipeline`

use hyperion::ebpf::{verify, HelperTable, Limits};
use hyperion::pipeline::{compile, DumpFormat, DEFAULT_SLOT_BUDGET};
use hyperion::programs;

fn main() {
    let helpers = HelperTable::standard();
    let all = [
        ("echo", programs::echo()),
        ("logfilter", programs::logfilter()),
        ("pointer-chase", programs::pointer_chase()),
        ("kv-get", programs::kv_get()),
    ];
    println!(
        "{:<14} {:>6} {:>8} {:>6} {:>6} {:>6} {:>6}",
        "program", "insns", "chain", "w=1", "w=2", "w=4", "w=16"
    );
    for (name, p) in &all {
        let vp = verify(p, &helpers, Limits::default()).unwrap();
        let stages: Vec<usize> = [1, 2, 4, 16]
            .iter()
            .map(|&w| {
                compile(&vp, &helpers, w, DEFAULT_SLOT_BUDGET)
                    .cost
                    .stage_count
            })
            .collect();
        let c = compile(&vp, &helpers, 4, DEFAULT_SLOT_BUDGET);
        println!(
            "{name:<14} {:>6} {:>8} {:>6} {:>6} {:>6} {:>6}",
            vp.ops().len(),
            c.graph.critical_path(),
            stages[0],
            stages[1],
            stages[2],
            stages[3]
        );
    }

    let (_, kv) = &all[3];
    let vp = verify(kv, &helpers, Limits::default()).unwrap();
    let c = compile(&vp, &helpers, 4, DEFAULT_SLOT_BUDGET);
    println!(
        "\nkv-get needs {} logic units against a slot budget of {}: fits = {}",
        c.cost.logic_units, c.cost.budget, c.cost.fits
    );

    let (_, echo) = &all[0];
    let vp = verify(echo, &helpers, Limits::default()).unwrap();
    println!(
        "\n{}",
        compile(&vp, &helpers, 4, DEFAULT_SLOT_BUDGET).dump(&vp, DumpFormat::Dot)
    );
}
