//! Programs the verifier turns away, and why. `cargo run --example verifier`

use hyperion::ebpf::{assemble, verify, HelperTable, Limits};

const CASES: &[(&str, &str)] = &[
    ("accepted: bounded loop", "mov r0, 0\nmov r1, 0\nloop:\njge r1, 10, out\nadd r0, r1\nadd r1, 1\nja loop\nout:\nexit\n"),
    ("unbounded loop", "mov r0, 0\nloop:\nadd r0, 1\nja loop\n"),
    ("uninitialized register", "mov r0, r5\nexit\n"),
    ("packet read without length check", "ldxdw r0, [r1+0]\nexit\n"),
    ("stack read past the frame", "ldxdw r0, [r10+8]\nexit\n"),
    ("unknown helper", "call 77\nexit\n"),
    ("falls off the end", "mov r0, 1\n"),
    ("write to the frame pointer", "mov r10, 0\nmov r0, 0\nexit\n"),
];

fn main() {
    let helpers = HelperTable::standard();
    for (what, src) in CASES {
        let outcome = match assemble(what, src) {
            Err(e) => format!("assembler: {e}"),
            Ok(p) => match verify(&p, &helpers, Limits::default()) {
                Ok(vp) => format!(
                    "ok, at most {} instructions executed",
                    vp.max_instructions_executed()
                ),
                Err(e) => e.to_string(),
            },
        };
        println!("{what:<34} {outcome}");
    }
}
