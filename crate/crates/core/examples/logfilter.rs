//! Streams synthetic auth logs through the logfilter program. Records that
//! contain `auth-fail` are appended to the slot's storage and read back.
//! `cargo run --example logfilter`

use hyperion::client::{log_line, logfilter_demo, Client, VirtualTransport};
use hyperion::dpu::{Dpu, DpuConfig, BUILTIN_LOGFILTER};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOKEN: [u8; 32] = [3; 32];

fn main() {
    let dpu = Dpu::new(DpuConfig {
        tenants: vec![(1, TOKEN)],
        ..DpuConfig::default()
    })
    .unwrap();
    let mut c = Client::new(VirtualTransport::new(dpu), 1, Some(TOKEN));
    let slot = c.create_slot(BUILTIN_LOGFILTER, 64, u32::MAX).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let lines: Vec<String> = (0..500)
        .map(|_| {
            let hit = rng.random_bool(0.3);
            log_line(&mut rng, hit)
        })
        .collect();
    let expected = lines.iter().filter(|l| l.contains("auth-fail")).count();
    for l in &lines[..3] {
        println!("  {l}");
    }

    let start = c.transport.dpu.now();
    let refs: Vec<&[u8]> = lines.iter().map(|l| l.as_bytes()).collect();
    let report = logfilter_demo(&mut c, slot, &refs).unwrap();
    let elapsed = c.transport.dpu.now() - start;
    println!(
        "{} records, {} matched (expected {expected}), {} read back intact",
        report.records, report.matches, report.verified
    );
    println!("virtual time {:.1} µs", elapsed as f64 / 1000.0);
    let stats = c.stats(slot).unwrap();
    println!(
        "slot stats: {} requests, {} traps, busy {} ns",
        stats.requests, stats.traps, stats.busy_ns
    );
}
