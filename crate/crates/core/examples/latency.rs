//! GET latency against trees of height 1, 2 and 3 under each NVMe latency
//! distribution. Run with `cargo run --example latency`.

use hyperion::client::{value_for, Client, VirtualTransport};
use hyperion::dpu::{Dpu, DpuConfig, BUILTIN_KV};
use hyperion::sim::{Distribution, LatencyModel};

const TOKEN: [u8; 32] = [7; 32];

fn main() {
    for dist in [
        Distribution::FixedMin,
        Distribution::FixedMax,
        Distribution::Uniform,
    ] {
        let dpu = Dpu::new(DpuConfig {
            latency: LatencyModel::with_distribution(dist),
            tenants: vec![(1, TOKEN)],
            seed: 42,
            ..DpuConfig::default()
        })
        .unwrap();
        let mut c = Client::new(VirtualTransport::new(dpu), 1, Some(TOKEN));
        print!("{:<10}", format!("{dist:?}"));
        for keys in [20u64, 800, 5000] {
            let slot = c.create_slot(BUILTIN_KV, 1024, u32::MAX).unwrap();
            let entries = (0..keys).map(|k| (k, value_for(k)));
            c.transport.dpu.slots_mut().preload(slot, entries).unwrap();
            let height = c
                .transport
                .dpu
                .slots()
                .slot(slot)
                .unwrap()
                .tree()
                .unwrap()
                .height();
            let mut total = 0;
            let n = 200;
            for i in 0..n {
                let (v, t) = c.get(slot, i * 7 % keys).unwrap();
                assert!(v.is_some());
                total += t.latency_ns(c.rtt_ns);
            }
            print!(
                "  height {height}: {:>6.2} µs",
                total as f64 / n as f64 / 1000.0
            );
        }
        println!();
    }
}
