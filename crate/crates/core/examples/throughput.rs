//! Closed-loop GET throughput across 64 slots on 4 devices, compared with
//! the Little's-law bound. `cargo run --release --example throughput [ops]`

use hyperion::client::{
    provision, run_bench, Client, VirtualTransport, WorkloadKind, WorkloadSpec,
};
use hyperion::dpu::{Dpu, DpuConfig};

const TOKEN: [u8; 32] = [9; 32];

fn main() {
    let ops = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(200_000);
    let config = DpuConfig {
        tenants: vec![(1, TOKEN)],
        seed: 1,
        ..DpuConfig::default()
    };
    let latency = config.latency;
    let mut c = Client::new(
        VirtualTransport::new(Dpu::new(config).unwrap()),
        1,
        Some(TOKEN),
    );
    c.rtt_ns = latency.net_rtt_ns;

    let spec = WorkloadSpec {
        kind: WorkloadKind::KvUniform,
        key_space: 4096,
        op_count: ops,
        concurrency: 64,
        slot_count: 64,
        seed: 1,
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
    let report = run_bench(&mut c, &spec, &slots, None).unwrap();

    let mean_io = (latency.nvme_min_ns + latency.nvme_max_ns) as f64 / 2.0;
    let predicted = spec.concurrency as f64 / (height as f64 * mean_io / 1e9);
    println!("{report}");
    println!("tree height  {height}");
    println!(
        "predicted    {predicted:.0} ops/s, measured/predicted {:.3}",
        report.throughput / predicted
    );
}
