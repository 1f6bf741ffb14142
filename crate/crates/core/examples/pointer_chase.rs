//! Pointer chasing through a random block ring, once inside the slot
//! program and once hop by hop from the client. Offloading saves a network
//! round trip per hop. `cargo run --example pointer_chase`

use hyperion::client::{
    provision, run_bench, Client, VirtualTransport, WorkloadKind, WorkloadSpec,
};
use hyperion::dpu::{Dpu, DpuConfig};
use hyperion::sim::LatencyModel;

const TOKEN: [u8; 32] = [5; 32];

fn main() {
    println!(
        "{:>6} {:>8} {:>12} {:>12}",
        "rtt µs", "depth", "offload µs", "client µs"
    );
    for rtt_us in [1, 10] {
        for depth in [1, 5, 16] {
            let mut row = Vec::new();
            for offload in [true, false] {
                let latency = LatencyModel {
                    net_rtt_ns: rtt_us * 1000,
                    ..LatencyModel::default()
                };
                let dpu = Dpu::new(DpuConfig {
                    latency,
                    tenants: vec![(1, TOKEN)],
                    ..DpuConfig::default()
                })
                .unwrap();
                let mut c = Client::new(VirtualTransport::new(dpu), 1, Some(TOKEN));
                c.rtt_ns = latency.net_rtt_ns;
                let spec = WorkloadSpec {
                    kind: WorkloadKind::PointerChase,
                    depth,
                    offload,
                    blocks_per_slot: 256,
                    op_count: 500,
                    seed: 3,
                    ..WorkloadSpec::default()
                };
                let slots = provision(&mut c, &spec).unwrap();
                row.push(run_bench(&mut c, &spec, &slots, None).unwrap().mean_us);
            }
            println!("{rtt_us:>6} {depth:>8} {:>12.2} {:>12.2}", row[0], row[1]);
        }
    }
}
