//! Drives one emulated NVMe device past its queue depth with the event
//! queue. Rejected commands are retried at the next completion.
//! `cargo run --example nvme_queue`

use std::collections::VecDeque;

use hyperion::nvme::{BlockAddress, Command, DeviceConfig, NvmeError, NvmeSubsystem};
use hyperion::sim::{EventQueue, LatencyModel, SimTime};

enum Ev {
    Poll,
}

fn main() {
    let config = DeviceConfig {
        device_count: 1,
        capacity_blocks: 1024,
        queue_depth: 16,
        ..DeviceConfig::default()
    };
    let mut nvme = NvmeSubsystem::new(config, LatencyModel::default(), 7).unwrap();
    let mut clock: EventQueue<Ev> = EventQueue::new();
    let mut waiting: VecDeque<u64> = (0..40).collect();
    let (mut rejected, mut latencies) = (0, Vec::new());

    clock.schedule(0, Ev::Poll).unwrap();
    while let Some(fired) = clock.pop() {
        let Ev::Poll = fired.payload;
        let now = fired.at;
        for c in nvme.completions(0, now).unwrap() {
            latencies.push(c.completion_time.nanos());
        }
        while let Some(&tag) = waiting.front() {
            let cmd = Command::read(BlockAddress::new(0, tag), tag, now);
            match nvme.submit(0, cmd) {
                Ok(_) => {
                    waiting.pop_front();
                }
                Err(NvmeError::QueueFull { .. }) => {
                    rejected += 1;
                    break;
                }
                Err(e) => panic!("{e}"),
            }
        }
        if let Some(next) = nvme.next_completion(0) {
            clock.schedule_at(next, Ev::Poll).unwrap();
        }
    }

    let stats = nvme.stats(0).unwrap();
    println!("40 reads, queue depth 16: {rejected} queue-full rejections");
    println!(
        "submitted {}  completed {}  queue_full {}",
        stats.submitted, stats.completed, stats.queue_full
    );
    println!(
        "last completion at {:.2} µs",
        SimTime(*latencies.iter().max().unwrap()).as_micros_f64()
    );
}
