//! A tenant program that reads whatever device and block the packet names.
//! Every attempt outside its own extent traps; the device access log shows
//! no access outside the extent. `cargo run --example isolation`

use hyperion::client::{Client, VirtualTransport};
use hyperion::dpu::{Dpu, DpuConfig, BUILTIN_KV};
use hyperion::ebpf::{assemble, Trap};
use hyperion::nvme::{BlockAddress, DeviceConfig};
use hyperion::wire::{Opcode, Status};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const ALICE: [u8; 32] = [1; 32];
const MALLORY: [u8; 32] = [2; 32];

// packet: device u64, lba u64
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

fn main() {
    let dpu = Dpu::new(DpuConfig {
        tenants: vec![(1, ALICE), (2, MALLORY)],
        devices: DeviceConfig {
            access_log: true,
            ..DeviceConfig::default()
        },
        ..DpuConfig::default()
    })
    .unwrap();
    let mut alice = Client::new(VirtualTransport::new(dpu), 1, Some(ALICE));
    let victim = alice.create_slot(BUILTIN_KV, 64, u32::MAX).unwrap();
    alice.put(victim, 1, &[b's'; 128]).unwrap();

    let mut mallory = Client::new(alice.transport, 2, Some(MALLORY));
    let probe = assemble("probe", PROBE).unwrap();
    let id = mallory.load_program(&probe.encode()).unwrap();
    let slot = mallory.create_slot(id, 8, u32::MAX).unwrap();
    let extent = mallory.transport.dpu.slots().slot(slot).unwrap().extent;
    println!("mallory slot {slot}: {extent:?}");

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut faults, mut other) = (0, 0);
    for i in 0..1000u64 {
        let (device, lba): (u64, u64) = match i % 3 {
            0 => (0, rng.random_range(extent.block_count..1 << 40)),
            1 => (
                rng.random_range(1..8),
                rng.random_range(0..extent.block_count),
            ),
            _ => (0, u64::MAX - rng.random_range(0..1000)),
        };
        let mut packet = device.to_le_bytes().to_vec();
        packet.extend_from_slice(&lba.to_le_bytes());
        let t = mallory.call(Opcode::RawDispatch, slot, packet).unwrap();
        if t.message.status == Status::Trap && t.body.first() == Some(&Trap::IsolationFault.code())
        {
            faults += 1;
        } else {
            other += 1;
        }
    }
    println!("1000 out-of-extent probes: {faults} isolation faults, {other} other outcomes");

    let mut packet = 0u64.to_le_bytes().to_vec();
    packet.extend_from_slice(&3u64.to_le_bytes());
    let t = mallory.call(Opcode::RawDispatch, slot, packet).unwrap();
    println!("in-extent read: {}", t.message.status);

    let t = mallory
        .call(Opcode::Get, victim, 1u64.to_le_bytes().to_vec())
        .unwrap();
    println!("GET on alice's slot as mallory: {}", t.message.status);

    let log = mallory.transport.dpu.slots().nvme().access_log().unwrap();
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
    let mine = log.iter().filter(|a| a.owner == Some(slot)).count();
    println!("access log: {mine} accesses by mallory's slot, {outside} outside its extent");
}
