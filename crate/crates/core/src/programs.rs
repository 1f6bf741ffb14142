//! Bundled datapath programs, written in the text assembly of
//! [`crate::ebpf::asm`].
//!
//! | program | packet | result |
//! |---------|--------|--------|
//! | echo | any bytes | emits the packet, r0 = 0 |
//! | kv-get | key u64 | emits the 128-byte value; r0: 0 found, 1 absent, 2 corrupt node, 3 deeper than 8 levels, 4 short packet |
//! | pointer-chase | `0, start u64, depth u64` follows `depth` block links; `1, lba u64, next u64` links `lba` to `next` | chase: r0 = final block number; link: r0 = 0; r0 = 4 on a bad packet |
//! | logfilter | one 128-byte record | r0 = 1 if it matched and was persisted, 0 otherwise |
//!
//! The logfilter also accepts `0xFE` (reset the match count) and
//! `0xFF, index u64` (emit persisted record `index`; r0 = 1 if there is no
//! such record). Records are persisted 32 per block starting at block 1;
//! block 0 holds the match count in its first 8 bytes.

use crate::ebpf::{assemble, Program};
use crate::kv::layout::{
    HEADER_SIZE, INTERNAL_CHILDREN_OFF, KIND_INTERNAL, KIND_LEAF, LEAF_CAPACITY, LEAF_KEYS_OFF,
    LEAF_VALUES_OFF, MAX_HEIGHT, SB_ROOT_OFF,
};
use crate::kv::VALUE_SIZE;

pub const RECORD_SIZE: usize = 128;
pub const RECORDS_PER_BLOCK: u64 = 32;
pub const LOGFILTER_PATTERN: &[u8; 9] = b"auth-fail";
pub const LOGFILTER_READBACK: u8 = 0xFF;
pub const LOGFILTER_RESET: u8 = 0xFE;
pub const MAX_CHASE_DEPTH: u64 = 16;

pub const KV_GET_FOUND: u64 = 0;
pub const KV_GET_ABSENT: u64 = 1;
pub const KV_GET_CORRUPT: u64 = 2;
pub const KV_GET_TOO_DEEP: u64 = 3;
pub const BAD_PACKET: u64 = 4;

fn build(name: &str, src: &str) -> Program {
    assemble(name, src).unwrap_or_else(|e| panic!("bundled program {name}: {e}"))
}

pub const ECHO_SRC: &str = "\
    mov r6, r1
    call 3
    mov r2, r0
    mov r1, r6
    call 4
    mov r0, 0
    exit
";

pub fn echo() -> Program {
    build("echo", ECHO_SRC)
}

fn read_block(lba_reg: &str) -> String {
    format!("mov r1, 0\nmov r2, {lba_reg}\nmov r3, 0\ncall 1\n")
}

/// Appends a branch-light search leaving in r9 the number of keys `<= r7`
/// among the first r8 keys at window offset `keys_off`.
fn step_search(src: &mut String, tag: &str, keys_off: usize, steps: &[u64]) {
    src.push_str("mov r9, 0\n");
    for (i, step) in steps.iter().enumerate() {
        // key[j - 1] lives at keys_off + 8j - 8 for j = r9 + step
        src.push_str(&format!(
            "mov r3, r9\nadd r3, {step}\njgt r3, r8, {tag}_{i}\nmov r4, r3\nlsh r4, 3\nadd r4, r6\n\
             ldxdw r5, [r4+{}]\njgt r5, r7, {tag}_{i}\nmov r9, r3\n{tag}_{i}:\n",
            keys_off - 8
        ));
    }
}

/// Root-to-leaf descent, unrolled for every level up to the maximum height.
pub fn kv_get_source() -> String {
    let mut src =
        String::from("mov r6, r2\nmov r8, r1\ncall 3\njlt r0, 8, short\nldxdw r7, [r8+0]\n");
    src += &read_block("0");
    src += &format!("ldxdw r8, [r6+{SB_ROOT_OFF}]\n");
    for level in 0..MAX_HEIGHT {
        src += &read_block("r8");
        src += &format!(
            "ldxb r3, [r6+0]\nldxh r8, [r6+2]\njeq r3, {KIND_LEAF}, leaf\njne r3, {KIND_INTERNAL}, corrupt\n"
        );
        step_search(
            &mut src,
            &format!("l{level}"),
            HEADER_SIZE,
            &[128, 64, 32, 16, 8, 4, 2, 1],
        );
        src += &format!("lsh r9, 3\nadd r9, r6\nldxdw r8, [r9+{INTERNAL_CHILDREN_OFF}]\n");
    }
    src += &format!("mov r0, {KV_GET_TOO_DEEP}\nexit\n");
    src += "leaf:\n";
    step_search(&mut src, "leaf", LEAF_KEYS_OFF, &[16, 8, 4, 2, 1]);
    src += &format!(
        "jeq r9, 0, absent\njgt r9, {LEAF_CAPACITY}, corrupt\n\
         mov r4, r9\nlsh r4, 3\nadd r4, r6\nldxdw r5, [r4+{}]\njne r5, r7, absent\n\
         mov r1, r9\nlsh r1, 7\nadd r1, r6\nadd r1, {}\nmov r2, {VALUE_SIZE}\ncall 4\n\
         mov r0, {KV_GET_FOUND}\nexit\n",
        LEAF_KEYS_OFF - 8,
        LEAF_VALUES_OFF - VALUE_SIZE,
    );
    src += &format!(
        "absent:\nmov r0, {KV_GET_ABSENT}\nexit\ncorrupt:\nmov r0, {KV_GET_CORRUPT}\nexit\nshort:\nmov r0, {BAD_PACKET}\nexit\n"
    );
    src
}

/// Bounded B+ tree lookup over the slot's extent.
pub fn kv_get() -> Program {
    build("kv-get", &kv_get_source())
}

pub fn pointer_chase_source() -> String {
    format!(
        "\
    mov r6, r1
    mov r7, r2
    call 3
    jlt r0, 24, bad
    ldxdw r3, [r6+0]
    ldxdw r8, [r6+8]
    jeq r3, 1, link
    jne r3, 0, bad
    ldxdw r9, [r6+16]
    jgt r9, {MAX_CHASE_DEPTH}, bad
    mov r6, 0
chase:
    jge r6, r9, done
{}    ldxdw r8, [r7+0]
    add r6, 1
    ja chase
done:
    mov r0, r8
    exit
link:
    ldxdw r3, [r6+16]
    stxdw [r7+0], r3
    mov r1, 0
    mov r2, r8
    mov r3, 0
    call 2
    mov r0, 0
    exit
bad:
    mov r0, {BAD_PACKET}
    exit
",
        read_block("r8")
    )
}

/// Follows a chain of block references, one device read per hop.
pub fn pointer_chase() -> Program {
    build("pointer-chase", &pointer_chase_source())
}

pub fn logfilter_source() -> String {
    let pattern = u64::from_le_bytes(LOGFILTER_PATTERN[..8].try_into().unwrap());
    let last = LOGFILTER_PATTERN[8];
    let last_start = RECORD_SIZE - LOGFILTER_PATTERN.len();
    let mut copy = String::new();
    for k in 0..RECORD_SIZE / 8 {
        copy += &format!("ldxdw r3, [r6+{}]\nstxdw [r4+{}], r3\n", 8 * k, 8 * k);
    }
    format!(
        "\
    mov r6, r1
    mov r7, r2
    call 3
    mov r9, r0
    jlt r9, 1, bad
    ldxb r3, [r6+0]
    jeq r3, {LOGFILTER_READBACK}, readback
    jeq r3, {LOGFILTER_RESET}, reset
    jlt r9, {RECORD_SIZE}, bad
    lddw r9, {pattern:#x}
    mov r8, 0
scan:
    jgt r8, {last_start}, nomatch
    mov r4, r6
    add r4, r8
    ldxdw r3, [r4+0]
    jne r3, r9, next
    ldxb r3, [r4+8]
    jeq r3, {last}, matched
next:
    add r8, 1
    ja scan
nomatch:
    mov r0, 0
    exit
matched:
{read0}    ldxdw r8, [r7+0]
    mov r9, r8
    rsh r9, 5
    add r9, 1
{read9}    mov r4, r8
    and r4, {mask}
    lsh r4, 7
    add r4, r7
{copy}    mov r1, 0
    mov r2, r9
    mov r3, 0
    call 2
{read0}    add r8, 1
    stxdw [r7+0], r8
    mov r1, 0
    mov r2, 0
    mov r3, 0
    call 2
    mov r0, 1
    exit
readback:
    jlt r9, 9, bad
    ldxdw r8, [r6+1]
{read0}    ldxdw r3, [r7+0]
    jge r8, r3, absent
    mov r9, r8
    rsh r9, 5
    add r9, 1
{read9}    mov r1, r8
    and r1, {mask}
    lsh r1, 7
    add r1, r7
    mov r2, {RECORD_SIZE}
    call 4
    mov r0, 0
    exit
absent:
    mov r0, 1
    exit
reset:
{read0}    stdw [r7+0], 0
    mov r1, 0
    mov r2, 0
    mov r3, 0
    call 2
    mov r0, 0
    exit
bad:
    mov r0, {BAD_PACKET}
    exit
",
        read0 = read_block("0"),
        read9 = read_block("r9"),
        mask = RECORDS_PER_BLOCK - 1,
    )
}

/// Persists 128-byte log records containing `auth-fail`.
pub fn logfilter() -> Program {
    build("logfilter", &logfilter_source())
}

/// NUL-pads (or truncates) a log line to one record.
pub fn pad_record(line: &[u8]) -> [u8; RECORD_SIZE] {
    let mut r = [0u8; RECORD_SIZE];
    let n = line.len().min(RECORD_SIZE);
    r[..n].copy_from_slice(&line[..n]);
    r
}

/// Block and byte offset of persisted record `index`.
pub fn record_location(index: u64) -> (u64, usize) {
    (
        1 + index / RECORDS_PER_BLOCK,
        (index % RECORDS_PER_BLOCK) as usize * RECORD_SIZE,
    )
}

/// Packet for a pointer-chase request.
pub fn chase_packet(start: u64, depth: u64) -> Vec<u8> {
    [0, start, depth]
        .iter()
        .flat_map(|x| x.to_le_bytes())
        .collect()
}

/// Packet that links block `lba` to `next`.
pub fn link_packet(lba: u64, next: u64) -> Vec<u8> {
    [1, lba, next]
        .iter()
        .flat_map(|x| x.to_le_bytes())
        .collect()
}

pub fn readback_packet(index: u64) -> Vec<u8> {
    let mut p = vec![LOGFILTER_READBACK];
    p.extend_from_slice(&index.to_le_bytes());
    p
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ebpf::{verify, HelperTable, Limits};
    use crate::pipeline::{compile, DEFAULT_LANE_WIDTH, DEFAULT_SLOT_BUDGET};

    #[test]
    fn all_bundled_programs_verify() {
        let h = HelperTable::standard();
        for p in [echo(), kv_get(), pointer_chase(), logfilter()] {
            let vp =
                verify(&p, &h, Limits::default()).unwrap_or_else(|e| panic!("{}: {e}", p.name));
            assert!(vp.max_instructions_executed() > 0);
        }
    }

    #[test]
    fn kv_get_is_a_deep_pipeline() {
        let h = HelperTable::standard();
        let vp = verify(&kv_get(), &h, Limits::default()).unwrap();
        let c = compile(&vp, &h, DEFAULT_LANE_WIDTH, DEFAULT_SLOT_BUDGET);
        assert!(c.cost.stage_count > 100, "{} stages", c.cost.stage_count);
        assert!(c.cost.logic_units > DEFAULT_SLOT_BUDGET);
        assert!(!c.cost.fits);
    }

    #[test]
    fn record_locations() {
        assert_eq!(record_location(0), (1, 0));
        assert_eq!(record_location(31), (1, 31 * 128));
        assert_eq!(record_location(32), (2, 0));
        assert_eq!(pad_record(b"ab")[..3], [b'a', b'b', 0]);
    }

    use crate::nvme::{Backing, DeviceConfig, NvmeSubsystem};
    use crate::sim::{Distribution, LatencyModel, SimTime};
    use crate::slot::{Engine, SlotConfig, SlotManager, ADMIN_TENANT};
    use crate::wire::{payload, Message, Opcode, Status};
    use std::sync::Arc;

    const TOKEN: [u8; 32] = [3; 32];

    fn manager() -> SlotManager {
        let cfg = DeviceConfig {
            device_count: 1,
            capacity_blocks: 4096,
            queue_depth: 16,
            backing: Backing::Memory,
            access_log: false,
        };
        let nvme = NvmeSubsystem::new(
            cfg,
            LatencyModel::with_distribution(Distribution::FixedMax),
            3,
        )
        .unwrap();
        let mut m = SlotManager::new(
            nvme,
            Arc::new(HelperTable::standard()),
            SlotConfig::default(),
        );
        m.add_tenant(1, TOKEN);
        m
    }

    fn dispatch(m: &mut SlotManager, slot: u16, packet: Vec<u8>, at: u64) -> (Message, u64) {
        let req = Message::request(Opcode::RawDispatch, 1, slot, 1, packet);
        let ex = m.run(&req, SimTime(at));
        (ex.response, ex.end.nanos() - at)
    }

    #[test]
    fn kv_get_program_agrees_with_native_lookup() {
        let mut m = manager();
        let p = m.install(ADMIN_TENANT, kv_get(), Engine::KvTree).unwrap();
        let s = m.create_slot(1, &TOKEN, p, 2048, u64::MAX).unwrap();
        let entries: Vec<(u64, [u8; 128])> = (0..5000u64)
            .map(|k| (k * 3, [(k % 251) as u8; 128]))
            .collect();
        m.preload(s, entries).unwrap();
        let height = m.slot(s).unwrap().tree().unwrap().height();
        assert_eq!(height, 3);
        let mut t = 0;
        for key in [0u64, 1, 3, 4, 2997, 4500, 8997, 8998, 9000, u64::MAX] {
            t += 1_000_000;
            let native = m
                .run(
                    &Message::request(Opcode::Get, 1, s, 1, payload::key(key)),
                    SimTime(t),
                )
                .response;
            t += 1_000_000;
            let (resp, took) = dispatch(&mut m, s, payload::key(key), t);
            assert_eq!(resp.status, Status::Ok);
            let (r0, emitted) = payload::parse_dispatch(&resp.payload).unwrap();
            // superblock read plus one read per level
            assert_eq!(took, (height + 1) * 8_000);
            match native.status {
                Status::Ok => assert_eq!((r0, emitted), (KV_GET_FOUND, &native.payload[..])),
                Status::NotFound => assert_eq!((r0, emitted.len()), (KV_GET_ABSENT, 0)),
                other => panic!("{other:?}"),
            }
        }
        let (resp, _) = dispatch(&mut m, s, vec![1, 2], t + 1_000_000);
        assert_eq!(
            payload::parse_dispatch(&resp.payload).unwrap().0,
            BAD_PACKET
        );
    }

    #[test]
    fn pointer_chase_follows_links() {
        let mut m = manager();
        let p = m
            .install(ADMIN_TENANT, pointer_chase(), Engine::Program)
            .unwrap();
        let s = m.create_slot(1, &TOKEN, p, 64, u64::MAX).unwrap();
        for (lba, next) in [(3u64, 9u64), (9, 4), (4, 60), (60, 2), (2, 77)] {
            dispatch(&mut m, s, link_packet(lba, next), 0);
        }
        let (resp, took) = dispatch(&mut m, s, chase_packet(3, 5), 1_000_000);
        assert_eq!(payload::parse_dispatch(&resp.payload).unwrap().0, 77);
        assert_eq!(took, 5 * 8_000);
        let (resp, _) = dispatch(&mut m, s, chase_packet(3, 2), 2_000_000);
        assert_eq!(payload::parse_dispatch(&resp.payload).unwrap().0, 4);
        let (resp, _) = dispatch(&mut m, s, chase_packet(3, MAX_CHASE_DEPTH + 1), 3_000_000);
        assert_eq!(
            payload::parse_dispatch(&resp.payload).unwrap().0,
            BAD_PACKET
        );
    }

    #[test]
    fn logfilter_persists_matching_records() {
        let mut m = manager();
        let p = m
            .install(ADMIN_TENANT, logfilter(), Engine::Program)
            .unwrap();
        let s = m.create_slot(1, &TOKEN, p, 8, u64::MAX).unwrap();
        dispatch(&mut m, s, vec![LOGFILTER_RESET], 0);
        let lines: Vec<String> = (0..40)
            .map(|i| {
                if i % 3 == 0 {
                    format!("sshd[{i}]: auth-fail user=x{i}")
                } else {
                    format!("sshd[{i}]: ok")
                }
            })
            .collect();
        let mut expected = Vec::new();
        for l in &lines {
            let rec = pad_record(l.as_bytes());
            let (resp, _) = dispatch(&mut m, s, rec.to_vec(), 0);
            let r0 = payload::parse_dispatch(&resp.payload).unwrap().0;
            assert_eq!(r0, l.contains("auth-fail") as u64, "{l}");
            if r0 == 1 {
                expected.push(rec);
            }
        }
        assert_eq!(expected.len(), 14);
        for (i, rec) in expected.iter().enumerate() {
            let (resp, _) = dispatch(&mut m, s, readback_packet(i as u64), 0);
            let (r0, bytes) = payload::parse_dispatch(&resp.payload).unwrap();
            assert_eq!((r0, bytes), (0, &rec[..]));
        }
        let (resp, _) = dispatch(&mut m, s, readback_packet(14), 0);
        assert_eq!(payload::parse_dispatch(&resp.payload).unwrap().0, 1);
        // pattern ending exactly at the last byte
        let mut tail = [b'.'; RECORD_SIZE];
        tail[RECORD_SIZE - 9..].copy_from_slice(LOGFILTER_PATTERN);
        let (resp, _) = dispatch(&mut m, s, tail.to_vec(), 0);
        assert_eq!(payload::parse_dispatch(&resp.payload).unwrap().0, 1);
    }
}
