//! Simulated NVMe subsystem.
//!
//! A set of block devices reachable only through the datapath. Each device
//! has a bounded command queue; service times are drawn from the shared
//! [`LatencyModel`]. There is no device-side cache.
//!
//! Two access styles exist. The queue-pair style (`submit` + `completions`)
//! is driven by the caller's notion of "now". The synchronous style
//! (`read_block_sync` / `write_block_sync`) is what datapath executions use:
//! the caller owns a local timeline, the command is reserved against the
//! device queue at that time, and the timeline is advanced to completion.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io;
use std::os::unix::fs::FileExt;
use std::path::PathBuf;

use thiserror::Error;

use crate::sim::{IoKind, LatencyModel, LatencySampler, SimTime};

pub const BLOCK_SIZE: usize = 4096;

pub type Block = [u8; BLOCK_SIZE];

pub fn zero_block() -> Box<Block> {
    Box::new([0u8; BLOCK_SIZE])
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Backing {
    Memory,
    /// One raw image per device at `<prefix>.dev<N>.img`.
    File(PathBuf),
}

impl std::str::FromStr for Backing {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "memory" {
            Ok(Backing::Memory)
        } else if let Some(prefix) = s.strip_prefix("file:") {
            if prefix.is_empty() {
                Err("file backing needs a path prefix".into())
            } else {
                Ok(Backing::File(PathBuf::from(prefix)))
            }
        } else {
            Err(format!("unknown backing `{s}`"))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeviceConfig {
    pub device_count: u32,
    pub capacity_blocks: u64,
    pub queue_depth: u32,
    pub backing: Backing,
    /// Record every device access (for isolation audits and latency
    /// cross-checks). Off by default; long runs would accumulate millions.
    pub access_log: bool,
}

impl Default for DeviceConfig {
    fn default() -> Self {
        DeviceConfig {
            device_count: 4,
            capacity_blocks: 1 << 20,
            queue_depth: 16,
            backing: Backing::Memory,
            access_log: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BlockAddress {
    pub device: u32,
    pub lba: u64,
}

impl BlockAddress {
    pub fn new(device: u32, lba: u64) -> Self {
        BlockAddress { device, lba }
    }
}

#[derive(Debug, Error)]
pub enum NvmeError {
    #[error("device {device} queue full (depth {depth})")]
    QueueFull { device: u32, depth: u32 },
    #[error("address out of range: device {device} lba {lba}")]
    AddressOutOfRange { device: u32, lba: u64 },
    #[error("invalid device configuration: {0}")]
    InvalidConfig(String),
    #[error("write command without data")]
    MissingData,
    #[error("tag {0} already outstanding")]
    DuplicateTag(u64),
    #[error("backing store I/O: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone)]
pub enum CommandKind {
    Read,
    Write(Box<Block>),
}

#[derive(Debug, Clone)]
pub struct Command {
    pub kind: CommandKind,
    pub addr: BlockAddress,
    pub tag: u64,
    pub submit_time: SimTime,
}

impl Command {
    pub fn read(addr: BlockAddress, tag: u64, submit_time: SimTime) -> Self {
        Command {
            kind: CommandKind::Read,
            addr,
            tag,
            submit_time,
        }
    }

    pub fn write(addr: BlockAddress, data: Box<Block>, tag: u64, submit_time: SimTime) -> Self {
        Command {
            kind: CommandKind::Write(data),
            addr,
            tag,
            submit_time,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CompletionStatus {
    Success,
}

#[derive(Debug, Clone)]
pub struct Completion {
    pub tag: u64,
    pub status: CompletionStatus,
    pub completion_time: SimTime,
    /// Block contents for reads.
    pub data: Option<Box<Block>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AccessRecord {
    pub device: u32,
    pub lba: u64,
    pub kind: IoKind,
    pub submit: SimTime,
    pub complete: SimTime,
    /// Slot that issued the access, if any.
    pub owner: Option<u16>,
}

impl AccessRecord {
    pub fn latency_ns(&self) -> u64 {
        self.complete - self.submit
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DeviceStats {
    pub submitted: u64,
    pub completed: u64,
    pub in_flight: u64,
    pub queue_full: u64,
}

enum Store {
    Memory(HashMap<u64, Box<Block>>),
    File(File),
}

impl Store {
    fn read(&self, lba: u64, buf: &mut Block) -> io::Result<()> {
        match self {
            Store::Memory(map) => {
                match map.get(&lba) {
                    Some(b) => buf.copy_from_slice(&b[..]),
                    None => buf.fill(0),
                }
                Ok(())
            }
            Store::File(f) => f.read_exact_at(buf, lba * BLOCK_SIZE as u64),
        }
    }

    fn write(&mut self, lba: u64, buf: &Block) -> io::Result<()> {
        match self {
            Store::Memory(map) => {
                if buf.iter().all(|&b| b == 0) {
                    map.remove(&lba);
                } else {
                    map.entry(lba)
                        .or_insert_with(zero_block)
                        .copy_from_slice(buf);
                }
                Ok(())
            }
            Store::File(f) => f.write_all_at(buf, lba * BLOCK_SIZE as u64),
        }
    }
}

struct Outstanding {
    cmd: Command,
    complete: SimTime,
}

struct Device {
    store: Store,
    /// `(submit, complete)` of every command still counted against the queue.
    reservations: Vec<(SimTime, SimTime)>,
    outstanding: Vec<Outstanding>,
    stats: DeviceStats,
}

impl Device {
    fn occupancy_at(&self, t: SimTime) -> usize {
        self.reservations
            .iter()
            .filter(|(s, c)| *s <= t && t < *c)
            .count()
    }

    /// Earliest time `>= t` at which a queue entry is free.
    fn first_free_slot(&self, t: SimTime, depth: usize) -> SimTime {
        if self.occupancy_at(t) < depth {
            return t;
        }
        let mut candidates: Vec<SimTime> = self
            .reservations
            .iter()
            .map(|&(_, c)| c)
            .filter(|&c| c > t)
            .collect();
        candidates.sort_unstable();
        candidates
            .into_iter()
            .find(|&c| self.occupancy_at(c) < depth)
            .expect("queue frees once all reservations complete")
    }
}

/// The set of simulated devices plus their latency sampler.
pub struct NvmeSubsystem {
    config: DeviceConfig,
    devices: Vec<Device>,
    sampler: LatencySampler,
    access_log: Option<Vec<AccessRecord>>,
    owner: Option<u16>,
    horizon: SimTime,
}

impl NvmeSubsystem {
    pub fn new(config: DeviceConfig, model: LatencyModel, seed: u64) -> Result<Self, NvmeError> {
        if config.device_count == 0 || config.capacity_blocks == 0 || config.queue_depth == 0 {
            return Err(NvmeError::InvalidConfig(
                "device_count, capacity_blocks and queue_depth must be >= 1".into(),
            ));
        }
        model
            .validate()
            .map_err(|e| NvmeError::InvalidConfig(e.to_string()))?;
        let mut devices = Vec::with_capacity(config.device_count as usize);
        for i in 0..config.device_count {
            let store = match &config.backing {
                Backing::Memory => Store::Memory(HashMap::new()),
                Backing::File(prefix) => {
                    let path = PathBuf::from(format!("{}.dev{}.img", prefix.display(), i));
                    let f = OpenOptions::new()
                        .read(true)
                        .write(true)
                        .create(true)
                        .truncate(false)
                        .open(&path)?;
                    f.set_len(config.capacity_blocks * BLOCK_SIZE as u64)?;
                    Store::File(f)
                }
            };
            devices.push(Device {
                store,
                reservations: Vec::new(),
                outstanding: Vec::new(),
                stats: DeviceStats::default(),
            });
        }
        Ok(NvmeSubsystem {
            access_log: config.access_log.then(Vec::new),
            config,
            devices,
            sampler: LatencySampler::new(model, seed),
            owner: None,
            horizon: SimTime::ZERO,
        })
    }

    pub fn config(&self) -> &DeviceConfig {
        &self.config
    }

    pub fn model(&self) -> &LatencyModel {
        self.sampler.model()
    }

    pub fn device_count(&self) -> u32 {
        self.config.device_count
    }

    pub fn capacity_blocks(&self) -> u64 {
        self.config.capacity_blocks
    }

    pub fn stats(&self, device: u32) -> Option<DeviceStats> {
        self.devices.get(device as usize).map(|d| d.stats)
    }

    pub fn access_log(&self) -> Option<&[AccessRecord]> {
        self.access_log.as_deref()
    }

    pub fn clear_access_log(&mut self) {
        if let Some(log) = &mut self.access_log {
            log.clear();
        }
    }

    /// Attributes subsequent accesses to a slot in the access log.
    pub fn set_owner(&mut self, owner: Option<u16>) {
        self.owner = owner;
    }

    fn check(&self, addr: BlockAddress) -> Result<(), NvmeError> {
        if addr.device >= self.config.device_count || addr.lba >= self.config.capacity_blocks {
            Err(NvmeError::AddressOutOfRange {
                device: addr.device,
                lba: addr.lba,
            })
        } else {
            Ok(())
        }
    }

    fn log(&mut self, addr: BlockAddress, kind: IoKind, submit: SimTime, complete: SimTime) {
        let owner = self.owner;
        if let Some(log) = &mut self.access_log {
            log.push(AccessRecord {
                device: addr.device,
                lba: addr.lba,
                kind,
                submit,
                complete,
                owner,
            });
        }
    }

    /// Forgets queue reservations that completed before `now`. No future
    /// submission can be earlier than the global clock.
    pub fn retire(&mut self, now: SimTime) {
        if now <= self.horizon {
            return;
        }
        self.horizon = now;
        for d in &mut self.devices {
            d.reservations.retain(|&(_, c)| c > now);
        }
    }

    /// Queues a command. It completes at `submit_time + sampled latency` and
    /// is reported by [`completions`](Self::completions).
    pub fn submit(&mut self, device: u32, cmd: Command) -> Result<u64, NvmeError> {
        let addr = BlockAddress { device, ..cmd.addr };
        self.check(addr)?;
        let depth = self.config.queue_depth;
        let dev = &mut self.devices[device as usize];
        if dev.outstanding.iter().any(|o| o.cmd.tag == cmd.tag) {
            return Err(NvmeError::DuplicateTag(cmd.tag));
        }
        if dev.occupancy_at(cmd.submit_time) >= depth as usize {
            dev.stats.queue_full += 1;
            return Err(NvmeError::QueueFull { device, depth });
        }
        let kind = match cmd.kind {
            CommandKind::Read => IoKind::Read,
            CommandKind::Write(_) => IoKind::Write,
        };
        let complete = cmd.submit_time + self.sampler.sample(kind);
        let dev = &mut self.devices[device as usize];
        dev.reservations.push((cmd.submit_time, complete));
        dev.stats.submitted += 1;
        dev.stats.in_flight += 1;
        let tag = cmd.tag;
        let submit = cmd.submit_time;
        dev.outstanding.push(Outstanding {
            cmd: Command { addr, ..cmd },
            complete,
        });
        self.log(addr, kind, submit, complete);
        Ok(tag)
    }

    /// Reaps every command on `device` that has completed by `now`, ordered
    /// by completion time then tag. Each tag is reported once.
    pub fn completions(&mut self, device: u32, now: SimTime) -> Result<Vec<Completion>, NvmeError> {
        let dev = self
            .devices
            .get_mut(device as usize)
            .ok_or(NvmeError::AddressOutOfRange { device, lba: 0 })?;
        let mut done: Vec<Outstanding> = Vec::new();
        let mut i = 0;
        while i < dev.outstanding.len() {
            if dev.outstanding[i].complete <= now {
                done.push(dev.outstanding.swap_remove(i));
            } else {
                i += 1;
            }
        }
        done.sort_by_key(|o| (o.complete, o.cmd.tag));
        let mut out = Vec::with_capacity(done.len());
        for o in done {
            let data = match o.cmd.kind {
                CommandKind::Read => {
                    let mut b = zero_block();
                    dev.store.read(o.cmd.addr.lba, &mut b)?;
                    Some(b)
                }
                CommandKind::Write(data) => {
                    dev.store.write(o.cmd.addr.lba, &data)?;
                    None
                }
            };
            dev.stats.completed += 1;
            dev.stats.in_flight -= 1;
            out.push(Completion {
                tag: o.cmd.tag,
                status: CompletionStatus::Success,
                completion_time: o.complete,
                data,
            });
        }
        Ok(out)
    }

    /// Earliest pending completion on a device, if any.
    pub fn next_completion(&self, device: u32) -> Option<SimTime> {
        self.devices
            .get(device as usize)?
            .outstanding
            .iter()
            .map(|o| o.complete)
            .min()
    }

    fn reserve(&mut self, addr: BlockAddress, kind: IoKind, clock: &mut SimTime) -> u64 {
        let depth = self.config.queue_depth as usize;
        let dev = &self.devices[addr.device as usize];
        let start = dev.first_free_slot(*clock, depth);
        let latency = self.sampler.sample(kind);
        let complete = start + latency;
        let dev = &mut self.devices[addr.device as usize];
        dev.reservations.push((start, complete));
        dev.stats.submitted += 1;
        dev.stats.completed += 1;
        self.log(addr, kind, start, complete);
        let waited = complete - *clock;
        *clock = complete;
        waited
    }

    /// Reads one block on the caller's timeline. Returns the elapsed time,
    /// which is the sampled latency plus any wait for a free queue entry.
    pub fn read_block_sync(
        &mut self,
        clock: &mut SimTime,
        addr: BlockAddress,
        buf: &mut Block,
    ) -> Result<u64, NvmeError> {
        self.check(addr)?;
        let elapsed = self.reserve(addr, IoKind::Read, clock);
        self.devices[addr.device as usize]
            .store
            .read(addr.lba, buf)?;
        Ok(elapsed)
    }

    pub fn write_block_sync(
        &mut self,
        clock: &mut SimTime,
        addr: BlockAddress,
        buf: &Block,
    ) -> Result<u64, NvmeError> {
        self.check(addr)?;
        let elapsed = self.reserve(addr, IoKind::Write, clock);
        self.devices[addr.device as usize]
            .store
            .write(addr.lba, buf)?;
        Ok(elapsed)
    }

    /// Administrative zeroing of a block range; bypasses the queue and costs
    /// no virtual time.
    pub fn zero_range(&mut self, device: u32, first_lba: u64, count: u64) -> Result<(), NvmeError> {
        if count == 0 {
            return Ok(());
        }
        self.check(BlockAddress::new(device, first_lba + count - 1))?;
        let zero = [0u8; BLOCK_SIZE];
        let dev = &mut self.devices[device as usize];
        for lba in first_lba..first_lba + count {
            dev.store.write(lba, &zero)?;
        }
        Ok(())
    }

    /// Untimed read used by tests and integrity tooling.
    pub fn peek_block(&self, addr: BlockAddress) -> Result<Box<Block>, NvmeError> {
        self.check(addr)?;
        let mut b = zero_block();
        self.devices[addr.device as usize]
            .store
            .read(addr.lba, &mut b)?;
        Ok(b)
    }

    /// Untimed write for administrative bulk loading. Bypasses queues and
    /// the access log.
    pub fn poke_block(&mut self, addr: BlockAddress, buf: &Block) -> Result<(), NvmeError> {
        self.check(addr)?;
        self.devices[addr.device as usize]
            .store
            .write(addr.lba, buf)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::Distribution;

    fn subsystem(dist: Distribution) -> NvmeSubsystem {
        let cfg = DeviceConfig {
            device_count: 2,
            capacity_blocks: 64,
            queue_depth: 16,
            backing: Backing::Memory,
            access_log: true,
        };
        NvmeSubsystem::new(cfg, LatencyModel::with_distribution(dist), 7).unwrap()
    }

    fn pattern(byte: u8) -> Box<Block> {
        Box::new([byte; BLOCK_SIZE])
    }

    #[test]
    fn read_after_write_via_queue() {
        let mut n = subsystem(Distribution::FixedMax);
        let a = BlockAddress::new(0, 7);
        n.submit(0, Command::write(a, pattern(0xAB), 1, SimTime(0)))
            .unwrap();
        let c = n.completions(0, SimTime(8_000)).unwrap();
        assert_eq!(c.len(), 1);
        n.submit(0, Command::read(a, 2, SimTime(8_000))).unwrap();
        let c = n.completions(0, SimTime(16_000)).unwrap();
        assert_eq!(c[0].data.as_ref().unwrap()[..], pattern(0xAB)[..]);
    }

    #[test]
    fn never_written_block_reads_zero() {
        let mut n = subsystem(Distribution::Uniform);
        let mut clock = SimTime(0);
        let mut buf = [0xFFu8; BLOCK_SIZE];
        n.read_block_sync(&mut clock, BlockAddress::new(1, 3), &mut buf)
            .unwrap();
        assert!(buf.iter().all(|&b| b == 0));
    }

    #[test]
    fn seventeenth_submit_is_queue_full() {
        let mut n = subsystem(Distribution::Uniform);
        for tag in 0..16 {
            n.submit(0, Command::read(BlockAddress::new(0, tag), tag, SimTime(0)))
                .unwrap();
        }
        let err = n
            .submit(0, Command::read(BlockAddress::new(0, 0), 16, SimTime(0)))
            .unwrap_err();
        assert!(matches!(
            err,
            NvmeError::QueueFull {
                device: 0,
                depth: 16
            }
        ));
        // The other device is unaffected.
        n.submit(1, Command::read(BlockAddress::new(1, 0), 0, SimTime(0)))
            .unwrap();
    }

    #[test]
    fn out_of_range_changes_nothing() {
        let mut n = subsystem(Distribution::Uniform);
        let err = n
            .submit(0, Command::read(BlockAddress::new(0, 64), 1, SimTime(0)))
            .unwrap_err();
        assert!(matches!(err, NvmeError::AddressOutOfRange { .. }));
        assert_eq!(n.stats(0).unwrap().submitted, 0);
        let mut clock = SimTime(0);
        let mut buf = [0u8; BLOCK_SIZE];
        assert!(n
            .read_block_sync(&mut clock, BlockAddress::new(5, 0), &mut buf)
            .is_err());
        assert_eq!(clock, SimTime(0));
    }

    #[test]
    fn empty_completions() {
        let mut n = subsystem(Distribution::Uniform);
        assert!(n.completions(0, SimTime(1_000_000)).unwrap().is_empty());
    }

    #[test]
    fn equal_completion_times_report_in_tag_order() {
        let mut n = subsystem(Distribution::FixedMax);
        n.submit(0, Command::read(BlockAddress::new(0, 1), 9, SimTime(0)))
            .unwrap();
        n.submit(0, Command::read(BlockAddress::new(0, 2), 4, SimTime(0)))
            .unwrap();
        assert!(n.completions(0, SimTime(7_999)).unwrap().is_empty());
        let c = n.completions(0, SimTime(8_000)).unwrap();
        let tags: Vec<_> = c.iter().map(|c| (c.tag, c.completion_time)).collect();
        assert_eq!(tags, vec![(4, SimTime(8_000)), (9, SimTime(8_000))]);
        // Reported exactly once.
        assert!(n.completions(0, SimTime(100_000)).unwrap().is_empty());
    }

    #[test]
    fn uniform_completion_latencies_in_range() {
        let mut n = subsystem(Distribution::Uniform);
        let mut now = SimTime(0);
        let mut tag = 0;
        let mut seen = 0;
        while seen < 1000 {
            while n.stats(0).unwrap().in_flight < 16 && tag < 1000 {
                n.submit(0, Command::read(BlockAddress::new(0, tag % 64), tag, now))
                    .unwrap();
                tag += 1;
            }
            now = n.next_completion(0).unwrap();
            n.retire(now);
            seen += n.completions(0, now).unwrap().len();
        }
        let log = n.access_log().unwrap();
        assert_eq!(log.len(), 1000);
        assert!(log
            .iter()
            .all(|r| (5_000..=8_000).contains(&r.latency_ns())));
        let s = n.stats(0).unwrap();
        assert_eq!(s.submitted, s.completed + s.in_flight);
    }

    #[test]
    fn sync_ops_advance_clock_by_latency() {
        let mut n = subsystem(Distribution::FixedMax);
        let mut clock = SimTime(0);
        let a = BlockAddress::new(0, 5);
        let mut buf = [0u8; BLOCK_SIZE];
        assert_eq!(n.read_block_sync(&mut clock, a, &mut buf).unwrap(), 8_000);
        assert_eq!(clock, SimTime(8_000));
        n.write_block_sync(&mut clock, a, &pattern(3)).unwrap();
        n.read_block_sync(&mut clock, a, &mut buf).unwrap();
        assert_eq!(buf[..], pattern(3)[..]);

        let mut clock = SimTime(0);
        for lba in 0..3 {
            n.read_block_sync(&mut clock, BlockAddress::new(1, lba), &mut buf)
                .unwrap();
        }
        assert_eq!(clock, SimTime(24_000));
    }

    #[test]
    fn sync_ops_wait_for_queue_entry() {
        let mut n = subsystem(Distribution::FixedMax);
        let mut buf = [0u8; BLOCK_SIZE];
        for _ in 0..16 {
            let mut c = SimTime(0);
            n.read_block_sync(&mut c, BlockAddress::new(0, 0), &mut buf)
                .unwrap();
        }
        let mut c = SimTime(0);
        let waited = n
            .read_block_sync(&mut c, BlockAddress::new(0, 0), &mut buf)
            .unwrap();
        assert_eq!(waited, 16_000);
    }

    #[test]
    fn file_backing_persists() {
        let dir = tempfile::tempdir().unwrap();
        let prefix = dir.path().join("img");
        let cfg = DeviceConfig {
            device_count: 1,
            capacity_blocks: 8,
            backing: Backing::File(prefix.clone()),
            ..Default::default()
        };
        {
            let mut n = NvmeSubsystem::new(cfg.clone(), LatencyModel::default(), 0).unwrap();
            let mut clock = SimTime(0);
            n.write_block_sync(&mut clock, BlockAddress::new(0, 2), &pattern(9))
                .unwrap();
        }
        let n = NvmeSubsystem::new(cfg, LatencyModel::default(), 0).unwrap();
        assert_eq!(
            n.peek_block(BlockAddress::new(0, 2)).unwrap()[..],
            pattern(9)[..]
        );
        assert!(prefix.with_extension("dev0.img").exists());
    }

    #[test]
    fn backing_parse() {
        assert_eq!("memory".parse::<Backing>().unwrap(), Backing::Memory);
        assert_eq!(
            "file:/tmp/x".parse::<Backing>().unwrap(),
            Backing::File("/tmp/x".into())
        );
        assert!("file:".parse::<Backing>().is_err());
    }
}
