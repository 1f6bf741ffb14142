//! Helper registry and the memory regions a program can address.
//!
//! Programs see three regions, each at a fixed virtual base address:
//!
//! | region  | base          | size                |
//! |---------|---------------|---------------------|
//! | stack   | `0x1000_0000` | 512 bytes, `r10` = base + 512 |
//! | packet  | `0x2000_0000` | request payload     |
//! | window  | `0x3000_0000` | 4096 bytes (block I/O buffer) |
//!
//! On entry `r1` points at the packet and `r2` at the I/O window; every other
//! register except `r10` is uninitialized.
//!
//! Standard helpers (ids below 1024 are reserved for this set):
//!
//! | id | name           | args                    | returns |
//! |----|----------------|-------------------------|---------|
//! | 1  | `block_read`   | device, lba, reserved   | 0; block copied into the window |
//! | 2  | `block_write`  | device, lba, reserved   | 0; window written to the block |
//! | 3  | `packet_len`   | none                    | packet length in bytes |
//! | 4  | `emit`         | ptr, len                | 0, or 1 if the response is full |
//! | 5  | `time_now_ns`  | none                    | current virtual time |
//! | 6  | `kv_route`     | key                     | 0 found (value in window[0..128]), 1 absent, 2 no tree |
//!
//! Device and lba are slot-relative: device must be 0 and lba inside the
//! slot's extent, otherwise the call traps with `IsolationFault`.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use thiserror::Error;

use crate::nvme::{Block, BLOCK_SIZE};

pub const STACK_SIZE: usize = 512;
pub const WINDOW_SIZE: usize = BLOCK_SIZE;
pub const MAX_PACKET: usize = 8192;
/// Largest response body `emit` may produce. Leaves room for the return
/// value prefix and the optional timing trailer in one datagram.
pub const MAX_OUTPUT: usize = MAX_PACKET - 8 - 16;

pub const STACK_BASE: u64 = 0x1000_0000;
pub const PACKET_BASE: u64 = 0x2000_0000;
pub const WINDOW_BASE: u64 = 0x3000_0000;
pub const FRAME_POINTER: u64 = STACK_BASE + STACK_SIZE as u64;

pub const HELPER_BLOCK_READ: u32 = 1;
pub const HELPER_BLOCK_WRITE: u32 = 2;
pub const HELPER_PACKET_LEN: u32 = 3;
pub const HELPER_EMIT: u32 = 4;
pub const HELPER_TIME_NOW: u32 = 5;
pub const HELPER_KV_ROUTE: u32 = 6;

/// Lowest id available to tenant-local helpers.
pub const TENANT_HELPER_BASE: u32 = 1024;

pub const KV_VALUE_SIZE: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum Trap {
    FuelExhausted = 1,
    DivideByZero = 2,
    BadHelperReturn = 3,
    IsolationFault = 4,
    OutOfBounds = 5,
    UnknownHelper = 6,
}

impl Trap {
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Trap> {
        Some(match code {
            1 => Trap::FuelExhausted,
            2 => Trap::DivideByZero,
            3 => Trap::BadHelperReturn,
            4 => Trap::IsolationFault,
            5 => Trap::OutOfBounds,
            6 => Trap::UnknownHelper,
            _ => return None,
        })
    }
}

impl fmt::Display for Trap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Region {
    Stack,
    Packet,
    Window,
}

impl Region {
    pub fn base(self) -> u64 {
        match self {
            Region::Stack => STACK_BASE,
            Region::Packet => PACKET_BASE,
            Region::Window => WINDOW_BASE,
        }
    }
}

/// Per-execution memory.
pub struct Memory {
    pub packet: Vec<u8>,
    pub stack: [u8; STACK_SIZE],
    pub window: Box<Block>,
    pub output: Vec<u8>,
}

impl Memory {
    pub fn new(packet: Vec<u8>) -> Self {
        Memory {
            packet,
            stack: [0; STACK_SIZE],
            window: Box::new([0; WINDOW_SIZE]),
            output: Vec::new(),
        }
    }

    fn locate(&self, addr: u64) -> Option<(Region, usize)> {
        let pick = |base: u64, len: usize, region: Region| {
            addr.checked_sub(base)
                .filter(|&o| o < len as u64)
                .map(|o| (region, o as usize))
        };
        pick(STACK_BASE, STACK_SIZE, Region::Stack)
            .or_else(|| pick(PACKET_BASE, self.packet.len(), Region::Packet))
            .or_else(|| pick(WINDOW_BASE, WINDOW_SIZE, Region::Window))
    }

    fn region_mut(&mut self, region: Region) -> &mut [u8] {
        match region {
            Region::Stack => &mut self.stack,
            Region::Packet => &mut self.packet,
            Region::Window => &mut self.window[..],
        }
    }

    fn region(&self, region: Region) -> &[u8] {
        match region {
            Region::Stack => &self.stack,
            Region::Packet => &self.packet,
            Region::Window => &self.window[..],
        }
    }

    /// Resolves `[addr, addr+len)` to a slice inside one region.
    pub fn slice(&self, addr: u64, len: usize) -> Result<&[u8], Trap> {
        if len == 0 {
            return Ok(&[]);
        }
        let (region, start) = self.locate(addr).ok_or(Trap::OutOfBounds)?;
        let bytes = self.region(region);
        bytes.get(start..start + len).ok_or(Trap::OutOfBounds)
    }

    pub fn slice_mut(&mut self, addr: u64, len: usize) -> Result<&mut [u8], Trap> {
        let (region, start) = self.locate(addr).ok_or(Trap::OutOfBounds)?;
        let bytes = self.region_mut(region);
        bytes.get_mut(start..start + len).ok_or(Trap::OutOfBounds)
    }

    pub fn load(&self, addr: u64, size: usize) -> Result<u64, Trap> {
        let s = self.slice(addr, size)?;
        let mut b = [0u8; 8];
        b[..size].copy_from_slice(s);
        Ok(u64::from_le_bytes(b))
    }

    pub fn store(&mut self, addr: u64, size: usize, value: u64) -> Result<(), Trap> {
        let s = self.slice_mut(addr, size)?;
        s.copy_from_slice(&value.to_le_bytes()[..size]);
        Ok(())
    }
}

/// What the datapath offers helpers beyond program memory.
pub trait DatapathEnv {
    fn now_ns(&self) -> u64;
    fn block_read(&mut self, device: u64, lba: u64, buf: &mut Block) -> Result<(), Trap>;
    fn block_write(&mut self, device: u64, lba: u64, buf: &Block) -> Result<(), Trap>;
    /// Looks `key` up in the slot's key-value tree. Returns 0 (found, value
    /// written), 1 (absent) or 2 (no tree in this slot).
    fn kv_lookup(&mut self, key: u64, value: &mut [u8; KV_VALUE_SIZE]) -> Result<u64, Trap>;
}

/// Environment with no storage behind it: block helpers fault.
#[derive(Debug, Clone, Copy, Default)]
pub struct DetachedEnv {
    pub now_ns: u64,
}

impl DatapathEnv for DetachedEnv {
    fn now_ns(&self) -> u64 {
        self.now_ns
    }

    fn block_read(&mut self, _: u64, _: u64, _: &mut Block) -> Result<(), Trap> {
        Err(Trap::IsolationFault)
    }

    fn block_write(&mut self, _: u64, _: u64, _: &Block) -> Result<(), Trap> {
        Err(Trap::IsolationFault)
    }

    fn kv_lookup(&mut self, _: u64, _: &mut [u8; KV_VALUE_SIZE]) -> Result<u64, Trap> {
        Ok(2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArgKind {
    /// Any initialized value.
    Scalar,
    /// Pointer to readable memory whose length is the argument at the given
    /// index (0-based).
    ReadPtr { len_arg: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RetKind {
    Scalar,
    /// The packet length; the verifier uses it for bounds checks.
    PacketLen,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HelperSignature {
    pub id: u32,
    pub name: String,
    pub args: Vec<ArgKind>,
    pub ret: RetKind,
}

impl HelperSignature {
    pub fn new(id: u32, name: &str, args: Vec<ArgKind>, ret: RetKind) -> Self {
        HelperSignature {
            id,
            name: name.to_string(),
            args,
            ret,
        }
    }
}

pub struct HelperCall<'a> {
    pub args: [u64; 5],
    pub mem: &'a mut Memory,
    pub env: &'a mut dyn DatapathEnv,
}

pub type HelperFn = Arc<dyn Fn(&mut HelperCall<'_>) -> Result<u64, Trap> + Send + Sync>;

#[derive(Clone)]
pub struct Helper {
    pub signature: HelperSignature,
    pub func: HelperFn,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum HelperError {
    #[error("helper id {0} already registered")]
    DuplicateHelperId(u32),
    #[error("helper id {0} is reserved for the standard set")]
    ReservedId(u32),
}

/// Helper id to implementation.
#[derive(Clone, Default)]
pub struct HelperTable {
    helpers: BTreeMap<u32, Helper>,
}

impl fmt::Debug for HelperTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list()
            .entries(
                self.helpers
                    .values()
                    .map(|h| (&h.signature.id, &h.signature.name)),
            )
            .finish()
    }
}

impl HelperTable {
    pub fn empty() -> Self {
        HelperTable::default()
    }

    /// The six standard helpers.
    pub fn standard() -> Self {
        let mut t = HelperTable::default();
        let std_helpers: [(HelperSignature, HelperFn); 6] = [
            (
                HelperSignature::new(
                    HELPER_BLOCK_READ,
                    "block_read",
                    vec![ArgKind::Scalar; 3],
                    RetKind::Scalar,
                ),
                Arc::new(|c: &mut HelperCall<'_>| {
                    c.env.block_read(c.args[0], c.args[1], &mut c.mem.window)?;
                    Ok(0)
                }),
            ),
            (
                HelperSignature::new(
                    HELPER_BLOCK_WRITE,
                    "block_write",
                    vec![ArgKind::Scalar; 3],
                    RetKind::Scalar,
                ),
                Arc::new(|c: &mut HelperCall<'_>| {
                    c.env.block_write(c.args[0], c.args[1], &c.mem.window)?;
                    Ok(0)
                }),
            ),
            (
                HelperSignature::new(HELPER_PACKET_LEN, "packet_len", vec![], RetKind::PacketLen),
                Arc::new(|c: &mut HelperCall<'_>| Ok(c.mem.packet.len() as u64)),
            ),
            (
                HelperSignature::new(
                    HELPER_EMIT,
                    "emit",
                    vec![ArgKind::ReadPtr { len_arg: 1 }, ArgKind::Scalar],
                    RetKind::Scalar,
                ),
                Arc::new(|c: &mut HelperCall<'_>| {
                    let len = c.args[1] as usize;
                    if c.mem.output.len() + len > MAX_OUTPUT {
                        return Ok(1);
                    }
                    let bytes = c.mem.slice(c.args[0], len)?.to_vec();
                    c.mem.output.extend_from_slice(&bytes);
                    Ok(0)
                }),
            ),
            (
                HelperSignature::new(HELPER_TIME_NOW, "time_now_ns", vec![], RetKind::Scalar),
                Arc::new(|c: &mut HelperCall<'_>| Ok(c.env.now_ns())),
            ),
            (
                HelperSignature::new(
                    HELPER_KV_ROUTE,
                    "kv_route",
                    vec![ArgKind::Scalar],
                    RetKind::Scalar,
                ),
                Arc::new(|c: &mut HelperCall<'_>| {
                    let mut value = [0u8; KV_VALUE_SIZE];
                    let r = c.env.kv_lookup(c.args[0], &mut value)?;
                    if r == 0 {
                        c.mem.window[..KV_VALUE_SIZE].copy_from_slice(&value);
                    }
                    Ok(r)
                }),
            ),
        ];
        for (signature, func) in std_helpers {
            t.helpers.insert(signature.id, Helper { signature, func });
        }
        t
    }

    /// Adds a tenant-local helper. Ids below 1024 are reserved.
    pub fn register_helper(
        &mut self,
        signature: HelperSignature,
        func: HelperFn,
    ) -> Result<(), HelperError> {
        if signature.id < TENANT_HELPER_BASE {
            return Err(HelperError::ReservedId(signature.id));
        }
        self.insert(signature, func)
    }

    /// Adds a helper with no id restriction.
    pub fn insert(
        &mut self,
        signature: HelperSignature,
        func: HelperFn,
    ) -> Result<(), HelperError> {
        if self.helpers.contains_key(&signature.id) {
            return Err(HelperError::DuplicateHelperId(signature.id));
        }
        self.helpers
            .insert(signature.id, Helper { signature, func });
        Ok(())
    }

    pub fn get(&self, id: u32) -> Option<&Helper> {
        self.helpers.get(&id)
    }

    pub fn signature(&self, id: u32) -> Option<&HelperSignature> {
        self.helpers.get(&id).map(|h| &h.signature)
    }

    pub fn ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.helpers.keys().copied()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn memory_regions_resolve() {
        let mut m = Memory::new(b"abc".to_vec());
        assert_eq!(m.load(PACKET_BASE + 1, 1).unwrap(), b'b' as u64);
        assert_eq!(m.load(PACKET_BASE + 2, 2), Err(Trap::OutOfBounds));
        m.store(FRAME_POINTER - 8, 8, 0xdead).unwrap();
        assert_eq!(m.load(FRAME_POINTER - 8, 8).unwrap(), 0xdead);
        assert_eq!(m.load(FRAME_POINTER, 1), Err(Trap::OutOfBounds));
        assert_eq!(m.load(WINDOW_BASE + 4095, 1).unwrap(), 0);
        assert_eq!(m.load(0, 1), Err(Trap::OutOfBounds));
    }

    #[test]
    fn duplicate_and_reserved_ids() {
        let mut t = HelperTable::standard();
        let f: HelperFn = Arc::new(|_| Ok(7));
        let sig = HelperSignature::new(2000, "seven", vec![], RetKind::Scalar);
        t.register_helper(sig.clone(), f.clone()).unwrap();
        assert_eq!(
            t.register_helper(sig, f.clone()),
            Err(HelperError::DuplicateHelperId(2000))
        );
        let low = HelperSignature::new(7, "low", vec![], RetKind::Scalar);
        assert_eq!(t.register_helper(low, f), Err(HelperError::ReservedId(7)));
        assert_eq!(t.ids().collect::<Vec<_>>(), vec![1, 2, 3, 4, 5, 6, 2000]);
    }

    #[test]
    fn trap_codes_round_trip() {
        for code in 1..=6 {
            assert_eq!(Trap::from_code(code).unwrap().code(), code);
        }
        assert!(Trap::from_code(0).is_none());
    }
}
