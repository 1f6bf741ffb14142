//! Tenants, program images, slots and their block extents.
//!
//! A slot binds one verified, compiled program to a private extent of one
//! device. Requests to a slot run to completion one at a time; later arrivals
//! wait in a bounded queue.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fmt;
use std::sync::Arc;

use thiserror::Error;

use crate::ebpf::{
    execute, verify, DatapathEnv, ExecutionContext, HelperTable, Limits, Program, Trap,
    VerifiedProgram, VerifierError,
};
use crate::kv::{BTree, BlockStore, DeleteOutcome, PutOutcome, StoreError, TreeError, VALUE_SIZE};
use crate::nvme::{Block, BlockAddress, NvmeSubsystem};
use crate::pipeline::{self, Compiled, DEFAULT_LANE_WIDTH};
use crate::sim::SimTime;
use crate::wire::{payload, Message, Opcode, Status, TOKEN_LEN};

pub const ADMIN_TENANT: u16 = 0;
pub const QUEUE_DEPTH: usize = 64;

pub type Token = [u8; TOKEN_LEN];

/// Compares two tokens in time independent of where they differ.
pub fn tokens_match(a: &Token, b: &Token) -> bool {
    a.iter().zip(b).fold(0u8, |acc, (x, y)| acc | (x ^ y)) == 0
}

#[derive(Clone)]
pub struct Tenant {
    pub id: u16,
    token: Token,
}

impl Tenant {
    pub fn new(id: u16, token: Token) -> Self {
        Tenant { id, token }
    }
}

impl fmt::Debug for Tenant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tenant")
            .field("id", &self.id)
            .field("token", &"<redacted>")
            .finish()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Extent {
    pub device: u32,
    pub first_lba: u64,
    pub block_count: u64,
}

impl Extent {
    pub fn end(&self) -> u64 {
        self.first_lba + self.block_count
    }

    /// Absolute address of slot-relative block `lba`.
    pub fn translate(&self, lba: u64) -> Option<BlockAddress> {
        (lba < self.block_count).then(|| BlockAddress::new(self.device, self.first_lba + lba))
    }

    pub fn contains(&self, addr: BlockAddress) -> bool {
        addr.device == self.device && addr.lba >= self.first_lba && addr.lba < self.end()
    }

    pub fn overlaps(&self, other: &Extent) -> bool {
        self.device == other.device && self.first_lba < other.end() && other.first_lba < self.end()
    }
}

/// First-fit within a device; successive allocations start on successive
/// devices and fall through to the next one when a device is full.
#[derive(Debug, Clone)]
pub struct ExtentAllocator {
    capacity: u64,
    used: Vec<Vec<Extent>>,
    next_device: usize,
}

impl ExtentAllocator {
    pub fn new(device_count: u32, capacity_blocks: u64) -> Self {
        ExtentAllocator {
            capacity: capacity_blocks,
            used: vec![Vec::new(); device_count as usize],
            next_device: 0,
        }
    }

    fn first_fit(&self, device: usize, blocks: u64) -> Option<u64> {
        let mut cursor = 0;
        for e in &self.used[device] {
            if e.first_lba - cursor >= blocks {
                return Some(cursor);
            }
            cursor = e.end();
        }
        (self.capacity - cursor >= blocks).then_some(cursor)
    }

    pub fn allocate(&mut self, blocks: u64) -> Option<Extent> {
        if blocks == 0 {
            return None;
        }
        let n = self.used.len();
        for i in 0..n {
            let d = (self.next_device + i) % n;
            if let Some(first_lba) = self.first_fit(d, blocks) {
                let e = Extent {
                    device: d as u32,
                    first_lba,
                    block_count: blocks,
                };
                let list = &mut self.used[d];
                let at = list.partition_point(|x| x.first_lba < first_lba);
                list.insert(at, e);
                self.next_device = (d + 1) % n;
                return Some(e);
            }
        }
        None
    }

    pub fn release(&mut self, extent: &Extent) -> bool {
        let Some(list) = self.used.get_mut(extent.device as usize) else {
            return false;
        };
        match list.iter().position(|e| e == extent) {
            Some(i) => {
                list.remove(i);
                true
            }
            None => false,
        }
    }

    pub fn allocated(&self) -> impl Iterator<Item = &Extent> {
        self.used.iter().flatten()
    }
}

/// Slot-relative view of an extent as a [`BlockStore`].
///
/// Timed stores charge device latency to `clock`; untimed ones bypass the
/// queues for bulk loading.
pub struct NvmeStore<'a> {
    nvme: &'a mut NvmeSubsystem,
    extent: Extent,
    clock: Option<&'a mut SimTime>,
}

impl<'a> NvmeStore<'a> {
    pub fn timed(nvme: &'a mut NvmeSubsystem, extent: Extent, clock: &'a mut SimTime) -> Self {
        NvmeStore {
            nvme,
            extent,
            clock: Some(clock),
        }
    }

    pub fn untimed(nvme: &'a mut NvmeSubsystem, extent: Extent) -> Self {
        NvmeStore {
            nvme,
            extent,
            clock: None,
        }
    }

    fn addr(&self, lba: u64) -> Result<BlockAddress, StoreError> {
        self.extent.translate(lba).ok_or(StoreError::OutOfRange {
            lba,
            count: self.extent.block_count,
        })
    }
}

impl BlockStore for NvmeStore<'_> {
    fn block_count(&self) -> u64 {
        self.extent.block_count
    }

    fn read(&mut self, lba: u64, buf: &mut Block) -> Result<u64, StoreError> {
        let addr = self.addr(lba)?;
        let dev = |e: crate::nvme::NvmeError| StoreError::Device(e.to_string());
        match self.clock.as_deref_mut() {
            Some(clock) => self.nvme.read_block_sync(clock, addr, buf).map_err(dev),
            None => {
                buf.copy_from_slice(&self.nvme.peek_block(addr).map_err(dev)?[..]);
                Ok(0)
            }
        }
    }

    fn write(&mut self, lba: u64, buf: &Block) -> Result<u64, StoreError> {
        let addr = self.addr(lba)?;
        let dev = |e: crate::nvme::NvmeError| StoreError::Device(e.to_string());
        match self.clock.as_deref_mut() {
            Some(clock) => self.nvme.write_block_sync(clock, addr, buf).map_err(dev),
            None => self.nvme.poke_block(addr, buf).map(|_| 0).map_err(dev),
        }
    }
}

/// Helper environment closed over one slot's extent.
pub struct SlotEnv<'a> {
    store: NvmeStore<'a>,
    tree: Option<&'a BTree>,
}

impl<'a> SlotEnv<'a> {
    pub fn new(
        nvme: &'a mut NvmeSubsystem,
        extent: Extent,
        clock: &'a mut SimTime,
        tree: Option<&'a BTree>,
    ) -> Self {
        SlotEnv {
            store: NvmeStore::timed(nvme, extent, clock),
            tree,
        }
    }

    fn lba(&self, device: u64, lba: u64) -> Result<u64, Trap> {
        if device != 0 || lba >= self.store.extent.block_count {
            return Err(Trap::IsolationFault);
        }
        Ok(lba)
    }
}

impl DatapathEnv for SlotEnv<'_> {
    fn now_ns(&self) -> u64 {
        self.store.clock.as_deref().map_or(0, |c| c.nanos())
    }

    fn block_read(&mut self, device: u64, lba: u64, buf: &mut Block) -> Result<(), Trap> {
        let lba = self.lba(device, lba)?;
        self.store
            .read(lba, buf)
            .map(|_| ())
            .map_err(|_| Trap::IsolationFault)
    }

    fn block_write(&mut self, device: u64, lba: u64, buf: &Block) -> Result<(), Trap> {
        let lba = self.lba(device, lba)?;
        self.store
            .write(lba, buf)
            .map(|_| ())
            .map_err(|_| Trap::IsolationFault)
    }

    fn kv_lookup(&mut self, key: u64, value: &mut [u8; VALUE_SIZE]) -> Result<u64, Trap> {
        let Some(tree) = self.tree else {
            return Ok(2);
        };
        match tree.get(&mut self.store, key) {
            Ok((Some(v), _)) => {
                *value = v;
                Ok(0)
            }
            Ok((None, _)) => Ok(1),
            Err(_) => Err(Trap::BadHelperReturn),
        }
    }
}

/// How a slot serves GET/PUT/DEL.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Engine {
    /// Every data request runs the program with the payload as packet.
    Program,
    /// GET/PUT/DEL go to the native B+ tree over the extent; RAW_DISPATCH
    /// runs the program.
    KvTree,
}

#[derive(Debug)]
pub struct LoadedProgram {
    pub id: u32,
    pub owner: u16,
    pub name: String,
    pub engine: Engine,
    pub verified: VerifiedProgram,
    pub compiled: Compiled,
}

impl LoadedProgram {
    pub fn logic_units(&self) -> u64 {
        self.compiled.cost.logic_units
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SlotStats {
    pub requests: u64,
    pub traps: u64,
    pub busy_ns: u64,
}

#[derive(Debug)]
pub struct Slot {
    pub id: u16,
    pub tenant: u16,
    pub program: Arc<LoadedProgram>,
    pub extent: Extent,
    pub budget: u64,
    pub stats: SlotStats,
    tree: Option<BTree>,
    busy: bool,
    queue: VecDeque<Queued>,
}

/// A request waiting for its slot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Queued {
    pub request: Message,
    pub arrival: SimTime,
    /// Caller's handle for routing the eventual response.
    pub ticket: u64,
}

impl Slot {
    pub fn tree(&self) -> Option<&BTree> {
        self.tree.as_ref()
    }

    pub fn is_busy(&self) -> bool {
        self.busy
    }

    pub fn queued(&self) -> usize {
        self.queue.len()
    }
}

#[derive(Debug, Error)]
pub enum SlotError {
    #[error("authentication failed")]
    AuthFailed,
    #[error("program {0} belongs to another tenant")]
    ForeignProgram(u32),
    #[error("unknown program {0}")]
    UnknownProgram(u32),
    #[error("unknown slot {0}")]
    UnknownSlot(u16),
    #[error("no free extent of {0} blocks")]
    NoCapacity(u64),
    #[error("plan needs {logic_units} logic units, budget is {budget}")]
    BudgetExceeded { logic_units: u64, budget: u64 },
    #[error("image does not decode: {0}")]
    BadImage(String),
    #[error("verifier: {0}")]
    Verifier(#[from] VerifierError),
    #[error("tree: {0}")]
    Tree(#[from] TreeError),
    #[error("slot ids exhausted")]
    SlotIdsExhausted,
}

impl SlotError {
    pub fn status(&self) -> Status {
        match self {
            SlotError::AuthFailed | SlotError::ForeignProgram(_) => Status::AuthFailed,
            SlotError::UnknownSlot(_) => Status::UnknownSlot,
            SlotError::NoCapacity(_)
            | SlotError::BudgetExceeded { .. }
            | SlotError::SlotIdsExhausted => Status::NoCapacity,
            SlotError::BadImage(_) | SlotError::Verifier(_) => Status::VerifierError,
            SlotError::UnknownProgram(_) | SlotError::Tree(_) => Status::BadRequest,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SlotConfig {
    pub lane_width: usize,
    pub queue_depth: usize,
    pub zero_on_free: bool,
    pub limits: Limits,
}

impl Default for SlotConfig {
    fn default() -> Self {
        SlotConfig {
            lane_width: DEFAULT_LANE_WIDTH,
            queue_depth: QUEUE_DEPTH,
            zero_on_free: false,
            limits: Limits::default(),
        }
    }
}

/// Result of offering a request to a slot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Admission {
    /// The slot was idle and is now busy with this request.
    Run,
    Queued,
    Rejected(Message),
}

#[derive(Debug, Clone)]
pub struct Execution {
    pub response: Message,
    pub start: SimTime,
    pub end: SimTime,
    pub trap: Option<Trap>,
}

pub struct SlotManager {
    config: SlotConfig,
    helpers: Arc<HelperTable>,
    nvme: NvmeSubsystem,
    tenants: HashMap<u16, Tenant>,
    programs: BTreeMap<u32, Arc<LoadedProgram>>,
    next_program: u32,
    slots: BTreeMap<u16, Slot>,
    next_slot: u16,
    allocator: ExtentAllocator,
}

impl SlotManager {
    pub fn new(nvme: NvmeSubsystem, helpers: Arc<HelperTable>, config: SlotConfig) -> Self {
        let allocator = ExtentAllocator::new(nvme.device_count(), nvme.capacity_blocks());
        SlotManager {
            config,
            helpers,
            nvme,
            tenants: HashMap::new(),
            programs: BTreeMap::new(),
            next_program: 1,
            slots: BTreeMap::new(),
            next_slot: 1,
            allocator,
        }
    }

    pub fn config(&self) -> &SlotConfig {
        &self.config
    }

    pub fn helpers(&self) -> &Arc<HelperTable> {
        &self.helpers
    }

    pub fn nvme(&self) -> &NvmeSubsystem {
        &self.nvme
    }

    pub fn nvme_mut(&mut self) -> &mut NvmeSubsystem {
        &mut self.nvme
    }

    pub fn add_tenant(&mut self, id: u16, token: Token) {
        self.tenants.insert(id, Tenant::new(id, token));
    }

    pub fn authenticate(&self, tenant: u16, token: &Token) -> Result<(), SlotError> {
        let dummy = [0u8; TOKEN_LEN];
        let (known, expected) = match self.tenants.get(&tenant) {
            Some(t) => (true, &t.token),
            None => (false, &dummy),
        };
        if tokens_match(expected, token) & known {
            Ok(())
        } else {
            Err(SlotError::AuthFailed)
        }
    }

    /// Registers a program without authentication under the next free id.
    pub fn install(
        &mut self,
        owner: u16,
        program: Program,
        engine: Engine,
    ) -> Result<u32, SlotError> {
        while self.programs.contains_key(&self.next_program) {
            self.next_program += 1;
        }
        let id = self.next_program;
        self.install_as(id, owner, program, engine)?;
        self.next_program += 1;
        Ok(id)
    }

    /// Registers a program under a fixed id, replacing any previous holder.
    pub fn install_as(
        &mut self,
        id: u32,
        owner: u16,
        program: Program,
        engine: Engine,
    ) -> Result<u32, SlotError> {
        let verified = verify(&program, &self.helpers, self.config.limits)?;
        let compiled =
            pipeline::compile(&verified, &self.helpers, self.config.lane_width, u64::MAX);
        let name = program.name.clone();
        self.programs.insert(
            id,
            Arc::new(LoadedProgram {
                id,
                owner,
                name,
                engine,
                verified,
                compiled,
            }),
        );
        Ok(id)
    }

    pub fn load_image(
        &mut self,
        tenant: u16,
        token: &Token,
        image: &[u8],
    ) -> Result<u32, SlotError> {
        self.authenticate(tenant, token)?;
        let program = Program::load(image).map_err(|e| SlotError::BadImage(e.to_string()))?;
        let id = self.install(tenant, program, Engine::Program)?;
        log::info!("tenant {tenant} loaded program {id}");
        Ok(id)
    }

    pub fn program(&self, id: u32) -> Option<&Arc<LoadedProgram>> {
        self.programs.get(&id)
    }

    pub fn programs(&self) -> impl Iterator<Item = &Arc<LoadedProgram>> {
        self.programs.values()
    }

    fn fresh_slot_id(&mut self) -> Option<u16> {
        for _ in 0..=u16::MAX {
            let id = self.next_slot;
            self.next_slot = self.next_slot.checked_add(1).unwrap_or(1);
            if id != 0 && !self.slots.contains_key(&id) {
                return Some(id);
            }
        }
        None
    }

    pub fn create_slot(
        &mut self,
        tenant: u16,
        token: &Token,
        program_id: u32,
        blocks: u64,
        budget: u64,
    ) -> Result<u16, SlotError> {
        self.authenticate(tenant, token)?;
        let program = self
            .programs
            .get(&program_id)
            .cloned()
            .ok_or(SlotError::UnknownProgram(program_id))?;
        if program.owner != tenant && program.owner != ADMIN_TENANT && tenant != ADMIN_TENANT {
            return Err(SlotError::ForeignProgram(program_id));
        }
        if program.logic_units() > budget {
            return Err(SlotError::BudgetExceeded {
                logic_units: program.logic_units(),
                budget,
            });
        }
        if self.slots.len() > u16::MAX as usize - 2 {
            return Err(SlotError::SlotIdsExhausted);
        }
        let extent = self
            .allocator
            .allocate(blocks)
            .ok_or(SlotError::NoCapacity(blocks))?;
        let tree = match program.engine {
            Engine::KvTree => {
                match BTree::format(&mut NvmeStore::untimed(&mut self.nvme, extent)) {
                    Ok(t) => Some(t),
                    Err(e) => {
                        self.allocator.release(&extent);
                        return Err(e.into());
                    }
                }
            }
            Engine::Program => None,
        };
        let id = self.fresh_slot_id().ok_or(SlotError::SlotIdsExhausted)?;
        self.slots.insert(
            id,
            Slot {
                id,
                tenant,
                program,
                extent,
                budget,
                stats: SlotStats::default(),
                tree,
                busy: false,
                queue: VecDeque::new(),
            },
        );
        log::info!(
            "tenant {tenant} created slot {id} on device {} lba {}+{}",
            extent.device,
            extent.first_lba,
            blocks
        );
        Ok(id)
    }

    fn owned_slot(&self, tenant: u16, slot: u16) -> Result<&Slot, SlotError> {
        let s = self.slots.get(&slot).ok_or(SlotError::UnknownSlot(slot))?;
        if s.tenant != tenant && tenant != ADMIN_TENANT {
            return Err(SlotError::AuthFailed);
        }
        Ok(s)
    }

    /// Removes a slot and returns the requests still waiting in its queue.
    pub fn delete_slot(
        &mut self,
        tenant: u16,
        token: &Token,
        slot: u16,
    ) -> Result<Vec<Queued>, SlotError> {
        self.authenticate(tenant, token)?;
        self.owned_slot(tenant, slot)?;
        let s = self.slots.remove(&slot).expect("checked above");
        self.allocator.release(&s.extent);
        if self.config.zero_on_free {
            self.nvme
                .zero_range(s.extent.device, s.extent.first_lba, s.extent.block_count)
                .expect("extent lies within the device");
        }
        log::info!("tenant {tenant} deleted slot {slot}");
        Ok(s.queue.into_iter().collect())
    }

    pub fn stats(&self, tenant: u16, token: &Token, slot: u16) -> Result<SlotStats, SlotError> {
        self.authenticate(tenant, token)?;
        Ok(self.owned_slot(tenant, slot)?.stats)
    }

    pub fn slot(&self, id: u16) -> Option<&Slot> {
        self.slots.get(&id)
    }

    pub fn slots(&self) -> impl Iterator<Item = &Slot> {
        self.slots.values()
    }

    /// Untimed bulk insert into a key-value slot.
    pub fn preload(
        &mut self,
        slot: u16,
        entries: impl IntoIterator<Item = (u64, [u8; VALUE_SIZE])>,
    ) -> Result<(), SlotError> {
        let s = self
            .slots
            .get_mut(&slot)
            .ok_or(SlotError::UnknownSlot(slot))?;
        let tree = s.tree.as_mut().ok_or(SlotError::UnknownSlot(slot))?;
        let mut store = NvmeStore::untimed(&mut self.nvme, s.extent);
        for (k, v) in entries {
            tree.put(&mut store, k, &v)?;
        }
        Ok(())
    }

    /// Offers a data request that reached the device at `arrival`.
    pub fn admit(&mut self, req: &Message, arrival: SimTime, ticket: u64) -> Admission {
        let Some(s) = self.slots.get_mut(&req.slot) else {
            return Admission::Rejected(Message::error(
                req,
                Status::UnknownSlot,
                &format!("unknown slot {}", req.slot),
            ));
        };
        if s.tenant != req.tenant && req.tenant != ADMIN_TENANT {
            return Admission::Rejected(Message::error(
                req,
                Status::AuthFailed,
                "slot belongs to another tenant",
            ));
        }
        if !s.busy {
            s.busy = true;
            Admission::Run
        } else if s.queue.len() < self.config.queue_depth {
            s.queue.push_back(Queued {
                request: req.clone(),
                arrival,
                ticket,
            });
            Admission::Queued
        } else {
            Admission::Rejected(Message::error(req, Status::SlotBusy, "slot queue full"))
        }
    }

    /// Marks the running request done. Returns the next queued request, which
    /// the slot is now busy with.
    pub fn finish(&mut self, slot: u16) -> Option<Queued> {
        let s = self.slots.get_mut(&slot)?;
        let next = s.queue.pop_front();
        s.busy = next.is_some();
        next
    }

    /// Runs one request to completion starting at `start`.
    pub fn run(&mut self, req: &Message, start: SimTime) -> Execution {
        let Some(s) = self.slots.get_mut(&req.slot) else {
            return Execution {
                response: Message::error(req, Status::UnknownSlot, "slot gone"),
                start,
                end: start,
                trap: None,
            };
        };
        let mut clock = start;
        self.nvme.set_owner(Some(s.id));
        let (response, trap) = match (s.program.engine, req.opcode) {
            (Engine::KvTree, Opcode::Get | Opcode::Put | Opcode::Del) => {
                let tree = s.tree.as_mut().expect("kv slots own a tree");
                let mut store = NvmeStore::timed(&mut self.nvme, s.extent, &mut clock);
                (kv_request(tree, &mut store, req), None)
            }
            (_, Opcode::Get | Opcode::Put | Opcode::Del | Opcode::RawDispatch) => {
                let mut env = SlotEnv::new(&mut self.nvme, s.extent, &mut clock, s.tree.as_ref());
                let fuel = s.program.verified.max_instructions_executed();
                let mut ctx =
                    ExecutionContext::new(req.payload.clone(), &self.helpers, &mut env, fuel);
                let out = execute(&s.program.verified, &mut ctx);
                match out.trap {
                    Some(t) => {
                        let mut p = vec![t.code()];
                        p.extend_from_slice(format!("{t:?}").as_bytes());
                        (Message::reply(req, Status::Trap, p), Some(t))
                    }
                    None => {
                        let mut p = out.return_value.to_le_bytes().to_vec();
                        p.extend_from_slice(&ctx.mem.output);
                        (Message::reply(req, Status::Ok, p), None)
                    }
                }
            }
            (_, op) => (
                Message::error(
                    req,
                    Status::BadRequest,
                    &format!("{op:?} is not a data opcode"),
                ),
                None,
            ),
        };
        self.nvme.set_owner(None);
        s.stats.requests += 1;
        s.stats.traps += trap.is_some() as u64;
        s.stats.busy_ns += clock - start;
        Execution {
            response,
            start,
            end: clock,
            trap,
        }
    }
}

fn kv_request(tree: &mut BTree, store: &mut dyn BlockStore, req: &Message) -> Message {
    let bad = |what: &str| Message::error(req, Status::BadRequest, what);
    let failed = |e: TreeError| match e {
        TreeError::OutOfSpace => Message::error(req, Status::NoCapacity, "extent full"),
        e => Message::error(req, Status::BadRequest, &e.to_string()),
    };
    match req.opcode {
        Opcode::Get => {
            let Some(key) = payload::parse_key(&req.payload) else {
                return bad("GET payload must be an 8-byte key");
            };
            match tree.get(store, key) {
                Ok((Some(v), _)) => Message::reply(req, Status::Ok, v.to_vec()),
                Ok((None, _)) => Message::error(req, Status::NotFound, "key not found"),
                Err(e) => failed(e),
            }
        }
        Opcode::Put => {
            let Some((key, value)) = payload::parse_put(&req.payload) else {
                return bad("PUT payload must be an 8-byte key and a 128-byte value");
            };
            match tree.put(store, key, &value) {
                Ok(PutOutcome::Inserted) => Message::reply(req, Status::Ok, vec![0]),
                Ok(PutOutcome::Replaced) => Message::reply(req, Status::Ok, vec![1]),
                Err(e) => failed(e),
            }
        }
        Opcode::Del => {
            let Some(key) = payload::parse_key(&req.payload) else {
                return bad("DEL payload must be an 8-byte key");
            };
            match tree.delete(store, key) {
                Ok(DeleteOutcome::Deleted) => Message::reply(req, Status::Ok, Vec::new()),
                Ok(DeleteOutcome::NotFound) => {
                    Message::error(req, Status::NotFound, "key not found")
                }
                Err(e) => failed(e),
            }
        }
        _ => unreachable!("only kv opcodes reach the tree"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ebpf::{assemble, VerifierErrorKind};
    use crate::nvme::{Backing, DeviceConfig};
    use crate::sim::{Distribution, LatencyModel};
    use proptest::prelude::*;

    const TOKEN: Token = [7; TOKEN_LEN];

    fn manager(devices: u32, capacity: u64, zero_on_free: bool) -> SlotManager {
        let cfg = DeviceConfig {
            device_count: devices,
            capacity_blocks: capacity,
            queue_depth: 16,
            backing: Backing::Memory,
            access_log: true,
        };
        let nvme = NvmeSubsystem::new(
            cfg,
            LatencyModel::with_distribution(Distribution::FixedMax),
            1,
        )
        .unwrap();
        let mut m = SlotManager::new(
            nvme,
            Arc::new(HelperTable::standard()),
            SlotConfig {
                zero_on_free,
                ..SlotConfig::default()
            },
        );
        m.add_tenant(1, TOKEN);
        m.add_tenant(2, [9; TOKEN_LEN]);
        m
    }

    fn image(text: &str) -> Vec<u8> {
        assemble("t", text).unwrap().encode()
    }

    fn slot_with(m: &mut SlotManager, text: &str, blocks: u64) -> u16 {
        let p = m.load_image(1, &TOKEN, &image(text)).unwrap();
        m.create_slot(1, &TOKEN, p, blocks, 256).unwrap()
    }

    fn raw(slot: u16, payload: &[u8]) -> Message {
        Message::request(Opcode::RawDispatch, 1, slot, 5, payload.to_vec())
    }

    const ECHO: &str = "mov r6, r1\ncall 3\nmov r2, r0\nmov r1, r6\ncall 4\nmov r0, 0\nexit\n";

    #[test]
    fn load_image_auth_and_verify() {
        let mut m = manager(1, 1000, false);
        assert_eq!(
            m.load_image(1, &TOKEN, &image("mov r0, 0\nexit")).unwrap(),
            1
        );
        assert!(matches!(
            m.load_image(1, &[0; TOKEN_LEN], &image("exit")),
            Err(SlotError::AuthFailed)
        ));
        assert!(matches!(
            m.load_image(77, &TOKEN, &image("exit")),
            Err(SlotError::AuthFailed)
        ));
        let e = m.load_image(1, &TOKEN, &image("l: ja l\n")).unwrap_err();
        match e {
            SlotError::Verifier(v) => assert_eq!(v.kind, VerifierErrorKind::UnboundedLoop),
            other => panic!("{other:?}"),
        }
        assert_eq!(m.programs().count(), 1);
        assert_eq!(
            m.load_image(1, &TOKEN, &image("mov r0, 0\nexit")).unwrap(),
            2
        );
    }

    #[test]
    fn tokens_compare_whole() {
        let mut other = TOKEN;
        other[31] ^= 1;
        assert!(!tokens_match(&TOKEN, &other));
        assert!(tokens_match(&TOKEN, &TOKEN));
        assert!(format!("{:?}", Tenant::new(1, TOKEN)).contains("redacted"));
    }

    #[test]
    fn budget_is_enforced() {
        let mut m = manager(1, 1000, false);
        let p = m.load_image(1, &TOKEN, &image(ECHO)).unwrap();
        let units = m.program(p).unwrap().logic_units();
        let e = m.create_slot(1, &TOKEN, p, 10, units - 1).unwrap_err();
        assert!(matches!(e, SlotError::BudgetExceeded { .. }));
        assert_eq!(e.status(), Status::NoCapacity);
        assert!(m.create_slot(1, &TOKEN, p, 10, units).is_ok());
    }

    #[test]
    fn second_large_extent_moves_to_next_device() {
        let mut one = manager(1, 1000, false);
        let p = one
            .load_image(1, &TOKEN, &image("mov r0, 0\nexit"))
            .unwrap();
        one.create_slot(1, &TOKEN, p, 600, 256).unwrap();
        assert!(matches!(
            one.create_slot(1, &TOKEN, p, 600, 256),
            Err(SlotError::NoCapacity(600))
        ));

        let mut a = ExtentAllocator::new(2, 1000);
        let first = a.allocate(600).unwrap();
        let second = a.allocate(600).unwrap();
        assert_eq!((first.device, second.device), (0, 1));
        assert!(a.allocate(600).is_none());
        assert_eq!(a.allocate(400).unwrap().device, 0);
    }

    #[test]
    fn foreign_programs_and_slots_are_refused() {
        let mut m = manager(1, 1000, false);
        let p = m.load_image(1, &TOKEN, &image("mov r0, 0\nexit")).unwrap();
        assert!(matches!(
            m.create_slot(2, &[9; TOKEN_LEN], p, 10, 256),
            Err(SlotError::ForeignProgram(_))
        ));
        let s = m.create_slot(1, &TOKEN, p, 10, 256).unwrap();
        assert!(matches!(
            m.stats(2, &[9; TOKEN_LEN], s),
            Err(SlotError::AuthFailed)
        ));
        let req = Message::request(Opcode::RawDispatch, 2, s, 1, vec![]);
        assert!(
            matches!(m.admit(&req, SimTime(0), 0), Admission::Rejected(r) if r.status == Status::AuthFailed)
        );
    }

    #[test]
    fn echo_returns_payload() {
        let mut m = manager(1, 1000, false);
        let s = slot_with(&mut m, ECHO, 4);
        let req = raw(s, b"hello slot");
        assert_eq!(m.admit(&req, SimTime(0), 0), Admission::Run);
        let ex = m.run(&req, SimTime(0));
        assert_eq!(ex.response.status, Status::Ok);
        let (r0, emitted) = payload::parse_dispatch(&ex.response.payload).unwrap();
        assert_eq!((r0, emitted), (0, &b"hello slot"[..]));
        assert_eq!(ex.response.request_id, 5);
    }

    #[test]
    fn out_of_extent_read_traps_without_touching_neighbour() {
        let mut m = manager(1, 1000, false);
        let s1 = slot_with(
            &mut m,
            "mov r1, 0\nmov r2, 16\nmov r3, 0\ncall 1\nexit\n",
            16,
        );
        let s2 = slot_with(&mut m, "mov r0, 0\nexit", 16);
        let ex = m.run(&raw(s1, &[]), SimTime(0));
        assert_eq!(ex.trap, Some(Trap::IsolationFault));
        assert_eq!(ex.response.status, Status::Trap);
        assert_eq!(ex.response.payload[0], Trap::IsolationFault.code());
        let neighbour = m.slot(s2).unwrap().extent;
        let log = m.nvme().access_log().unwrap();
        assert!(log
            .iter()
            .all(|r| !neighbour.contains(BlockAddress::new(r.device, r.lba))));
        let stats = m.stats(1, &TOKEN, s1).unwrap();
        assert_eq!((stats.requests, stats.traps), (1, 1));
    }

    #[test]
    fn in_extent_reads_stay_in_extent() {
        let mut m = manager(2, 100, false);
        let text = "mov r1, 0\nmov r2, 15\nmov r3, 0\ncall 1\nmov r1, 0\nmov r2, 0\nmov r3, 0\ncall 2\nexit\n";
        let s = slot_with(&mut m, text, 16);
        let ex = m.run(&raw(s, &[]), SimTime(0));
        assert_eq!(ex.response.status, Status::Ok);
        assert_eq!(ex.end.nanos(), 16_000);
        let extent = m.slot(s).unwrap().extent;
        let log = m.nvme().access_log().unwrap();
        assert_eq!(log.len(), 2);
        assert!(log
            .iter()
            .all(|r| extent.contains(BlockAddress::new(r.device, r.lba)) && r.owner == Some(s)));
    }

    #[test]
    fn stats_count_requests_traps_and_busy_time() {
        let mut m = manager(1, 1000, false);
        let s = slot_with(&mut m, "mov r1, 0\nmov r2, 0\nmov r3, 0\ncall 1\ncall 3\nmov r1, 1\ndiv64 r1, r0\nmov r0, r1\nexit\n", 4);
        assert_eq!(m.stats(1, &TOKEN, s).unwrap(), SlotStats::default());
        for p in [&b"a"[..], b"", b"bc"] {
            m.run(&raw(s, p), SimTime(0));
        }
        let st = m.stats(1, &TOKEN, s).unwrap();
        assert_eq!((st.requests, st.traps), (3, 1));
        assert_eq!(st.busy_ns, 3 * 8_000);
    }

    #[test]
    fn queue_is_bounded_and_drained_on_delete() {
        let mut m = manager(1, 1000, false);
        let s = slot_with(&mut m, "mov r0, 0\nexit", 4);
        let req = raw(s, &[]);
        assert_eq!(m.admit(&req, SimTime(0), 0), Admission::Run);
        for _ in 0..QUEUE_DEPTH {
            assert_eq!(m.admit(&req, SimTime(0), 0), Admission::Queued);
        }
        assert!(
            matches!(m.admit(&req, SimTime(0), 0), Admission::Rejected(r) if r.status == Status::SlotBusy)
        );
        assert!(m.finish(s).is_some());
        assert_eq!(m.slot(s).unwrap().queued(), QUEUE_DEPTH - 1);
        let drained = m.delete_slot(1, &TOKEN, s).unwrap();
        assert_eq!(drained.len(), QUEUE_DEPTH - 1);
        assert!(
            matches!(m.admit(&req, SimTime(0), 0), Admission::Rejected(r) if r.status == Status::UnknownSlot)
        );
        assert!(matches!(
            m.delete_slot(1, &TOKEN, s),
            Err(SlotError::UnknownSlot(_))
        ));
    }

    #[test]
    fn freed_blocks_keep_data_unless_zeroing_is_on() {
        for zero in [false, true] {
            let mut m = manager(1, 64, zero);
            let p = m
                .install(
                    ADMIN_TENANT,
                    assemble("kv", "mov r0, 0\nexit").unwrap(),
                    Engine::KvTree,
                )
                .unwrap();
            let s = m.create_slot(1, &TOKEN, p, 64, 256).unwrap();
            let extent = m.slot(s).unwrap().extent;
            m.delete_slot(1, &TOKEN, s).unwrap();
            let sb = m.nvme().peek_block(extent.translate(0).unwrap()).unwrap();
            assert_eq!(sb.iter().all(|&b| b == 0), zero);
        }
    }

    #[test]
    fn kv_slot_serves_get_put_del() {
        let mut m = manager(1, 256, false);
        let p = m
            .install(
                ADMIN_TENANT,
                assemble("kv", "mov r0, 0\nexit").unwrap(),
                Engine::KvTree,
            )
            .unwrap();
        let s = m.create_slot(1, &TOKEN, p, 256, 256).unwrap();
        let put = Message::request(Opcode::Put, 1, s, 1, payload::put(42, &[3; VALUE_SIZE]));
        assert_eq!(m.run(&put, SimTime(0)).response.payload, vec![0]);
        assert_eq!(m.run(&put, SimTime(0)).response.payload, vec![1]);
        let get = Message::request(Opcode::Get, 1, s, 2, payload::key(42));
        let ex = m.run(&get, SimTime(1_000_000));
        assert_eq!(ex.response.payload, vec![3; VALUE_SIZE]);
        assert_eq!(ex.end.nanos() - 1_000_000, 8_000);
        let del = Message::request(Opcode::Del, 1, s, 3, payload::key(42));
        assert_eq!(m.run(&del, SimTime(2_000_000)).response.status, Status::Ok);
        assert_eq!(
            m.run(&get, SimTime(3_000_000)).response.status,
            Status::NotFound
        );
        let bad = Message::request(Opcode::Get, 1, s, 4, vec![1, 2]);
        assert_eq!(
            m.run(&bad, SimTime(4_000_000)).response.status,
            Status::BadRequest
        );
    }

    proptest! {
        #[test]
        fn live_extents_stay_disjoint(ops in proptest::collection::vec((any::<bool>(), 1u64..400, any::<prop::sample::Index>()), 1..120)) {
            let mut a = ExtentAllocator::new(3, 1000);
            let mut live: Vec<Extent> = Vec::new();
            for (alloc, size, pick) in ops {
                if alloc || live.is_empty() {
                    let fits_somewhere = (0..3).any(|d| a.first_fit(d, size).is_some());
                    match a.allocate(size) {
                        Some(e) => {
                            prop_assert!(e.end() <= 1000 && e.block_count == size);
                            live.push(e);
                        }
                        None => prop_assert!(!fits_somewhere),
                    }
                } else {
                    let e = live.swap_remove(pick.index(live.len()));
                    prop_assert!(a.release(&e));
                }
                for (i, x) in live.iter().enumerate() {
                    for y in &live[i + 1..] {
                        prop_assert!(!x.overlaps(y));
                    }
                }
                prop_assert_eq!(a.allocated().count(), live.len());
            }
        }
    }
}
