//! The daemon core: datagrams in, slot executions on the virtual clock,
//! datagrams out.
//!
//! A request submitted at client time `t` reaches the device at
//! `t + rtt/2`, runs when its slot is free, and its response reaches the
//! client `rtt/2` after the slot finishes. Control requests cost no device
//! time.

use std::sync::Arc;

use thiserror::Error;

use crate::ebpf::HelperTable;
use crate::nvme::{DeviceConfig, NvmeError, NvmeSubsystem};
use crate::programs;
use crate::sim::{EventQueue, LatencyModel, SimError, SimTime};
use crate::slot::{
    Admission, Engine, Queued, SlotConfig, SlotError, SlotManager, Token, ADMIN_TENANT,
};
use crate::wire::{payload, Message, Opcode, Status, TOKEN_LEN};

/// Program ids of the programs every daemon starts with, owned by tenant 0.
pub const BUILTIN_KV: u32 = 0xF000_0001;
pub const BUILTIN_LOGFILTER: u32 = 0xF000_0002;
pub const BUILTIN_POINTER_CHASE: u32 = 0xF000_0003;
pub const BUILTIN_ECHO: u32 = 0xF000_0004;

/// Resolves a built-in program name as accepted on the command line.
pub fn builtin_id(name: &str) -> Option<u32> {
    match name {
        "kv" | "kv-get" => Some(BUILTIN_KV),
        "logfilter" => Some(BUILTIN_LOGFILTER),
        "pointer-chase" => Some(BUILTIN_POINTER_CHASE),
        "echo" => Some(BUILTIN_ECHO),
        _ => None,
    }
}

#[derive(Debug, Clone)]
pub struct DpuConfig {
    pub latency: LatencyModel,
    pub devices: DeviceConfig,
    pub seed: u64,
    pub slots: SlotConfig,
    pub admin_token: Token,
    pub tenants: Vec<(u16, Token)>,
    /// Keep a [`DispatchRecord`] per data request.
    pub record_dispatch: bool,
}

impl Default for DpuConfig {
    fn default() -> Self {
        DpuConfig {
            latency: LatencyModel::default(),
            devices: DeviceConfig::default(),
            seed: 0,
            slots: SlotConfig::default(),
            admin_token: [0; TOKEN_LEN],
            tenants: Vec::new(),
            record_dispatch: false,
        }
    }
}

#[derive(Debug, Error)]
pub enum DpuError {
    #[error(transparent)]
    Nvme(#[from] NvmeError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("built-in program: {0}")]
    Builtin(#[from] SlotError),
}

/// One data request as the device saw it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DispatchRecord {
    pub request_id: u64,
    pub tenant: u16,
    pub slot: u16,
    pub opcode: Opcode,
    pub arrival: SimTime,
    pub start: SimTime,
    pub end: SimTime,
    pub status: Status,
}

/// A response datagram reaching its client.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Delivery {
    pub at: SimTime,
    pub ticket: u64,
    pub bytes: Vec<u8>,
}

#[derive(Debug)]
enum Event {
    Arrive {
        ticket: u64,
        bytes: Vec<u8>,
    },
    SlotDone {
        slot: u16,
        ticket: u64,
        arrival: SimTime,
        response: Message,
    },
    Deliver {
        ticket: u64,
        bytes: Vec<u8>,
    },
}

pub struct Dpu {
    slots: SlotManager,
    events: EventQueue<Event>,
    half_in: u64,
    half_out: u64,
    next_ticket: u64,
    dispatch_log: Option<Vec<DispatchRecord>>,
    dropped: u64,
}

impl Dpu {
    pub fn new(config: DpuConfig) -> Result<Dpu, DpuError> {
        config.latency.validate()?;
        let nvme = NvmeSubsystem::new(config.devices.clone(), config.latency, config.seed)?;
        let mut slots = SlotManager::new(
            nvme,
            Arc::new(HelperTable::standard()),
            config.slots.clone(),
        );
        slots.add_tenant(ADMIN_TENANT, config.admin_token);
        for (id, token) in &config.tenants {
            slots.add_tenant(*id, *token);
        }
        slots.install_as(BUILTIN_KV, ADMIN_TENANT, programs::kv_get(), Engine::KvTree)?;
        slots.install_as(
            BUILTIN_LOGFILTER,
            ADMIN_TENANT,
            programs::logfilter(),
            Engine::Program,
        )?;
        slots.install_as(
            BUILTIN_POINTER_CHASE,
            ADMIN_TENANT,
            programs::pointer_chase(),
            Engine::Program,
        )?;
        slots.install_as(
            BUILTIN_ECHO,
            ADMIN_TENANT,
            programs::echo(),
            Engine::Program,
        )?;
        let (half_in, half_out) = config.latency.rtt_halves();
        Ok(Dpu {
            slots,
            events: EventQueue::new(),
            half_in,
            half_out,
            next_ticket: 0,
            dispatch_log: config.record_dispatch.then(Vec::new),
            dropped: 0,
        })
    }

    pub fn now(&self) -> SimTime {
        self.events.now()
    }

    pub fn slots(&self) -> &SlotManager {
        &self.slots
    }

    pub fn slots_mut(&mut self) -> &mut SlotManager {
        &mut self.slots
    }

    pub fn dispatch_log(&self) -> &[DispatchRecord] {
        self.dispatch_log.as_deref().unwrap_or(&[])
    }

    /// Datagrams dropped because no header could be recovered.
    pub fn dropped(&self) -> u64 {
        self.dropped
    }

    pub fn is_idle(&self) -> bool {
        self.events.is_empty()
    }

    /// Sends a datagram at client time `at` (clamped to now). The returned
    /// ticket tags its response.
    pub fn submit(&mut self, bytes: Vec<u8>, at: SimTime) -> u64 {
        let ticket = self.next_ticket;
        self.next_ticket += 1;
        let at = at.max(self.now()) + self.half_in;
        self.events
            .schedule_at(at, Event::Arrive { ticket, bytes })
            .expect("arrival lies in the future");
        ticket
    }

    /// Advances virtual time to the next response delivery.
    pub fn step(&mut self) -> Option<Delivery> {
        while let Some(fired) = self.events.pop() {
            let now = fired.at;
            self.slots.nvme_mut().retire(now);
            match fired.payload {
                Event::Arrive { ticket, bytes } => self.arrive(ticket, &bytes, now),
                Event::SlotDone {
                    slot,
                    ticket,
                    arrival,
                    response,
                } => {
                    self.respond(ticket, response, arrival, now);
                    if let Some(next) = self.slots.finish(slot) {
                        self.start(next, now);
                    }
                }
                Event::Deliver { ticket, bytes } => {
                    return Some(Delivery {
                        at: now,
                        ticket,
                        bytes,
                    })
                }
            }
        }
        None
    }

    /// Processes every pending event.
    pub fn run_until_idle(&mut self) -> Vec<Delivery> {
        std::iter::from_fn(|| self.step()).collect()
    }

    fn respond(&mut self, ticket: u64, mut response: Message, arrival: SimTime, now: SimTime) {
        if response.wants_timing() {
            response
                .payload
                .extend_from_slice(&arrival.nanos().to_le_bytes());
            response
                .payload
                .extend_from_slice(&now.nanos().to_le_bytes());
        }
        let bytes = response.encode();
        self.events
            .schedule(self.half_out, Event::Deliver { ticket, bytes })
            .expect("delivery lies in the future");
    }

    fn arrive(&mut self, ticket: u64, bytes: &[u8], now: SimTime) {
        let req = match Message::decode(bytes) {
            Ok(m) => m,
            Err(e) => {
                match Message::recover_header(bytes) {
                    Some(h) => {
                        let mut req = Message::request(
                            Opcode::ErrorResp,
                            h.tenant,
                            h.slot,
                            h.request_id,
                            Vec::new(),
                        );
                        req.reserved = bytes[11];
                        let resp = Message::error(&req, Status::BadRequest, &e.to_string());
                        self.respond(ticket, resp, now, now);
                    }
                    None => {
                        log::debug!("dropping datagram: {e}");
                        self.dropped += 1;
                    }
                }
                return;
            }
        };
        match req.opcode {
            Opcode::Get | Opcode::Put | Opcode::Del | Opcode::RawDispatch => {
                match self.slots.admit(&req, now, ticket) {
                    Admission::Run => self.start(
                        Queued {
                            request: req,
                            arrival: now,
                            ticket,
                        },
                        now,
                    ),
                    Admission::Queued => {}
                    Admission::Rejected(resp) => {
                        self.record(&req, now, now, now, resp.status);
                        self.respond(ticket, resp, now, now);
                    }
                }
            }
            op if op.is_control() => {
                let resp = self.control(&req, now);
                self.respond(ticket, resp, now, now);
            }
            Opcode::ErrorResp => {
                let resp = Message::error(&req, Status::BadRequest, "ERROR_RESP is response-only");
                self.respond(ticket, resp, now, now);
            }
            op => {
                let resp = Message::error(
                    &req,
                    Status::UnknownOpcode,
                    &format!("unknown opcode {:#04x}", op.code()),
                );
                self.respond(ticket, resp, now, now);
            }
        }
    }

    fn start(&mut self, q: Queued, now: SimTime) {
        let ex = self.slots.run(&q.request, now);
        self.record(&q.request, q.arrival, ex.start, ex.end, ex.response.status);
        self.events
            .schedule_at(
                ex.end,
                Event::SlotDone {
                    slot: q.request.slot,
                    ticket: q.ticket,
                    arrival: q.arrival,
                    response: ex.response,
                },
            )
            .expect("slot completion lies in the future");
    }

    fn record(
        &mut self,
        req: &Message,
        arrival: SimTime,
        start: SimTime,
        end: SimTime,
        status: Status,
    ) {
        if let Some(log) = &mut self.dispatch_log {
            log.push(DispatchRecord {
                request_id: req.request_id,
                tenant: req.tenant,
                slot: req.slot,
                opcode: req.opcode,
                arrival,
                start,
                end,
                status,
            });
        }
    }

    fn control(&mut self, req: &Message, now: SimTime) -> Message {
        let Some((token, rest)) = payload::parse_token(&req.payload) else {
            return Message::error(
                req,
                Status::BadRequest,
                "control payload must start with a 32-byte token",
            );
        };
        let fail = |e: SlotError| Message::error(req, e.status(), &e.to_string());
        match req.opcode {
            Opcode::LoadProg => match self.slots.load_image(req.tenant, &token, rest) {
                Ok(id) => Message::reply(req, Status::Ok, id.to_le_bytes().to_vec()),
                Err(e) => fail(e),
            },
            Opcode::CreateSlot => {
                let Some((program, blocks, budget)) = payload::parse_create_slot(rest) else {
                    return Message::error(
                        req,
                        Status::BadRequest,
                        "CREATE_SLOT needs program u32, blocks u64, budget u32",
                    );
                };
                match self
                    .slots
                    .create_slot(req.tenant, &token, program, blocks, budget as u64)
                {
                    Ok(id) => Message::reply(req, Status::Ok, id.to_le_bytes().to_vec()),
                    Err(e) => fail(e),
                }
            }
            Opcode::DeleteSlot => match self.slots.delete_slot(req.tenant, &token, req.slot) {
                Ok(drained) => {
                    for q in drained {
                        let resp = Message::error(&q.request, Status::UnknownSlot, "slot gone");
                        self.respond(q.ticket, resp, q.arrival, now);
                    }
                    Message::reply(req, Status::Ok, Vec::new())
                }
                Err(e) => fail(e),
            },
            Opcode::Stats => match self.slots.stats(req.tenant, &token, req.slot) {
                Ok(s) => Message::reply(
                    req,
                    Status::Ok,
                    payload::stats(s.requests, s.traps, s.busy_ns),
                ),
                Err(e) => fail(e),
            },
            _ => unreachable!("only control opcodes reach here"),
        }
    }
}
