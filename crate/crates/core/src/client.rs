//! Client library: typed requests, retries, workload generation and
//! benchmark reports.
//!
//! Clients route every request themselves by `(tenant, slot)`; the daemon
//! never picks a slot. Retries use a fresh request id, so a request whose
//! response was lost may have executed more than once.

use std::collections::HashMap;
use std::io;
use std::net::{SocketAddr, UdpSocket};
use std::path::Path;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, Zipf};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dpu::{Dpu, BUILTIN_KV, BUILTIN_LOGFILTER, BUILTIN_POINTER_CHASE};
use crate::kv::{Value, VALUE_SIZE};
use crate::programs::{self, RECORD_SIZE};
use crate::slot::{SlotStats, Token};
use crate::wire::{payload, Message, Opcode, Status, FLAG_TIMING, HEADER_LEN, MAX_PAYLOAD};

/// Moves datagrams between a client and a daemon.
pub trait Transport {
    fn send(&mut self, datagram: &[u8]) -> io::Result<()>;
    /// Next response datagram, or `None` once `timeout` passes.
    fn recv(&mut self, timeout: Duration) -> io::Result<Option<Vec<u8>>>;
}

/// In-process transport: the daemon runs on the caller's thread and its
/// clock jumps from event to event. A lost response shows up as an
/// immediate timeout.
pub struct VirtualTransport {
    pub dpu: Dpu,
}

impl VirtualTransport {
    pub fn new(dpu: Dpu) -> Self {
        VirtualTransport { dpu }
    }
}

impl Transport for VirtualTransport {
    fn send(&mut self, datagram: &[u8]) -> io::Result<()> {
        let now = self.dpu.now();
        self.dpu.submit(datagram.to_vec(), now);
        Ok(())
    }

    fn recv(&mut self, _timeout: Duration) -> io::Result<Option<Vec<u8>>> {
        Ok(self.dpu.step().map(|d| d.bytes))
    }
}

pub struct UdpTransport {
    socket: UdpSocket,
    buf: Vec<u8>,
}

impl UdpTransport {
    pub fn connect(endpoint: &str) -> io::Result<Self> {
        let target: SocketAddr = endpoint.parse().map_err(|e| {
            io::Error::new(
                io::ErrorKind::InvalidInput,
                format!("endpoint `{endpoint}`: {e}"),
            )
        })?;
        let local = if target.is_ipv4() {
            "0.0.0.0:0"
        } else {
            "[::]:0"
        };
        let socket = UdpSocket::bind(local)?;
        socket.connect(target)?;
        Ok(UdpTransport {
            socket,
            buf: vec![0; HEADER_LEN + MAX_PAYLOAD + 64],
        })
    }
}

impl Transport for UdpTransport {
    fn send(&mut self, datagram: &[u8]) -> io::Result<()> {
        match self.socket.send(datagram) {
            // ICMP unreachable from an earlier datagram: treat as loss.
            Err(e) if e.kind() == io::ErrorKind::ConnectionRefused => Ok(()),
            r => r.map(|_| ()),
        }
    }

    fn recv(&mut self, timeout: Duration) -> io::Result<Option<Vec<u8>>> {
        self.socket
            .set_read_timeout(Some(timeout.max(Duration::from_millis(1))))?;
        match self.socket.recv(&mut self.buf) {
            Ok(n) => Ok(Some(self.buf[..n].to_vec())),
            Err(e)
                if matches!(
                    e.kind(),
                    io::ErrorKind::WouldBlock
                        | io::ErrorKind::TimedOut
                        | io::ErrorKind::ConnectionRefused
                ) =>
            {
                Ok(None)
            }
            Err(e) => Err(e),
        }
    }
}

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("no response after {attempts} attempts")]
    Timeout { attempts: u32 },
    #[error("{status}: {detail}")]
    Status { status: Status, detail: String },
    #[error("malformed response: {0}")]
    Protocol(String),
    #[error("no token configured (set HYPERION_TOKEN or client.token)")]
    NoToken,
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl ClientError {
    /// Process exit code: 1 not found, 2 auth or protocol error, 3 timeout.
    pub fn exit_code(&self) -> i32 {
        match self {
            ClientError::Status {
                status: Status::NotFound,
                ..
            } => 1,
            ClientError::Timeout { .. } => 3,
            _ => 2,
        }
    }
}

/// A response with the server's virtual receive and send times.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Timed {
    pub message: Message,
    /// Body without the timing trailer.
    pub body: Vec<u8>,
    pub server_recv_ns: u64,
    pub server_send_ns: u64,
}

impl Timed {
    /// End-to-end virtual latency including the network round trip.
    pub fn latency_ns(&self, rtt_ns: u64) -> u64 {
        self.server_send_ns - self.server_recv_ns + rtt_ns
    }
}

pub struct Client<T: Transport> {
    pub transport: T,
    pub tenant: u16,
    pub token: Option<Token>,
    pub timeout: Duration,
    pub retries: u32,
    /// Network round trip added to server-side timings.
    pub rtt_ns: u64,
    next_id: u64,
}

impl<T: Transport> Client<T> {
    pub fn new(transport: T, tenant: u16, token: Option<Token>) -> Self {
        Client {
            transport,
            tenant,
            token,
            timeout: Duration::from_millis(200),
            retries: 3,
            rtt_ns: 1_000,
            next_id: 1,
        }
    }

    pub fn fresh_id(&mut self) -> u64 {
        let id = self.next_id;
        self.next_id += 1;
        id
    }

    fn token(&self) -> Result<Token, ClientError> {
        self.token.ok_or(ClientError::NoToken)
    }

    /// Sends one request and waits for its response, retrying on timeout.
    pub fn call(&mut self, opcode: Opcode, slot: u16, body: Vec<u8>) -> Result<Timed, ClientError> {
        let attempts = self.retries + 1;
        for _ in 0..attempts {
            let mut req =
                Message::request(opcode, self.tenant, slot, self.fresh_id(), body.clone());
            req.reserved = FLAG_TIMING;
            self.transport.send(&req.encode())?;
            while let Some(bytes) = self.transport.recv(self.timeout)? {
                let Ok(m) = Message::decode(&bytes) else {
                    continue;
                };
                if m.request_id != req.request_id {
                    continue;
                }
                let (body, timing) = m.body_and_timing();
                let (recv, send) =
                    timing.ok_or_else(|| ClientError::Protocol("missing timing trailer".into()))?;
                return Ok(Timed {
                    body: body.to_vec(),
                    server_recv_ns: recv,
                    server_send_ns: send,
                    message: m,
                });
            }
        }
        Err(ClientError::Timeout { attempts })
    }

    /// Like [`call`](Self::call) but turns non-OK statuses into errors.
    pub fn call_ok(
        &mut self,
        opcode: Opcode,
        slot: u16,
        body: Vec<u8>,
    ) -> Result<Timed, ClientError> {
        let t = self.call(opcode, slot, body)?;
        if t.message.status != Status::Ok {
            return Err(ClientError::Status {
                status: t.message.status,
                detail: t.message.detail(),
            });
        }
        Ok(t)
    }

    pub fn get(&mut self, slot: u16, key: u64) -> Result<(Option<Value>, Timed), ClientError> {
        let t = self.call(Opcode::Get, slot, payload::key(key))?;
        match t.message.status {
            Status::Ok => {
                let v: Value = t.body.as_slice().try_into().map_err(|_| {
                    ClientError::Protocol(format!("GET value of {} bytes", t.body.len()))
                })?;
                Ok((Some(v), t))
            }
            Status::NotFound => Ok((None, t)),
            status => Err(ClientError::Status {
                status,
                detail: t.message.detail(),
            }),
        }
    }

    /// Returns true if the key was already present.
    pub fn put(&mut self, slot: u16, key: u64, value: &Value) -> Result<bool, ClientError> {
        let t = self.call_ok(Opcode::Put, slot, payload::put(key, value))?;
        Ok(t.body.first() == Some(&1))
    }

    /// Returns false if the key was absent.
    pub fn del(&mut self, slot: u16, key: u64) -> Result<bool, ClientError> {
        let t = self.call(Opcode::Del, slot, payload::key(key))?;
        match t.message.status {
            Status::Ok => Ok(true),
            Status::NotFound => Ok(false),
            status => Err(ClientError::Status {
                status,
                detail: t.message.detail(),
            }),
        }
    }

    /// Runs the slot's program on `packet`; returns r0 and the emitted bytes.
    pub fn dispatch(
        &mut self,
        slot: u16,
        packet: Vec<u8>,
    ) -> Result<(u64, Vec<u8>, Timed), ClientError> {
        let t = self.call_ok(Opcode::RawDispatch, slot, packet)?;
        let (r0, out) = payload::parse_dispatch(&t.body)
            .ok_or_else(|| ClientError::Protocol("short dispatch reply".into()))?;
        let out = out.to_vec();
        Ok((r0, out, t))
    }

    pub fn load_program(&mut self, image: &[u8]) -> Result<u32, ClientError> {
        let token = self.token()?;
        let t = self.call_ok(Opcode::LoadProg, 0, payload::load_prog(&token, image))?;
        payload::parse_u32(&t.body).ok_or_else(|| ClientError::Protocol("bad program id".into()))
    }

    pub fn create_slot(
        &mut self,
        program: u32,
        blocks: u64,
        budget: u32,
    ) -> Result<u16, ClientError> {
        let token = self.token()?;
        let t = self.call_ok(
            Opcode::CreateSlot,
            0,
            payload::create_slot(&token, program, blocks, budget),
        )?;
        payload::parse_u16(&t.body).ok_or_else(|| ClientError::Protocol("bad slot id".into()))
    }

    pub fn delete_slot(&mut self, slot: u16) -> Result<(), ClientError> {
        let token = self.token()?;
        self.call_ok(Opcode::DeleteSlot, slot, token.to_vec())
            .map(|_| ())
    }

    pub fn stats(&mut self, slot: u16) -> Result<SlotStats, ClientError> {
        let token = self.token()?;
        let t = self.call_ok(Opcode::Stats, slot, token.to_vec())?;
        let (requests, traps, busy_ns) = payload::parse_stats(&t.body)
            .ok_or_else(|| ClientError::Protocol("bad stats".into()))?;
        Ok(SlotStats {
            requests,
            traps,
            busy_ns,
        })
    }
}

/// Deterministic value stored under `key` by generated workloads.
pub fn value_for(key: u64) -> Value {
    let mut v = [0u8; VALUE_SIZE];
    for chunk in v.chunks_exact_mut(8) {
        chunk.copy_from_slice(&key.to_le_bytes());
    }
    v
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WorkloadKind {
    KvUniform,
    KvZipf,
    PointerChase,
    LogFilter,
}

/// What to run. Loaded from TOML with `--spec`; every field has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkloadSpec {
    pub kind: WorkloadKind,
    /// Zipf exponent for `kv-zipf`.
    pub theta: f64,
    /// Hops per pointer-chase operation.
    pub depth: u64,
    /// Chase inside the slot program (true) or hop by hop from the client.
    pub offload: bool,
    /// Fraction of generated log records that match.
    pub match_ratio: f64,
    pub get: f64,
    pub put: f64,
    pub delete: f64,
    pub key_space: u64,
    pub op_count: u64,
    /// Outstanding requests; worker `i` always targets `slots[i % slots.len()]`.
    pub concurrency: usize,
    /// Existing slots to target. Empty: provision `slot_count` new ones.
    pub slots: Vec<u16>,
    pub slot_count: usize,
    pub blocks_per_slot: u64,
    pub budget: u32,
    pub seed: u64,
    pub max_error_rate: f64,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        WorkloadSpec {
            kind: WorkloadKind::KvUniform,
            theta: 0.99,
            depth: 5,
            offload: true,
            match_ratio: 0.3,
            get: 1.0,
            put: 0.0,
            delete: 0.0,
            key_space: 4096,
            op_count: 10_000,
            concurrency: 1,
            slots: Vec::new(),
            slot_count: 1,
            blocks_per_slot: 2048,
            budget: u32::MAX,
            seed: 0,
            max_error_rate: 0.01,
        }
    }
}

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid workload: {0}")]
    Spec(String),
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error("aborted: {errors} errors in {done} operations exceeds the {limit} error rate")]
    ErrorRate { errors: u64, done: u64, limit: f64 },
    #[error("trace: {0}")]
    Trace(#[from] csv::Error),
}

impl WorkloadSpec {
    pub fn from_toml(text: &str) -> Result<Self, BenchError> {
        let spec: WorkloadSpec =
            toml::from_str(text).map_err(|e| BenchError::Spec(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        let bad = |m: &str| Err(BenchError::Spec(m.into()));
        let fr = [self.get, self.put, self.delete];
        if fr.iter().any(|f| !(0.0..=1.0).contains(f))
            || (fr.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return bad("get, put and delete fractions must be in [0, 1] and sum to 1");
        }
        if self.concurrency == 0 {
            return bad("concurrency must be at least 1");
        }
        if self.key_space == 0 {
            return bad("key_space must be at least 1");
        }
        if self.slots.is_empty() && self.slot_count == 0 {
            return bad("need slots or slot_count");
        }
        if self.kind == WorkloadKind::KvZipf && (self.theta.is_nan() || self.theta <= 0.0) {
            return bad("theta must be positive");
        }
        if self.kind == WorkloadKind::PointerChase
            && (self.depth == 0
                || self.depth > programs::MAX_CHASE_DEPTH
                || self.blocks_per_slot < 2)
        {
            return bad("pointer-chase needs 1 <= depth <= 16 and at least 2 blocks per slot");
        }
        if !(0.0..=1.0).contains(&self.match_ratio) || !(0.0..=1.0).contains(&self.max_error_rate) {
            return bad("ratios must lie in [0, 1]");
        }
        Ok(())
    }
}

/// One row of the per-operation CSV trace.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub request_id: u64,
    pub opcode: u8,
    pub key: u64,
    pub submit_ns: u64,
    pub complete_ns: u64,
    pub status: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub ops: u64,
    pub errors: u64,
    pub retries: u64,
    /// Operations per virtual second.
    pub throughput: f64,
    pub mean_us: f64,
    pub p50_us: f64,
    pub p90_us: f64,
    pub p99_us: f64,
    pub max_us: f64,
    pub duration_ns: u64,
    pub concurrency: usize,
    /// throughput × mean latency, which Little's law equates with the
    /// number of outstanding operations.
    pub littles_law_concurrency: f64,
    pub trace_path: Option<String>,
}

impl BenchReport {
    /// Little's law self-check within 10%.
    pub fn littles_law_holds(&self) -> bool {
        (self.littles_law_concurrency - self.concurrency as f64).abs()
            <= 0.1 * self.concurrency as f64
    }
}

impl std::fmt::Display for BenchReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(
            f,
            "ops          {} ({} errors, {} retries)",
            self.ops, self.errors, self.retries
        )?;
        writeln!(f, "throughput   {:.0} ops/s (virtual)", self.throughput)?;
        writeln!(
            f,
            "latency µs   mean {:.3}  p50 {:.3}  p90 {:.3}  p99 {:.3}  max {:.3}",
            self.mean_us, self.p50_us, self.p90_us, self.p99_us, self.max_us
        )?;
        write!(
            f,
            "little's law {:.2} outstanding vs {} configured",
            self.littles_law_concurrency, self.concurrency
        )?;
        if let Some(p) = &self.trace_path {
            write!(f, "\ntrace        {p}")?;
        }
        Ok(())
    }
}

/// Nearest-rank percentile of sorted data.
pub fn percentile(sorted: &[u64], p: f64) -> u64 {
    if sorted.is_empty() {
        return 0;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

fn program_for(kind: WorkloadKind) -> u32 {
    match kind {
        WorkloadKind::KvUniform | WorkloadKind::KvZipf => BUILTIN_KV,
        WorkloadKind::PointerChase => BUILTIN_POINTER_CHASE,
        WorkloadKind::LogFilter => BUILTIN_LOGFILTER,
    }
}

/// Sends `requests` with up to `window` in flight, ignoring response
/// contents except for errors.
fn pipelined<T: Transport>(
    client: &mut Client<T>,
    requests: Vec<(Opcode, u16, Vec<u8>)>,
    window: usize,
) -> Result<(), ClientError> {
    let mut pending: HashMap<u64, (Opcode, u16, Vec<u8>)> = HashMap::new();
    let mut iter = requests.into_iter();
    let mut misses = 0;
    let send =
        |client: &mut Client<T>, pending: &mut HashMap<u64, _>, r: (Opcode, u16, Vec<u8>)| {
            let id = client.fresh_id();
            let m = Message::request(r.0, client.tenant, r.1, id, r.2.clone());
            client.transport.send(&m.encode())?;
            pending.insert(id, r);
            Ok::<_, ClientError>(())
        };
    for r in iter.by_ref().take(window) {
        send(client, &mut pending, r)?;
    }
    while !pending.is_empty() {
        let Some(bytes) = client.transport.recv(client.timeout)? else {
            misses += 1;
            if misses > client.retries {
                return Err(ClientError::Timeout { attempts: misses });
            }
            for (_, r) in std::mem::take(&mut pending) {
                send(client, &mut pending, r)?;
            }
            continue;
        };
        let Ok(m) = Message::decode(&bytes) else {
            continue;
        };
        if pending.remove(&m.request_id).is_none() {
            continue;
        }
        if m.status != Status::Ok {
            return Err(ClientError::Status {
                status: m.status,
                detail: m.detail(),
            });
        }
        if let Some(r) = iter.next() {
            send(client, &mut pending, r)?;
        }
    }
    Ok(())
}

/// Creates and fills the slots a workload needs.
pub fn provision<T: Transport>(
    client: &mut Client<T>,
    spec: &WorkloadSpec,
) -> Result<Vec<u16>, BenchError> {
    spec.validate()?;
    if !spec.slots.is_empty() {
        return Ok(spec.slots.clone());
    }
    let program = program_for(spec.kind);
    let slots = (0..spec.slot_count)
        .map(|_| client.create_slot(program, spec.blocks_per_slot, spec.budget))
        .collect::<Result<Vec<_>, _>>()?;
    let window = 4 * slots.len();
    let mut requests = Vec::new();
    match spec.kind {
        WorkloadKind::KvUniform | WorkloadKind::KvZipf => {
            // key-major so every slot fills in ascending key order
            for key in 0..spec.key_space {
                for &s in &slots {
                    requests.push((Opcode::Put, s, payload::put(key, &value_for(key))));
                }
            }
        }
        WorkloadKind::PointerChase => {
            for &s in &slots {
                for (lba, next) in chase_ring(spec.blocks_per_slot, spec.seed ^ s as u64) {
                    requests.push((Opcode::RawDispatch, s, programs::link_packet(lba, next)));
                }
            }
        }
        WorkloadKind::LogFilter => {
            for &s in &slots {
                requests.push((Opcode::RawDispatch, s, vec![programs::LOGFILTER_RESET]));
            }
        }
    }
    pipelined(client, requests, window)?;
    Ok(slots)
}

/// A random cycle through blocks `0..blocks` as `(block, next)` links.
pub fn chase_ring(blocks: u64, seed: u64) -> Vec<(u64, u64)> {
    let mut order: Vec<u64> = (0..blocks).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..order.len()).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    (0..order.len())
        .map(|i| (order[i], order[(i + 1) % order.len()]))
        .collect()
}

/// A synthetic auth-log line, matching or not.
pub fn log_line<R: Rng>(rng: &mut R, matching: bool) -> String {
    let pid = rng.random_range(100..99_999);
    let user = rng.random_range(0..10_000);
    let ip = [
        10,
        rng.random_range(0..256),
        rng.random_range(0..256),
        rng.random_range(1..255),
    ];
    let what = if matching { "auth-fail" } else { "auth-ok" };
    format!(
        "sshd[{pid}]: {what} user=u{user} from {}.{}.{}.{}",
        ip[0], ip[1], ip[2], ip[3]
    )
}

struct Op {
    worker: usize,
    opcode: Opcode,
    key: u64,
    /// Server-side submit time of the operation's first request.
    submit_ns: Option<u64>,
    /// Client-side pointer chase: hops still to issue after this one.
    hops_left: u64,
}

struct Generator {
    spec: WorkloadSpec,
    rng: ChaCha8Rng,
    zipf: Option<Zipf<f64>>,
}

impl Generator {
    fn key(&mut self) -> u64 {
        match &self.zipf {
            Some(z) => (z.sample(&mut self.rng) as u64)
                .saturating_sub(1)
                .min(self.spec.key_space - 1),
            None => self.rng.random_range(0..self.spec.key_space),
        }
    }

    /// Opcode, key and packet for a fresh operation.
    fn next(&mut self) -> (Opcode, u64, Vec<u8>, u64) {
        match self.spec.kind {
            WorkloadKind::KvUniform | WorkloadKind::KvZipf => {
                let key = self.key();
                let x: f64 = self.rng.random();
                if x < self.spec.get {
                    (Opcode::Get, key, payload::key(key), 0)
                } else if x < self.spec.get + self.spec.put {
                    (Opcode::Put, key, payload::put(key, &value_for(key)), 0)
                } else {
                    (Opcode::Del, key, payload::key(key), 0)
                }
            }
            WorkloadKind::PointerChase => {
                let start = self.rng.random_range(0..self.spec.blocks_per_slot);
                if self.spec.offload {
                    (
                        Opcode::RawDispatch,
                        start,
                        programs::chase_packet(start, self.spec.depth),
                        0,
                    )
                } else {
                    (
                        Opcode::RawDispatch,
                        start,
                        programs::chase_packet(start, 1),
                        self.spec.depth - 1,
                    )
                }
            }
            WorkloadKind::LogFilter => {
                let matching = self.rng.random::<f64>() < self.spec.match_ratio;
                let line = log_line(&mut self.rng, matching);
                (
                    Opcode::RawDispatch,
                    matching as u64,
                    programs::pad_record(line.as_bytes()).to_vec(),
                    0,
                )
            }
        }
    }
}

/// Closed-loop benchmark: `concurrency` workers each keep one operation
/// outstanding until `op_count` operations complete. Latencies and
/// throughput come from the server's virtual timestamps.
pub fn run_bench<T: Transport>(
    client: &mut Client<T>,
    spec: &WorkloadSpec,
    slots: &[u16],
    trace: Option<&Path>,
) -> Result<BenchReport, BenchError> {
    spec.validate()?;
    if slots.is_empty() {
        return Err(BenchError::Spec("no slots to target".into()));
    }
    let zipf = match spec.kind {
        WorkloadKind::KvZipf => Some(
            Zipf::new(spec.key_space as f64, spec.theta)
                .map_err(|e| BenchError::Spec(e.to_string()))?,
        ),
        _ => None,
    };
    let mut gen = Generator {
        spec: spec.clone(),
        rng: ChaCha8Rng::seed_from_u64(spec.seed),
        zipf,
    };
    let half_in = client.rtt_ns / 2;
    let half_out = client.rtt_ns - half_in;
    let mut pending: HashMap<u64, (Op, Vec<u8>)> = HashMap::new();
    let mut records: Vec<TraceRecord> = Vec::with_capacity(spec.op_count as usize);
    let mut latencies: Vec<u64> = Vec::with_capacity(spec.op_count as usize);
    let (mut issued, mut errors, mut retries, mut misses) = (0u64, 0u64, 0u64, 0u32);

    let send = |client: &mut Client<T>,
                pending: &mut HashMap<u64, (Op, Vec<u8>)>,
                op: Op,
                packet: Vec<u8>| {
        let id = client.fresh_id();
        let mut m = Message::request(
            op.opcode,
            client.tenant,
            slots[op.worker % slots.len()],
            id,
            packet.clone(),
        );
        m.reserved = FLAG_TIMING;
        client.transport.send(&m.encode())?;
        pending.insert(id, (op, packet));
        Ok::<_, ClientError>(())
    };

    for worker in 0..spec.concurrency.min(spec.op_count as usize) {
        let (opcode, key, packet, hops_left) = gen.next();
        let op = Op {
            worker,
            opcode,
            key,
            submit_ns: None,
            hops_left,
        };
        send(client, &mut pending, op, packet)?;
        issued += 1;
    }
    while !pending.is_empty() {
        let Some(bytes) = client
            .transport
            .recv(client.timeout)
            .map_err(ClientError::from)?
        else {
            misses += 1;
            if misses > client.retries {
                return Err(ClientError::Timeout { attempts: misses }.into());
            }
            let mut lost: Vec<_> = std::mem::take(&mut pending).into_iter().collect();
            lost.sort_by_key(|(id, _)| *id);
            for (_, (op, packet)) in lost {
                retries += 1;
                send(client, &mut pending, op, packet)?;
            }
            continue;
        };
        misses = 0;
        let Ok(m) = Message::decode(&bytes) else {
            continue;
        };
        let Some((mut op, _)) = pending.remove(&m.request_id) else {
            continue;
        };
        let (body, timing) = m.body_and_timing();
        let Some((recv_ns, send_ns)) = timing else {
            return Err(ClientError::Protocol("missing timing trailer".into()).into());
        };
        let submit_ns = *op.submit_ns.get_or_insert(recv_ns - half_in);
        let ok = matches!(m.status, Status::Ok | Status::NotFound);
        if ok && op.hops_left > 0 {
            let next = payload::parse_dispatch(body).map(|(r0, _)| r0).unwrap_or(0);
            op.hops_left -= 1;
            send(client, &mut pending, op, programs::chase_packet(next, 1))?;
            continue;
        }
        let complete_ns = send_ns + half_out;
        if !ok {
            errors += 1;
        }
        latencies.push(complete_ns - submit_ns);
        records.push(TraceRecord {
            request_id: m.request_id,
            opcode: op.opcode.code(),
            key: op.key,
            submit_ns,
            complete_ns,
            status: m.status.code(),
        });
        let done = records.len() as u64;
        if errors as f64 > spec.max_error_rate * done.max(1000) as f64 {
            return Err(BenchError::ErrorRate {
                errors,
                done,
                limit: spec.max_error_rate,
            });
        }
        if issued < spec.op_count {
            let (opcode, key, packet, hops_left) = gen.next();
            let next = Op {
                worker: op.worker,
                opcode,
                key,
                submit_ns: None,
                hops_left,
            };
            send(client, &mut pending, next, packet)?;
            issued += 1;
        }
    }
    let done = records.len() as u64;
    if errors as f64 > spec.max_error_rate * done as f64 {
        return Err(BenchError::ErrorRate {
            errors,
            done,
            limit: spec.max_error_rate,
        });
    }
    let trace_path = match trace {
        Some(p) => {
            let mut w = csv::Writer::from_path(p)?;
            for r in &records {
                w.serialize(r)?;
            }
            w.flush().map_err(csv::Error::from)?;
            Some(p.display().to_string())
        }
        None => None,
    };
    Ok(summarize(
        &records,
        &mut latencies,
        spec.concurrency,
        errors,
        retries,
        trace_path,
    ))
}

fn summarize(
    records: &[TraceRecord],
    latencies: &mut [u64],
    concurrency: usize,
    errors: u64,
    retries: u64,
    trace_path: Option<String>,
) -> BenchReport {
    latencies.sort_unstable();
    let first = records.iter().map(|r| r.submit_ns).min().unwrap_or(0);
    let last = records.iter().map(|r| r.complete_ns).max().unwrap_or(0);
    let duration_ns = last - first;
    let ops = records.len() as u64;
    let us = |ns: u64| ns as f64 / 1_000.0;
    let mean_ns = if ops == 0 {
        0.0
    } else {
        latencies.iter().map(|&l| l as f64).sum::<f64>() / ops as f64
    };
    let throughput = if duration_ns == 0 {
        0.0
    } else {
        ops as f64 / (duration_ns as f64 / 1e9)
    };
    BenchReport {
        ops,
        errors,
        retries,
        throughput,
        mean_us: mean_ns / 1_000.0,
        p50_us: us(percentile(latencies, 50.0)),
        p90_us: us(percentile(latencies, 90.0)),
        p99_us: us(percentile(latencies, 99.0)),
        max_us: us(latencies.last().copied().unwrap_or(0)),
        duration_ns,
        concurrency,
        littles_law_concurrency: throughput * mean_ns / 1e9,
        trace_path,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogfilterReport {
    pub records: usize,
    pub matches: usize,
    /// Persisted records read back byte-for-byte equal to what was sent.
    pub verified: usize,
}

/// Streams log lines through a logfilter slot, then reads every persisted
/// record back.
pub fn logfilter_demo<T: Transport>(
    client: &mut Client<T>,
    slot: u16,
    lines: &[&[u8]],
) -> Result<LogfilterReport, ClientError> {
    client.dispatch(slot, vec![programs::LOGFILTER_RESET])?;
    let mut persisted = Vec::new();
    for line in lines {
        let record = programs::pad_record(line);
        let (r0, _, _) = client.dispatch(slot, record.to_vec())?;
        if r0 == 1 {
            persisted.push(record);
        }
    }
    let mut verified = 0;
    for (i, rec) in persisted.iter().enumerate() {
        let (r0, bytes, _) = client.dispatch(slot, programs::readback_packet(i as u64))?;
        if r0 == 0 && bytes.len() == RECORD_SIZE && bytes[..] == rec[..] {
            verified += 1;
        }
    }
    Ok(LogfilterReport {
        records: lines.len(),
        matches: persisted.len(),
        verified,
    })
}
