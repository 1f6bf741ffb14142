//! Discrete-event core: virtual nanosecond time, a deterministic event queue
//! and seeded latency sampling.
//!
//! Every other subsystem reads time from here. Nothing in the emulator looks
//! at the wall clock except the realtime serve loop, which only uses it to
//! pace replies.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fmt;
use std::ops::{Add, AddAssign, Sub};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const NANOS_PER_MICRO: u64 = 1_000;

/// Default cap on virtual time. Far below `u64::MAX` so that `now + delay`
/// arithmetic can never wrap.
pub const DEFAULT_TIME_BUDGET_NS: u64 = 1 << 62;

/// Virtual nanoseconds since daemon start.
#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub struct SimTime(pub u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);

    pub fn from_micros(us: u64) -> Self {
        SimTime(us * NANOS_PER_MICRO)
    }

    pub fn nanos(self) -> u64 {
        self.0
    }

    pub fn as_micros_f64(self) -> f64 {
        self.0 as f64 / NANOS_PER_MICRO as f64
    }

    pub fn saturating_since(self, earlier: SimTime) -> u64 {
        self.0.saturating_sub(earlier.0)
    }
}

impl Add<u64> for SimTime {
    type Output = SimTime;
    fn add(self, ns: u64) -> SimTime {
        SimTime(self.0 + ns)
    }
}

impl AddAssign<u64> for SimTime {
    fn add_assign(&mut self, ns: u64) {
        self.0 += ns;
    }
}

impl Sub for SimTime {
    type Output = u64;
    fn sub(self, rhs: SimTime) -> u64 {
        self.0 - rhs.0
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}ns", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SimError {
    #[error("virtual time budget exceeded: {requested} > {budget}")]
    TimeBudgetExceeded { requested: SimTime, budget: SimTime },
    #[error("invalid latency model: {0}")]
    InvalidModel(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Distribution {
    #[default]
    Uniform,
    FixedMin,
    FixedMax,
}

impl std::str::FromStr for Distribution {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "uniform" => Ok(Distribution::Uniform),
            "fixed-min" => Ok(Distribution::FixedMin),
            "fixed-max" => Ok(Distribution::FixedMax),
            other => Err(format!("unknown latency distribution `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IoKind {
    Read,
    Write,
}

/// Network and device latency parameters, in nanoseconds.
///
/// Defaults are a 1µs L2 round trip and NVMe service times in [5, 8]µs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LatencyModel {
    pub net_rtt_ns: u64,
    pub nvme_min_ns: u64,
    pub nvme_max_ns: u64,
    pub distribution: Distribution,
    /// Optional separate `(min, max)` range for writes; reads always use the
    /// main range.
    pub write_override: Option<(u64, u64)>,
}

impl Default for LatencyModel {
    fn default() -> Self {
        LatencyModel {
            net_rtt_ns: NANOS_PER_MICRO,
            nvme_min_ns: 5 * NANOS_PER_MICRO,
            nvme_max_ns: 8 * NANOS_PER_MICRO,
            distribution: Distribution::Uniform,
            write_override: None,
        }
    }
}

impl LatencyModel {
    pub fn with_distribution(distribution: Distribution) -> Self {
        LatencyModel {
            distribution,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let check = |min: u64, max: u64| {
            if min == 0 || max == 0 {
                Err(SimError::InvalidModel("durations must be > 0".into()))
            } else if min > max {
                Err(SimError::InvalidModel(format!(
                    "nvme_min {min} > nvme_max {max}"
                )))
            } else {
                Ok(())
            }
        };
        if self.net_rtt_ns == 0 {
            return Err(SimError::InvalidModel("net_rtt must be > 0".into()));
        }
        check(self.nvme_min_ns, self.nvme_max_ns)?;
        if let Some((min, max)) = self.write_override {
            check(min, max)?;
        }
        Ok(())
    }

    fn range(&self, kind: IoKind) -> (u64, u64) {
        match (kind, self.write_override) {
            (IoKind::Write, Some(range)) => range,
            _ => (self.nvme_min_ns, self.nvme_max_ns),
        }
    }

    /// Lower bound on any device service time under this model.
    pub fn min_service_ns(&self) -> u64 {
        match self.write_override {
            Some((wmin, _)) => wmin.min(self.nvme_min_ns),
            None => self.nvme_min_ns,
        }
    }

    /// Expected read service time.
    pub fn mean_read_ns(&self) -> f64 {
        match self.distribution {
            Distribution::Uniform => (self.nvme_min_ns + self.nvme_max_ns) as f64 / 2.0,
            Distribution::FixedMin => self.nvme_min_ns as f64,
            Distribution::FixedMax => self.nvme_max_ns as f64,
        }
    }

    /// The one-way halves of the round trip. They always sum to `net_rtt_ns`.
    pub fn rtt_halves(&self) -> (u64, u64) {
        let up = self.net_rtt_ns / 2;
        (up, self.net_rtt_ns - up)
    }
}

/// Seeded sampler for device service times.
#[derive(Debug, Clone)]
pub struct LatencySampler {
    model: LatencyModel,
    rng: ChaCha8Rng,
}

impl LatencySampler {
    pub fn new(model: LatencyModel, seed: u64) -> Self {
        LatencySampler {
            model,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn model(&self) -> &LatencyModel {
        &self.model
    }

    pub fn sample(&mut self, kind: IoKind) -> u64 {
        sample_nvme_latency(&self.model, kind, &mut self.rng)
    }
}

/// Draws one device service time in nanoseconds.
pub fn sample_nvme_latency<R: Rng + ?Sized>(
    model: &LatencyModel,
    kind: IoKind,
    rng: &mut R,
) -> u64 {
    let (min, max) = model.range(kind);
    match model.distribution {
        Distribution::FixedMin => min,
        Distribution::FixedMax => max,
        Distribution::Uniform => rng.random_range(min..=max),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EventId(pub u64);

struct Pending<E> {
    at: SimTime,
    seq: u64,
    payload: E,
}

impl<E> PartialEq for Pending<E> {
    fn eq(&self, other: &Self) -> bool {
        self.at == other.at && self.seq == other.seq
    }
}

impl<E> Eq for Pending<E> {}

impl<E> PartialOrd for Pending<E> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<E> Ord for Pending<E> {
    // BinaryHeap is a max-heap; invert so the earliest (time, seq) pops first.
    fn cmp(&self, other: &Self) -> Ordering {
        (other.at, other.seq).cmp(&(self.at, self.seq))
    }
}

/// A dispatched event.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fired<E> {
    pub at: SimTime,
    pub id: EventId,
    pub payload: E,
}

/// Virtual clock plus pending events, dispatched in `(time, insertion)` order.
pub struct EventQueue<E> {
    now: SimTime,
    next_seq: u64,
    budget: SimTime,
    pending: BinaryHeap<Pending<E>>,
}

impl<E> Default for EventQueue<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E> EventQueue<E> {
    pub fn new() -> Self {
        Self::with_budget(SimTime(DEFAULT_TIME_BUDGET_NS))
    }

    pub fn with_budget(budget: SimTime) -> Self {
        EventQueue {
            now: SimTime::ZERO,
            next_seq: 0,
            budget,
            pending: BinaryHeap::new(),
        }
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn budget(&self) -> SimTime {
        self.budget
    }

    pub fn len(&self) -> usize {
        self.pending.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pending.is_empty()
    }

    pub fn schedule(&mut self, delay_ns: u64, payload: E) -> Result<EventId, SimError> {
        let at = self
            .now
            .0
            .checked_add(delay_ns)
            .map(SimTime)
            .unwrap_or(SimTime(u64::MAX));
        self.schedule_at(at, payload)
    }

    /// Schedules at an absolute time. Times in the past are clamped to `now`
    /// so no event can fire before the one that scheduled it.
    pub fn schedule_at(&mut self, at: SimTime, payload: E) -> Result<EventId, SimError> {
        let at = at.max(self.now);
        if at > self.budget {
            return Err(SimError::TimeBudgetExceeded {
                requested: at,
                budget: self.budget,
            });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.pending.push(Pending { at, seq, payload });
        Ok(EventId(seq))
    }

    pub fn peek_time(&self) -> Option<SimTime> {
        self.pending.peek().map(|p| p.at)
    }

    /// Pops the earliest event and advances the clock to its timestamp.
    pub fn pop(&mut self) -> Option<Fired<E>> {
        let p = self.pending.pop()?;
        debug_assert!(p.at >= self.now);
        self.now = p.at;
        Some(Fired {
            at: p.at,
            id: EventId(p.seq),
            payload: p.payload,
        })
    }

    /// Moves the clock forward without dispatching anything.
    pub fn advance_to(&mut self, t: SimTime) -> Result<(), SimError> {
        if t > self.budget {
            return Err(SimError::TimeBudgetExceeded {
                requested: t,
                budget: self.budget,
            });
        }
        if t > self.now {
            self.now = t;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum RunMode {
    /// The clock jumps straight to the next event.
    #[default]
    Virtual,
    /// Virtual delays are mirrored by wall-clock sleeps, multiplied by the
    /// given scale.
    Realtime { scale: f64 },
}
