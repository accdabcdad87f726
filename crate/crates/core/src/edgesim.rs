//! MDC workload simulation.
//!
//! Every live agent holds one session per service. A session reserves one
//! thread on the first processing unit with a free slot (first-fit) for as
//! long as the agent stays under the same MDC; requests then run on that
//! thread. A PU draws active power while at least one operation executes on
//! it and idle power otherwise.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{EngineError, Event, EventQueue, SimTime};
use crate::mobility::{AgentItinerary, MobilityTrace};
use crate::placement::Placement;
use crate::rng;
use crate::topology::{handover_schedule, serving_mdc};

pub const HEADER_BYTES: u64 = 54;

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("agent {agent} already holds an open {service} session at MDC {mdc}")]
    DuplicateSession { agent: u64, service: String, mdc: usize },
    #[error("session {session} received a request while its previous operation is still running")]
    Overlap { session: usize },
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("invalid simulation config: {0}")]
    Config(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Parse { path: String, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ServiceKind {
    Inference,
    Training,
}

impl ServiceKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ServiceKind::Inference => "inference",
            ServiceKind::Training => "training",
        }
    }
}

impl fmt::Display for ServiceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ServiceKind {
    type Err = SimError;
    fn from_str(s: &str) -> Result<Self, SimError> {
        match s {
            "inference" => Ok(ServiceKind::Inference),
            "training" => Ok(ServiceKind::Training),
            other => Err(SimError::Config(format!("unknown service {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum RequestSchedule {
    /// Fixed period measured from the session open time.
    Periodic { period: f64 },
    /// Uniform gap after the previous completion (or after the open).
    UniformGap { min: f64, max: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceSpec {
    pub kind: ServiceKind,
    pub schedule: RequestSchedule,
    pub threads_per_request: u32,
    pub op_time: f64,
    pub payload_bytes: u64,
    pub header_bytes: u64,
}

impl ServiceSpec {
    pub fn inference() -> Self {
        Self {
            kind: ServiceKind::Inference,
            schedule: RequestSchedule::Periodic { period: 60.0 },
            threads_per_request: 1,
            op_time: 1.17,
            payload_bytes: 65,
            header_bytes: HEADER_BYTES,
        }
    }

    pub fn training() -> Self {
        Self {
            kind: ServiceKind::Training,
            schedule: RequestSchedule::UniformGap { min: 1.0, max: 86_400.0 },
            threads_per_request: 1,
            op_time: 18.0,
            payload_bytes: 20,
            header_bytes: HEADER_BYTES,
        }
    }

    pub fn standard(kind: ServiceKind) -> Self {
        match kind {
            ServiceKind::Inference => Self::inference(),
            ServiceKind::Training => Self::training(),
        }
    }

    pub fn total_bytes(&self) -> u64 {
        self.payload_bytes + self.header_bytes
    }

    /// Fraction of one PU used by a request.
    pub fn pu_share(&self, threads_per_pu: usize) -> f64 {
        self.threads_per_request as f64 / threads_per_pu as f64
    }

    /// Next gap for gap-scheduled services, rounded to the microsecond.
    pub fn sample_gap(&self, rng: &mut impl Rng) -> Option<f64> {
        match self.schedule {
            RequestSchedule::UniformGap { min, max } => {
                Some(SimTime::from_secs(rng.gen_range(min..=max)).as_secs())
            }
            RequestSchedule::Periodic { .. } => None,
        }
    }

    fn validate(&self) -> Result<(), SimError> {
        if self.threads_per_request != 1 {
            return Err(SimError::Config(format!(
                "{}: only single-thread requests are supported, got {}",
                self.kind, self.threads_per_request
            )));
        }
        if self.op_time.is_nan() || self.op_time <= 0.0 {
            return Err(SimError::Config(format!("{}: op_time must be positive", self.kind)));
        }
        match self.schedule {
            RequestSchedule::Periodic { period } if period.is_nan() || period <= 0.0 => {
                Err(SimError::Config(format!("{}: period must be positive", self.kind)))
            }
            RequestSchedule::UniformGap { min, max } if !(min > 0.0 && min <= max) => {
                Err(SimError::Config(format!("{}: gap range must satisfy 0 < min <= max", self.kind)))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerModel {
    pub idle_w: f64,
    pub active_w: f64,
}

impl Default for PowerModel {
    fn default() -> Self {
        Self {
            idle_w: 47.0,
            active_w: 95.0,
        }
    }
}

impl PowerModel {
    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.idle_w > 0.0 && self.active_w >= self.idle_w) {
            return Err(SimError::Config(format!(
                "power model needs active >= idle > 0, got idle {} active {}",
                self.idle_w, self.active_w
            )));
        }
        Ok(())
    }

    /// Power of an MDC with `busy_pus` of its `pus` executing work.
    pub fn mdc_power(&self, pus: usize, busy_pus: usize) -> f64 {
        self.idle_w * pus as f64 + (self.active_w - self.idle_w) * busy_pus as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MdcConfig {
    pub pus: usize,
    pub threads_per_pu: usize,
}

impl Default for MdcConfig {
    fn default() -> Self {
        Self {
            pus: 10,
            threads_per_pu: 16,
        }
    }
}

impl MdcConfig {
    pub fn capacity(&self) -> usize {
        self.pus * self.threads_per_pu
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub duration: f64,
    pub sample_interval: f64,
    pub retry_interval: f64,
    /// Path sampling step used for handover detection.
    pub handover_step: f64,
    pub mdc: MdcConfig,
    pub power: PowerModel,
    pub services: Vec<ServiceSpec>,
    pub seed: u64,
    #[serde(default)]
    pub record_log: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            duration: 36_000.0,
            sample_interval: 60.0,
            retry_interval: 1.0,
            handover_step: 1.0,
            mdc: MdcConfig::default(),
            power: PowerModel::default(),
            services: vec![ServiceSpec::inference(), ServiceSpec::training()],
            seed: 0,
            record_log: false,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        for (name, v) in [
            ("duration", self.duration),
            ("sample_interval", self.sample_interval),
            ("retry_interval", self.retry_interval),
            ("handover_step", self.handover_step),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(SimError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.mdc.pus == 0 || self.mdc.threads_per_pu == 0 {
            return Err(SimError::Config("MDCs need at least one PU with one thread".into()));
        }
        self.power.validate()?;
        if self.services.is_empty() {
            return Err(SimError::Config("at least one service is required".into()));
        }
        for (i, s) in self.services.iter().enumerate() {
            s.validate()?;
            if self.services[..i].iter().any(|o| o.kind == s.kind) {
                return Err(SimError::Config(format!("service {} listed twice", s.kind)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Admission {
    Admitted { pu: usize, slot: usize },
    Rejected,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProcessingUnit {
    /// Session id per thread slot.
    pub slots: Vec<Option<usize>>,
    pub reserved: usize,
    pub busy_ops: usize,
}

impl ProcessingUnit {
    pub fn new(threads: usize) -> Self {
        Self {
            slots: vec![None; threads],
            reserved: 0,
            busy_ops: 0,
        }
    }

    pub fn is_full(&self) -> bool {
        self.reserved == self.slots.len()
    }
}

pub fn pu_power(pu: &ProcessingUnit, model: &PowerModel) -> f64 {
    if pu.busy_ops > 0 {
        model.active_w
    } else {
        model.idle_w
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ServiceCounters {
    pub served: u64,
    pub requests: u64,
    pub responses: u64,
    pub cancelled: u64,
    pub traffic_bytes: u64,
}

#[derive(Debug, Clone)]
pub struct MdcState {
    pub mdc_id: usize,
    pub pus: Vec<ProcessingUnit>,
    pub power_model: PowerModel,
    pub rejected_count: u64,
    /// Open `(agent, service)` pairs mapped to their session id.
    pub open_sessions: BTreeMap<(u64, ServiceKind), usize>,
    pub counters: BTreeMap<ServiceKind, ServiceCounters>,
    busy_pus: usize,
    busy_threads: usize,
    energy_j: f64,
    busy_thread_s: f64,
    last_t: SimTime,
}

impl MdcState {
    pub fn new(mdc_id: usize, cfg: MdcConfig, power_model: PowerModel) -> Self {
        Self {
            mdc_id,
            pus: (0..cfg.pus).map(|_| ProcessingUnit::new(cfg.threads_per_pu)).collect(),
            power_model,
            rejected_count: 0,
            open_sessions: BTreeMap::new(),
            counters: BTreeMap::new(),
            busy_pus: 0,
            busy_threads: 0,
            energy_j: 0.0,
            busy_thread_s: 0.0,
            last_t: SimTime::ZERO,
        }
    }

    pub fn capacity(&self) -> usize {
        self.pus.iter().map(|p| p.slots.len()).sum()
    }

    pub fn reserved_threads(&self) -> usize {
        self.pus.iter().map(|p| p.reserved).sum()
    }

    pub fn busy_pus(&self) -> usize {
        self.busy_pus
    }

    pub fn busy_threads(&self) -> usize {
        self.busy_threads
    }

    pub fn power(&self) -> f64 {
        self.power_model.mdc_power(self.pus.len(), self.busy_pus)
    }

    pub fn energy_j(&self) -> f64 {
        self.energy_j
    }

    pub fn busy_thread_seconds(&self) -> f64 {
        self.busy_thread_s
    }

    pub fn counter(&self, kind: ServiceKind) -> ServiceCounters {
        self.counters.get(&kind).cloned().unwrap_or_default()
    }

    /// Integrates power up to `t`.
    pub fn advance(&mut self, t: SimTime) {
        if t > self.last_t {
            let dt = (t - self.last_t).as_secs();
            self.energy_j += self.power() * dt;
            self.busy_thread_s += self.busy_threads as f64 * dt;
            self.last_t = t;
        }
    }

    /// First-fit admission of one session thread.
    pub fn open_session(&mut self, agent: u64, service: ServiceKind, session: usize) -> Result<Admission, SimError> {
        if self.open_sessions.contains_key(&(agent, service)) {
            return Err(SimError::DuplicateSession {
                agent,
                service: service.to_string(),
                mdc: self.mdc_id,
            });
        }
        for (k, pu) in self.pus.iter_mut().enumerate() {
            if let Some(slot) = pu.slots.iter().position(Option::is_none) {
                pu.slots[slot] = Some(session);
                pu.reserved += 1;
                self.open_sessions.insert((agent, service), session);
                return Ok(Admission::Admitted { pu: k, slot });
            }
        }
        self.rejected_count += 1;
        Ok(Admission::Rejected)
    }

    /// Drops the `(agent, service)` entry; the thread stays reserved until
    /// [`MdcState::release`].
    pub fn detach(&mut self, agent: u64, service: ServiceKind) {
        self.open_sessions.remove(&(agent, service));
    }

    pub fn release(&mut self, pu: usize, slot: usize, session: usize) -> Result<(), SimError> {
        let unit = &mut self.pus[pu];
        if unit.slots[slot] != Some(session) {
            return Err(SimError::Invariant(format!(
                "MDC {} PU {pu} slot {slot} does not hold session {session}",
                self.mdc_id
            )));
        }
        unit.slots[slot] = None;
        unit.reserved -= 1;
        Ok(())
    }

    pub fn start_op(&mut self, t: SimTime, pu: usize) {
        self.advance(t);
        let unit = &mut self.pus[pu];
        unit.busy_ops += 1;
        if unit.busy_ops == 1 {
            self.busy_pus += 1;
        }
        self.busy_threads += 1;
    }

    pub fn end_op(&mut self, t: SimTime, pu: usize) {
        self.advance(t);
        let unit = &mut self.pus[pu];
        unit.busy_ops -= 1;
        if unit.busy_ops == 0 {
            self.busy_pus -= 1;
        }
        self.busy_threads -= 1;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SessionState {
    Open,
    /// Detached by a handover, waiting for its in-flight operation.
    Closing,
    Closed,
}

#[derive(Debug, Clone)]
pub struct Session {
    pub id: usize,
    pub agent_id: u64,
    pub service: usize,
    pub mdc_id: usize,
    pub pu_index: usize,
    pub slot: usize,
    pub opened: SimTime,
    pub state: SessionState,
    pub inflight_until: Option<SimTime>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EventKind {
    AgentEnter,
    AgentExit,
    Handover,
    SessionRequest,
    TaskStart,
    TaskFinish,
    MetricSample,
}

impl EventKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            EventKind::AgentEnter => "AgentEnter",
            EventKind::AgentExit => "AgentExit",
            EventKind::Handover => "Handover",
            EventKind::SessionRequest => "SessionRequest",
            EventKind::TaskStart => "TaskStart",
            EventKind::TaskFinish => "TaskFinish",
            EventKind::MetricSample => "MetricSample",
        }
    }
}

impl FromStr for EventKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        [
            EventKind::AgentEnter,
            EventKind::AgentExit,
            EventKind::Handover,
            EventKind::SessionRequest,
            EventKind::TaskStart,
            EventKind::TaskFinish,
            EventKind::MetricSample,
        ]
        .into_iter()
        .find(|k| k.as_str() == s)
        .ok_or_else(|| format!("unknown event kind {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SimEvent {
    AgentEnter { agent: usize },
    AgentExit { agent: usize },
    Handover { agent: usize, old_mdc: usize, new_mdc: usize },
    SessionRequest { agent: usize, service: usize },
    TaskStart { session: usize },
    TaskFinish { session: usize },
    MetricSample,
}

impl SimEvent {
    pub fn kind(&self) -> EventKind {
        match self {
            SimEvent::AgentEnter { .. } => EventKind::AgentEnter,
            SimEvent::AgentExit { .. } => EventKind::AgentExit,
            SimEvent::Handover { .. } => EventKind::Handover,
            SimEvent::SessionRequest { .. } => EventKind::SessionRequest,
            SimEvent::TaskStart { .. } => EventKind::TaskStart,
            SimEvent::TaskFinish { .. } => EventKind::TaskFinish,
            SimEvent::MetricSample => EventKind::MetricSample,
        }
    }
}

/// State change recorded in the event log.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Detail {
    Enter { agent: u64, mdc: usize },
    Exit { agent: u64 },
    Handover { agent: u64, old: usize, new: usize },
    Open { agent: u64, service: ServiceKind, mdc: usize, pu: usize, slot: usize, session: usize },
    Reject { agent: u64, service: ServiceKind, mdc: usize },
    Release { agent: u64, service: ServiceKind, mdc: usize, pu: usize, slot: usize, session: usize },
    OpStart { agent: u64, service: ServiceKind, mdc: usize, pu: usize, session: usize },
    OpFinish { agent: u64, service: ServiceKind, mdc: usize, pu: usize, session: usize },
    OpCancel { agent: u64, service: ServiceKind, mdc: usize, pu: usize, session: usize },
    Sample,
}

impl fmt::Display for Detail {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Detail::Enter { agent, mdc } => write!(f, "enter agent={agent} mdc={mdc}"),
            Detail::Exit { agent } => write!(f, "exit agent={agent}"),
            Detail::Handover { agent, old, new } => write!(f, "handover agent={agent} old={old} new={new}"),
            Detail::Open { agent, service, mdc, pu, slot, session } => {
                write!(f, "open agent={agent} service={service} mdc={mdc} pu={pu} slot={slot} session={session}")
            }
            Detail::Reject { agent, service, mdc } => write!(f, "reject agent={agent} service={service} mdc={mdc}"),
            Detail::Release { agent, service, mdc, pu, slot, session } => {
                write!(f, "release agent={agent} service={service} mdc={mdc} pu={pu} slot={slot} session={session}")
            }
            Detail::OpStart { agent, service, mdc, pu, session } => {
                write!(f, "op_start agent={agent} service={service} mdc={mdc} pu={pu} session={session}")
            }
            Detail::OpFinish { agent, service, mdc, pu, session } => {
                write!(f, "op_finish agent={agent} service={service} mdc={mdc} pu={pu} session={session}")
            }
            Detail::OpCancel { agent, service, mdc, pu, session } => {
                write!(f, "op_cancel agent={agent} service={service} mdc={mdc} pu={pu} session={session}")
            }
            Detail::Sample => f.write_str("sample"),
        }
    }
}

impl FromStr for Detail {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let mut parts = s.split_whitespace();
        let tag = parts.next().ok_or("empty detail")?;
        let fields: BTreeMap<&str, &str> = parts
            .map(|kv| kv.split_once('=').ok_or_else(|| format!("bad field {kv:?}")))
            .collect::<Result<_, _>>()?;
        let num = |k: &str| -> Result<usize, String> {
            fields
                .get(k)
                .ok_or_else(|| format!("missing {k} in {s:?}"))?
                .parse::<usize>()
                .map_err(|e| format!("{k}: {e}"))
        };
        let agent = || num("agent").map(|v| v as u64);
        let service = || -> Result<ServiceKind, String> {
            fields
                .get("service")
                .ok_or_else(|| format!("missing service in {s:?}"))?
                .parse::<ServiceKind>()
                .map_err(|e| e.to_string())
        };
        Ok(match tag {
            "enter" => Detail::Enter { agent: agent()?, mdc: num("mdc")? },
            "exit" => Detail::Exit { agent: agent()? },
            "handover" => Detail::Handover { agent: agent()?, old: num("old")?, new: num("new")? },
            "open" => Detail::Open {
                agent: agent()?,
                service: service()?,
                mdc: num("mdc")?,
                pu: num("pu")?,
                slot: num("slot")?,
                session: num("session")?,
            },
            "reject" => Detail::Reject { agent: agent()?, service: service()?, mdc: num("mdc")? },
            "release" => Detail::Release {
                agent: agent()?,
                service: service()?,
                mdc: num("mdc")?,
                pu: num("pu")?,
                slot: num("slot")?,
                session: num("session")?,
            },
            "op_start" | "op_finish" | "op_cancel" => {
                let (agent, service, mdc, pu, session) = (agent()?, service()?, num("mdc")?, num("pu")?, num("session")?);
                match tag {
                    "op_start" => Detail::OpStart { agent, service, mdc, pu, session },
                    "op_finish" => Detail::OpFinish { agent, service, mdc, pu, session },
                    _ => Detail::OpCancel { agent, service, mdc, pu, session },
                }
            }
            "sample" => Detail::Sample,
            other => return Err(format!("unknown detail {other:?}")),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRecord {
    pub t: SimTime,
    pub seq: u64,
    pub kind: EventKind,
    pub detail: Detail,
}

/// One row per MDC per sample instant, taken after every event at `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRow {
    pub t: f64,
    pub mdc_id: usize,
    pub reserved_threads: usize,
    pub busy_pus: usize,
    pub power_w: f64,
    pub rejections_cum: u64,
    pub served_inference_cum: u64,
    pub served_training_cum: u64,
    pub traffic_bytes_cum: u64,
    pub busy_threads: usize,
    /// Average power over the interval ending at `t`.
    pub mean_power_w: f64,
    pub energy_j_cum: f64,
    pub busy_thread_s_cum: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MdcTotals {
    pub mdc_id: usize,
    pub rejected: u64,
    pub counters: BTreeMap<ServiceKind, ServiceCounters>,
    pub energy_j: f64,
    pub busy_thread_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawMeta {
    pub scenario_tag: String,
    pub n_mdcs: usize,
    pub config: SimConfig,
    pub totals: Vec<MdcTotals>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationRawResults {
    pub meta: RawMeta,
    /// Ordered by `(t, mdc_id)`.
    pub samples: Vec<SampleRow>,
    pub live_agents: Vec<(f64, u64)>,
    pub log: Option<Vec<LogRecord>>,
}

impl SimulationRawResults {
    pub fn n_mdcs(&self) -> usize {
        self.meta.n_mdcs
    }

    pub fn series(&self, mdc: usize) -> impl Iterator<Item = &SampleRow> {
        self.samples.iter().filter(move |r| r.mdc_id == mdc)
    }

    pub fn sample_times(&self) -> Vec<f64> {
        self.live_agents.iter().map(|(t, _)| *t).collect()
    }
}

#[derive(Debug, Clone, Default)]
struct ServiceSlotRt {
    session: Option<usize>,
    retry_pending: bool,
}

#[derive(Debug, Clone, Default)]
struct AgentRt {
    alive: bool,
    mdc: usize,
    services: Vec<ServiceSlotRt>,
    draining: Vec<usize>,
    rng: Option<ChaCha8Rng>,
}

struct World<'a> {
    cfg: &'a SimConfig,
    placement: &'a Placement,
    itineraries: &'a [AgentItinerary],
    horizon: SimTime,
    mdcs: Vec<MdcState>,
    sessions: Vec<Session>,
    agents: Vec<AgentRt>,
    live: u64,
    log: Option<Vec<LogRecord>>,
    current: (SimTime, u64, EventKind),
}

type Queue = EventQueue<SimEvent>;

impl<'a> World<'a> {
    fn note(&mut self, detail: Detail) {
        if let Some(log) = self.log.as_mut() {
            let (t, seq, kind) = self.current;
            log.push(LogRecord { t, seq, kind, detail });
        }
    }

    fn schedule(&self, q: &mut Queue, t: SimTime, ev: SimEvent) -> Result<(), SimError> {
        if t <= self.horizon {
            q.schedule(t, ev)?;
        }
        Ok(())
    }

    fn agent_id(&self, agent: usize) -> u64 {
        self.itineraries[agent].agent_id
    }

    fn gap(&mut self, agent: usize, service: usize) -> Option<SimTime> {
        let spec = &self.cfg.services[service];
        let seed = self.cfg.seed;
        let id = self.itineraries[agent].agent_id;
        let rng = self.agents[agent]
            .rng
            .get_or_insert_with(|| rng::entity_substream(seed, &["request-gaps"], id));
        spec.sample_gap(rng).map(SimTime::from_secs)
    }

    fn handle(&mut self, q: &mut Queue, ev: &Event<SimEvent>) -> Result<(), SimError> {
        self.current = (ev.t, ev.seq, ev.payload.kind());
        let t = ev.t;
        match ev.payload {
            SimEvent::AgentEnter { agent } => self.on_enter(q, t, agent),
            SimEvent::AgentExit { agent } => self.on_exit(t, agent),
            SimEvent::Handover { agent, old_mdc, new_mdc } => self.on_handover(q, t, agent, old_mdc, new_mdc),
            SimEvent::SessionRequest { agent, service } => {
                let slot = &mut self.agents[agent].services[service];
                slot.retry_pending = false;
                if self.agents[agent].alive && self.agents[agent].services[service].session.is_none() {
                    self.try_open(q, t, agent, service)?;
                }
                Ok(())
            }
            SimEvent::TaskStart { session } => self.on_task_start(q, t, session),
            SimEvent::TaskFinish { session } => self.on_task_finish(q, t, session),
            SimEvent::MetricSample => {
                self.note(Detail::Sample);
                Ok(())
            }
        }
    }

    fn on_enter(&mut self, q: &mut Queue, t: SimTime, agent: usize) -> Result<(), SimError> {
        let it = self.itineraries[agent];
        let mdc = serving_mdc(&it.entry, self.placement);
        let n_services = self.cfg.services.len();
        let a = &mut self.agents[agent];
        a.alive = true;
        a.mdc = mdc;
        a.services = vec![ServiceSlotRt::default(); n_services];
        self.live += 1;
        self.note(Detail::Enter { agent: it.agent_id, mdc });

        let horizon = self.horizon.as_secs();
        for h in handover_schedule(&it, self.placement, self.cfg.handover_step, horizon) {
            self.schedule(
                q,
                SimTime::from_secs(h.t),
                SimEvent::Handover { agent, old_mdc: h.old_mdc, new_mdc: h.new_mdc },
            )?;
        }
        self.schedule(q, SimTime::from_secs(it.t_exit), SimEvent::AgentExit { agent })?;
        for service in 0..n_services {
            self.try_open(q, t, agent, service)?;
        }
        Ok(())
    }

    fn try_open(&mut self, q: &mut Queue, t: SimTime, agent: usize, service: usize) -> Result<(), SimError> {
        let kind = self.cfg.services[service].kind;
        let agent_id = self.agent_id(agent);
        let mdc = self.agents[agent].mdc;
        let id = self.sessions.len();
        match self.mdcs[mdc].open_session(agent_id, kind, id)? {
            Admission::Admitted { pu, slot } => {
                self.sessions.push(Session {
                    id,
                    agent_id,
                    service,
                    mdc_id: mdc,
                    pu_index: pu,
                    slot,
                    opened: t,
                    state: SessionState::Open,
                    inflight_until: None,
                });
                self.agents[agent].services[service].session = Some(id);
                self.note(Detail::Open { agent: agent_id, service: kind, mdc, pu, slot, session: id });
                let first = match self.cfg.services[service].schedule {
                    RequestSchedule::Periodic { .. } => t,
                    RequestSchedule::UniformGap { .. } => t + self.gap(agent, service).expect("gap service"),
                };
                self.schedule(q, first, SimEvent::TaskStart { session: id })?;
            }
            Admission::Rejected => {
                self.note(Detail::Reject { agent: agent_id, service: kind, mdc });
                let slot = &mut self.agents[agent].services[service];
                if !slot.retry_pending {
                    slot.retry_pending = true;
                    let retry = t + SimTime::from_secs(self.cfg.retry_interval);
                    self.schedule(q, retry, SimEvent::SessionRequest { agent, service })?;
                }
            }
        }
        Ok(())
    }

    fn release(&mut self, session: usize) -> Result<(), SimError> {
        let s = &mut self.sessions[session];
        s.state = SessionState::Closed;
        let (mdc, pu, slot, agent, service) = (s.mdc_id, s.pu_index, s.slot, s.agent_id, s.service);
        self.mdcs[mdc].release(pu, slot, session)?;
        let kind = self.cfg.services[service].kind;
        self.note(Detail::Release { agent, service: kind, mdc, pu, slot, session });
        Ok(())
    }

    fn cancel_op(&mut self, t: SimTime, session: usize) {
        let s = &mut self.sessions[session];
        if s.inflight_until.take().is_some() {
            let (mdc, pu, agent, service) = (s.mdc_id, s.pu_index, s.agent_id, s.service);
            let kind = self.cfg.services[service].kind;
            self.mdcs[mdc].end_op(t, pu);
            self.mdcs[mdc].counters.entry(kind).or_default().cancelled += 1;
            self.note(Detail::OpCancel { agent, service: kind, mdc, pu, session });
        }
    }

    fn on_exit(&mut self, t: SimTime, agent: usize) -> Result<(), SimError> {
        let agent_id = self.agent_id(agent);
        let mut to_close: Vec<usize> = std::mem::take(&mut self.agents[agent].draining);
        for (service, slot) in self.agents[agent].services.iter_mut().enumerate() {
            slot.retry_pending = false;
            if let Some(id) = slot.session.take() {
                let kind = self.cfg.services[service].kind;
                self.mdcs[self.sessions[id].mdc_id].detach(agent_id, kind);
                to_close.push(id);
            }
        }
        to_close.sort_unstable();
        for id in to_close {
            if self.sessions[id].state != SessionState::Closed {
                self.cancel_op(t, id);
                self.release(id)?;
            }
        }
        self.agents[agent].alive = false;
        self.live -= 1;
        self.note(Detail::Exit { agent: agent_id });
        Ok(())
    }

    fn on_handover(&mut self, q: &mut Queue, t: SimTime, agent: usize, old: usize, new: usize) -> Result<(), SimError> {
        let agent_id = self.agent_id(agent);
        if !self.agents[agent].alive {
            return Ok(());
        }
        if self.agents[agent].mdc != old {
            return Err(SimError::Invariant(format!(
                "agent {agent_id} handover from MDC {old} but it is served by {}",
                self.agents[agent].mdc
            )));
        }
        self.note(Detail::Handover { agent: agent_id, old, new });
        for service in 0..self.cfg.services.len() {
            if let Some(id) = self.agents[agent].services[service].session.take() {
                let kind = self.cfg.services[service].kind;
                self.mdcs[old].detach(agent_id, kind);
                if self.sessions[id].inflight_until.is_some() {
                    self.sessions[id].state = SessionState::Closing;
                    self.agents[agent].draining.push(id);
                } else {
                    self.release(id)?;
                }
            }
        }
        self.agents[agent].mdc = new;
        for service in 0..self.cfg.services.len() {
            self.try_open(q, t, agent, service)?;
        }
        Ok(())
    }

    fn on_task_start(&mut self, q: &mut Queue, t: SimTime, session: usize) -> Result<(), SimError> {
        let s = &self.sessions[session];
        if s.state != SessionState::Open {
            return Ok(());
        }
        if s.inflight_until.is_some() {
            return Err(SimError::Overlap { session });
        }
        let spec = &self.cfg.services[s.service];
        let (mdc, pu, agent) = (s.mdc_id, s.pu_index, s.agent_id);
        let finish = t + SimTime::from_secs(spec.op_time);
        let bytes = spec.total_bytes();
        let kind = spec.kind;
        let next = match spec.schedule {
            RequestSchedule::Periodic { period } => Some(t + SimTime::from_secs(period)),
            RequestSchedule::UniformGap { .. } => None,
        };
        self.sessions[session].inflight_until = Some(finish);
        let m = &mut self.mdcs[mdc];
        m.start_op(t, pu);
        let c = m.counters.entry(kind).or_default();
        c.requests += 1;
        c.traffic_bytes += bytes;
        self.note(Detail::OpStart { agent, service: kind, mdc, pu, session });
        self.schedule(q, finish, SimEvent::TaskFinish { session })?;
        if let Some(next) = next {
            self.schedule(q, next, SimEvent::TaskStart { session })?;
        }
        Ok(())
    }

    fn on_task_finish(&mut self, q: &mut Queue, t: SimTime, session: usize) -> Result<(), SimError> {
        let s = &mut self.sessions[session];
        if s.inflight_until != Some(t) {
            // cancelled at agent exit
            return Ok(());
        }
        s.inflight_until = None;
        let (mdc, pu, agent_id, service, state) = (s.mdc_id, s.pu_index, s.agent_id, s.service, s.state);
        let spec = &self.cfg.services[service];
        let (kind, bytes) = (spec.kind, spec.total_bytes());
        let m = &mut self.mdcs[mdc];
        m.end_op(t, pu);
        let c = m.counters.entry(kind).or_default();
        c.served += 1;
        c.responses += 1;
        c.traffic_bytes += bytes;
        self.note(Detail::OpFinish { agent: agent_id, service: kind, mdc, pu, session });
        match state {
            SessionState::Closing => {
                let agent = self.agent_index(agent_id);
                self.agents[agent].draining.retain(|&d| d != session);
                self.release(session)?;
            }
            SessionState::Open => {
                if matches!(spec.schedule, RequestSchedule::UniformGap { .. }) {
                    let agent = self.agent_index(agent_id);
                    let gap = self.gap(agent, service).expect("gap service");
                    self.schedule(q, t + gap, SimEvent::TaskStart { session })?;
                }
            }
            SessionState::Closed => {
                return Err(SimError::Invariant(format!("operation finished on closed session {session}")));
            }
        }
        Ok(())
    }

    fn agent_index(&self, agent_id: u64) -> usize {
        // itineraries are sorted by agent id in generated traces, but not
        // necessarily in hand-built ones
        match self.itineraries.binary_search_by_key(&agent_id, |it| it.agent_id) {
            Ok(i) => i,
            Err(_) => self
                .itineraries
                .iter()
                .position(|it| it.agent_id == agent_id)
                .expect("known agent"),
        }
    }

    fn sample(&mut self, t: SimTime, prev: Option<(SimTime, Vec<f64>)>, rows: &mut Vec<SampleRow>) {
        for m in self.mdcs.iter_mut() {
            m.advance(t);
            let mean_power_w = match &prev {
                Some((pt, energies)) if t > *pt => (m.energy_j - energies[m.mdc_id]) / (t - *pt).as_secs(),
                _ => m.power(),
            };
            rows.push(SampleRow {
                t: t.as_secs(),
                mdc_id: m.mdc_id,
                reserved_threads: m.reserved_threads(),
                busy_pus: m.busy_pus,
                power_w: m.power(),
                rejections_cum: m.rejected_count,
                served_inference_cum: m.counter(ServiceKind::Inference).served,
                served_training_cum: m.counter(ServiceKind::Training).served,
                traffic_bytes_cum: m.counters.values().map(|c| c.traffic_bytes).sum(),
                busy_threads: m.busy_threads,
                mean_power_w,
                energy_j_cum: m.energy_j,
                busy_thread_s_cum: m.busy_thread_s,
            });
        }
    }

    fn check_invariants(&self) -> Result<(), SimError> {
        for m in &self.mdcs {
            let open = self
                .sessions
                .iter()
                .filter(|s| s.mdc_id == m.mdc_id && s.state != SessionState::Closed)
                .count();
            if open != m.reserved_threads() {
                return Err(SimError::Invariant(format!(
                    "MDC {} reserves {} threads for {open} live sessions",
                    m.mdc_id,
                    m.reserved_threads()
                )));
            }
            for (k, pu) in m.pus.iter().enumerate() {
                if pu.busy_ops > pu.reserved {
                    return Err(SimError::Invariant(format!(
                        "MDC {} PU {k} runs {} ops on {} reserved threads",
                        m.mdc_id, pu.busy_ops, pu.reserved
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Replays the trace against the placement and returns per-MDC time series.
pub fn run_simulation(
    trace: &MobilityTrace,
    placement: &Placement,
    cfg: &SimConfig,
) -> Result<SimulationRawResults, SimError> {
    run_itineraries(&trace.itineraries, placement, cfg)
}

pub fn run_itineraries(
    itineraries: &[AgentItinerary],
    placement: &Placement,
    cfg: &SimConfig,
) -> Result<SimulationRawResults, SimError> {
    cfg.validate()?;
    placement
        .validate()
        .map_err(|e| SimError::Config(format!("placement: {e}")))?;
    let horizon = SimTime::from_secs(cfg.duration);
    let mut world = World {
        cfg,
        placement,
        itineraries,
        horizon,
        mdcs: (0..placement.mdcs.len())
            .map(|i| MdcState::new(i, cfg.mdc, cfg.power))
            .collect(),
        sessions: Vec::new(),
        agents: vec![AgentRt::default(); itineraries.len()],
        live: 0,
        log: cfg.record_log.then(Vec::new),
        current: (SimTime::ZERO, 0, EventKind::MetricSample),
    };

    let mut q: Queue = EventQueue::new();
    let mut order: Vec<usize> = (0..itineraries.len()).collect();
    order.sort_by(|&a, &b| {
        itineraries[a]
            .t_enter
            .total_cmp(&itineraries[b].t_enter)
            .then(itineraries[a].agent_id.cmp(&itineraries[b].agent_id))
    });
    for agent in order {
        let t = SimTime::from_secs(itineraries[agent].t_enter);
        if t <= horizon && itineraries[agent].t_exit >= itineraries[agent].t_enter {
            q.schedule(t, SimEvent::AgentEnter { agent })?;
        }
    }

    let step = SimTime::from_secs(cfg.sample_interval);
    let mut sample_times: Vec<SimTime> = (0..).map(|k| SimTime(k * step.0)).take_while(|t| *t <= horizon).collect();
    if sample_times.last() != Some(&horizon) {
        sample_times.push(horizon);
    }
    let mut rows = Vec::with_capacity(sample_times.len() * world.mdcs.len());
    let mut live_agents = Vec::with_capacity(sample_times.len());
    let mut prev: Option<(SimTime, Vec<f64>)> = None;
    for &ts in &sample_times {
        q.schedule(ts, SimEvent::MetricSample)?;
        q.run_until(ts, |q, ev| world.handle(q, ev))?;
        world.check_invariants()?;
        world.sample(ts, prev.take(), &mut rows);
        live_agents.push((ts.as_secs(), world.live));
        prev = Some((ts, world.mdcs.iter().map(|m| m.energy_j).collect()));
    }

    let totals = world
        .mdcs
        .iter()
        .map(|m| MdcTotals {
            mdc_id: m.mdc_id,
            rejected: m.rejected_count,
            counters: m.counters.clone(),
            energy_j: m.energy_j,
            busy_thread_s: m.busy_thread_s,
        })
        .collect();
    Ok(SimulationRawResults {
        meta: RawMeta {
            scenario_tag: placement.scenario_tag.to_string(),
            n_mdcs: placement.mdcs.len(),
            config: cfg.clone(),
            totals,
        },
        samples: rows,
        live_agents,
        log: world.log,
    })
}

/// First-fit violations found by replaying opens and releases from a log.
///
/// An open on PU `k` is a violation unless PUs `0..k` were all full, and a
/// rejection is one unless every PU was full.
pub fn audit_first_fit(log: &[LogRecord], mdc: MdcConfig) -> Vec<String> {
    let mut occupancy: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    let mut violations = Vec::new();
    for rec in log {
        match rec.detail {
            Detail::Open { mdc: m, pu, session, .. } => {
                let occ = occupancy.entry(m).or_insert_with(|| vec![0; mdc.pus]);
                if let Some(k) = (0..pu).find(|&k| occ[k] < mdc.threads_per_pu) {
                    violations.push(format!(
                        "t={} session {session} opened on MDC {m} PU {pu} while PU {k} had {} of {} threads",
                        rec.t, occ[k], mdc.threads_per_pu
                    ));
                }
                if occ[pu] >= mdc.threads_per_pu {
                    violations.push(format!("t={} MDC {m} PU {pu} over capacity", rec.t));
                }
                occ[pu] += 1;
            }
            Detail::Release { mdc: m, pu, .. } => {
                let occ = occupancy.entry(m).or_insert_with(|| vec![0; mdc.pus]);
                occ[pu] = occ[pu].saturating_sub(1);
            }
            Detail::Reject { mdc: m, agent, .. } => {
                let occ = occupancy.entry(m).or_insert_with(|| vec![0; mdc.pus]);
                if occ.iter().any(|&c| c < mdc.threads_per_pu) {
                    violations.push(format!("t={} agent {agent} rejected by MDC {m} with free threads", rec.t));
                }
            }
            _ => {}
        }
    }
    violations
}

const TIMESERIES_HEADER: [&str; 13] = [
    "t",
    "mdc_id",
    "reserved_threads",
    "busy_pus",
    "power_w",
    "rejections_cum",
    "served_inference_cum",
    "served_training_cum",
    "traffic_bytes_cum",
    "busy_threads",
    "mean_power_w",
    "energy_j_cum",
    "busy_thread_s_cum",
];

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SimError + '_ {
    move |source| SimError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn write_event_log(log: &[LogRecord], path: impl AsRef<Path>) -> Result<(), SimError> {
    let path = path.as_ref();
    let mut out = BufWriter::new(File::create(path).map_err(io_err(path))?);
    writeln!(out, "t,seq,kind,details").map_err(io_err(path))?;
    for r in log {
        writeln!(out, "{:.6},{},{},{}", r.t.as_secs(), r.seq, r.kind.as_str(), r.detail).map_err(io_err(path))?;
    }
    out.flush().map_err(io_err(path))
}

pub fn read_event_log(path: impl AsRef<Path>) -> Result<Vec<LogRecord>, SimError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let bad = |line: usize, msg: String| SimError::Parse {
        path: format!("{}:{}", path.display(), line),
        msg,
    };
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let mut f = line.splitn(4, ',');
        let (t, seq, kind, detail) = match (f.next(), f.next(), f.next(), f.next()) {
            (Some(a), Some(b), Some(c), Some(d)) => (a, b, c, d),
            _ => return Err(bad(i + 1, "expected 4 fields".into())),
        };
        out.push(LogRecord {
            t: SimTime::from_secs(t.parse::<f64>().map_err(|e| bad(i + 1, e.to_string()))?),
            seq: seq.parse().map_err(|e: std::num::ParseIntError| bad(i + 1, e.to_string()))?,
            kind: kind.parse().map_err(|e| bad(i + 1, e))?,
            detail: detail.parse().map_err(|e| bad(i + 1, e))?,
        });
    }
    Ok(out)
}

impl SimulationRawResults {
    /// Writes `timeseries.csv`, `live_agents.csv`, `meta.json` and, when a
    /// log was recorded, `events.csv` into `dir`.
    pub fn write_dir(&self, dir: impl AsRef<Path>) -> Result<(), SimError> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let path = dir.join("timeseries.csv");
        let mut out = BufWriter::new(File::create(&path).map_err(io_err(&path))?);
        writeln!(out, "{}", TIMESERIES_HEADER.join(",")).map_err(io_err(&path))?;
        for r in &self.samples {
            writeln!(
                out,
                "{:.3},{},{},{},{},{},{},{},{},{},{},{},{}",
                r.t,
                r.mdc_id,
                r.reserved_threads,
                r.busy_pus,
                r.power_w,
                r.rejections_cum,
                r.served_inference_cum,
                r.served_training_cum,
                r.traffic_bytes_cum,
                r.busy_threads,
                r.mean_power_w,
                r.energy_j_cum,
                r.busy_thread_s_cum
            )
            .map_err(io_err(&path))?;
        }
        out.flush().map_err(io_err(&path))?;

        let path = dir.join("live_agents.csv");
        let mut out = BufWriter::new(File::create(&path).map_err(io_err(&path))?);
        writeln!(out, "t,live_agents").map_err(io_err(&path))?;
        for (t, n) in &self.live_agents {
            writeln!(out, "{t:.3},{n}").map_err(io_err(&path))?;
        }
        out.flush().map_err(io_err(&path))?;

        let path = dir.join("meta.json");
        let text = serde_json::to_string_pretty(&self.meta).expect("meta serializes");
        fs::write(&path, text + "\n").map_err(io_err(&path))?;

        if let Some(log) = &self.log {
            write_event_log(log, dir.join("events.csv"))?;
        }
        Ok(())
    }

    pub fn read_dir(dir: impl AsRef<Path>) -> Result<Self, SimError> {
        let dir = dir.as_ref();
        let path = dir.join("meta.json");
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let meta: RawMeta = serde_json::from_str(&text).map_err(|e| SimError::Parse {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;

        let parse_err = |path: &Path, e: csv::Error| SimError::Parse {
            path: path.display().to_string(),
            msg: e.to_string(),
        };
        let path = dir.join("timeseries.csv");
        let mut rdr = csv::Reader::from_path(&path).map_err(|e| parse_err(&path, e))?;
        let samples = rdr
            .deserialize::<SampleRow>()
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| parse_err(&path, e))?;

        let path = dir.join("live_agents.csv");
        let mut rdr = csv::Reader::from_path(&path).map_err(|e| parse_err(&path, e))?;
        let live_agents = rdr
            .deserialize::<(f64, u64)>()
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| parse_err(&path, e))?;

        let events = dir.join("events.csv");
        let log = if events.exists() { Some(read_event_log(&events)?) } else { None };
        Ok(Self {
            meta,
            samples,
            live_agents,
            log,
        })
    }
}
