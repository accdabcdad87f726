//! Deterministic discrete-event kernel.
//!
//! Events are totally ordered by `(time, seq)` where `seq` is the insertion
//! counter, so events scheduled for the same instant pop in FIFO order.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fmt;

use thiserror::Error;

/// Simulation time as whole microseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct SimTime(pub u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);
    pub const MICROS_PER_SEC: u64 = 1_000_000;

    /// Rounds to the nearest microsecond; negative inputs clamp to zero.
    pub fn from_secs(s: f64) -> SimTime {
        if s <= 0.0 || s.is_nan() {
            SimTime(0)
        } else {
            SimTime((s * Self::MICROS_PER_SEC as f64).round() as u64)
        }
    }

    pub fn as_secs(self) -> f64 {
        self.0 as f64 / Self::MICROS_PER_SEC as f64
    }

    pub fn micros(self) -> u64 {
        self.0
    }
}

impl std::ops::Add for SimTime {
    type Output = SimTime;
    fn add(self, rhs: SimTime) -> SimTime {
        SimTime(self.0 + rhs.0)
    }
}

impl std::ops::Sub for SimTime {
    type Output = SimTime;
    fn sub(self, rhs: SimTime) -> SimTime {
        SimTime(self.0 - rhs.0)
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{:06}", self.0 / Self::MICROS_PER_SEC, self.0 % Self::MICROS_PER_SEC)
    }
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("causality violation: event at t={at} scheduled while clock is at t={now}")]
    Causality { at: SimTime, now: SimTime },
    #[error("handler failed on event seq={seq} at t={t} ({event}): {message}")]
    Handler {
        t: SimTime,
        seq: u64,
        event: String,
        message: String,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Event<P> {
    pub t: SimTime,
    pub seq: u64,
    pub payload: P,
}

struct Entry<P>(Event<P>);

impl<P> PartialEq for Entry<P> {
    fn eq(&self, other: &Self) -> bool {
        self.0.t == other.0.t && self.0.seq == other.0.seq
    }
}

impl<P> Eq for Entry<P> {}

impl<P> PartialOrd for Entry<P> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<P> Ord for Entry<P> {
    // BinaryHeap is a max-heap; reverse for earliest-first.
    fn cmp(&self, other: &Self) -> Ordering {
        (other.0.t, other.0.seq).cmp(&(self.0.t, self.0.seq))
    }
}

pub struct EventQueue<P> {
    heap: BinaryHeap<Entry<P>>,
    now: SimTime,
    next_seq: u64,
    dispatched: u64,
}

impl<P> Default for EventQueue<P> {
    fn default() -> Self {
        Self::new()
    }
}

impl<P> EventQueue<P> {
    pub fn new() -> Self {
        Self {
            heap: BinaryHeap::new(),
            now: SimTime::ZERO,
            next_seq: 0,
            dispatched: 0,
        }
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    pub fn dispatched(&self) -> u64 {
        self.dispatched
    }

    pub fn peek_time(&self) -> Option<SimTime> {
        self.heap.peek().map(|e| e.0.t)
    }

    /// Enqueues `payload` at `t`, returning its sequence number.
    pub fn schedule(&mut self, t: SimTime, payload: P) -> Result<u64, EngineError> {
        if t < self.now {
            return Err(EngineError::Causality { at: t, now: self.now });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Entry(Event { t, seq, payload }));
        Ok(seq)
    }

    pub fn schedule_in(&mut self, delay: SimTime, payload: P) -> u64 {
        let t = self.now + delay;
        self.schedule(t, payload).expect("non-negative delay")
    }

    pub fn pop_next(&mut self) -> Option<Event<P>> {
        let Entry(ev) = self.heap.pop()?;
        self.now = ev.t;
        Some(ev)
    }

    /// Dispatches every event with `t <= t_end`, then parks the clock at
    /// `t_end`. Handler errors abort the run with the event attached.
    pub fn run_until<E, F>(&mut self, t_end: SimTime, mut handler: F) -> Result<(), EngineError>
    where
        P: fmt::Debug,
        E: fmt::Display,
        F: FnMut(&mut EventQueue<P>, &Event<P>) -> Result<(), E>,
    {
        if t_end < self.now {
            return Err(EngineError::Causality { at: t_end, now: self.now });
        }
        while self.peek_time().is_some_and(|t| t <= t_end) {
            let ev = self.pop_next().expect("peeked");
            self.dispatched += 1;
            handler(self, &ev).map_err(|e| EngineError::Handler {
                t: ev.t,
                seq: ev.seq,
                event: format!("{:?}", ev.payload),
                message: e.to_string(),
            })?;
        }
        self.now = t_end;
        Ok(())
    }
}
