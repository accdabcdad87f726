//! Pedestrian trace generation.
//!
//! Agents spawn in waves at metro entry points, walk in a straight line to a
//! random point of an activity area, dwell, then walk to the entry point
//! nearest their destination and leave. All itinerary times are kept on a
//! millisecond grid so the CSV form (3 decimals) is lossless.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{nearest_index, GeoPoint, ScenarioMap};
use crate::rng;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: u64, msg: String },
    #[error("invalid mobility config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MobilityConfig {
    pub wave_period: f64,
    pub wave_size: usize,
    pub walk_speed: f64,
    pub dwell_min: f64,
    pub dwell_max: f64,
    pub duration: f64,
    pub sample_step: f64,
}

impl Default for MobilityConfig {
    fn default() -> Self {
        Self {
            wave_period: 180.0,
            wave_size: 200,
            walk_speed: 1.4,
            dwell_min: 5.0,
            dwell_max: 30.0,
            duration: 36_000.0,
            sample_step: 1.0,
        }
    }
}

impl MobilityConfig {
    pub fn validate(&self) -> Result<(), TraceError> {
        let positive = [
            ("wave_period", self.wave_period),
            ("walk_speed", self.walk_speed),
            ("dwell_min", self.dwell_min),
            ("dwell_max", self.dwell_max),
            ("duration", self.duration),
            ("sample_step", self.sample_step),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(TraceError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.wave_size == 0 {
            return Err(TraceError::Config("wave_size must be at least 1".into()));
        }
        if self.dwell_min > self.dwell_max {
            return Err(TraceError::Config(format!(
                "dwell_min {} exceeds dwell_max {}",
                self.dwell_min, self.dwell_max
            )));
        }
        if to_ms(self.sample_step) == 0 {
            return Err(TraceError::Config("sample_step must be at least 1 ms".into()));
        }
        Ok(())
    }

    pub fn wave_count(&self) -> usize {
        (self.duration / self.wave_period).ceil() as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgentItinerary {
    pub agent_id: u64,
    pub t_enter: f64,
    pub entry: GeoPoint,
    pub destination: GeoPoint,
    pub t_arrive: f64,
    pub t_depart: f64,
    pub exit: GeoPoint,
    pub t_exit: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRecord {
    pub t: f64,
    pub agent_id: u64,
    pub position: GeoPoint,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MobilityTrace {
    /// Sorted by `(t, agent_id)`.
    pub records: Vec<TraceRecord>,
    pub itineraries: Vec<AgentItinerary>,
}

impl MobilityTrace {
    pub fn live_agents_at(&self, t: f64) -> usize {
        self.itineraries
            .iter()
            .filter(|it| it.t_enter <= t && t <= it.t_exit)
            .count()
    }
}

pub(crate) fn to_ms(seconds: f64) -> i64 {
    (seconds * 1000.0).round() as i64
}

pub(crate) fn from_ms(ms: i64) -> f64 {
    ms as f64 / 1000.0
}

/// Position of the agent at time `t`, or `None` outside `[t_enter, t_exit]`.
pub fn position_at(it: &AgentItinerary, t: f64) -> Option<GeoPoint> {
    if !(t >= it.t_enter && t <= it.t_exit) {
        return None;
    }
    let p = if t < it.t_arrive {
        it.entry.lerp(&it.destination, (t - it.t_enter) / (it.t_arrive - it.t_enter))
    } else if t <= it.t_depart {
        it.destination
    } else {
        it.destination.lerp(&it.exit, (t - it.t_depart) / (it.t_exit - it.t_depart))
    };
    Some(p)
}

/// Sample instants `t_enter + k * step` inside the agent's lifetime and
/// strictly before `horizon`.
pub fn sample_times(it: &AgentItinerary, step: f64, horizon: f64) -> impl Iterator<Item = f64> {
    let enter = to_ms(it.t_enter);
    let exit = to_ms(it.t_exit);
    let horizon = to_ms(horizon);
    let step = to_ms(step).max(1);
    (0..)
        .map(move |k| enter + k * step)
        .take_while(move |&t| t <= exit && t < horizon)
        .map(from_ms)
}

pub fn generate_trace(
    map: &ScenarioMap,
    cfg: &MobilityConfig,
    seed: u64,
) -> Result<MobilityTrace, TraceError> {
    let itineraries = generate_itineraries(map, cfg, seed)?;
    let records = sample_records(&itineraries, cfg.sample_step, cfg.duration);
    Ok(MobilityTrace { records, itineraries })
}

/// The itineraries `generate_trace` would produce, without sampling them.
pub fn generate_itineraries(
    map: &ScenarioMap,
    cfg: &MobilityConfig,
    seed: u64,
) -> Result<Vec<AgentItinerary>, TraceError> {
    cfg.validate()?;
    map.validate().map_err(|e| TraceError::Config(e.to_string()))?;
    let mut rng = rng::substream(seed, &["trace"]);
    let period_ms = to_ms(cfg.wave_period);
    let mut itineraries = Vec::with_capacity(cfg.wave_count() * cfg.wave_size);
    for wave in 0..cfg.wave_count() as i64 {
        let t_enter = wave * period_ms;
        for _ in 0..cfg.wave_size {
            let agent_id = itineraries.len() as u64;
            let entry = map.entry_points[rng.gen_range(0..map.entry_points.len())];
            let area = map.activity_areas[rng.gen_range(0..map.activity_areas.len())];
            let destination = area.point_at(rng.gen(), rng.gen());
            let dwell = rng.gen_range(cfg.dwell_min..=cfg.dwell_max);
            let exit_idx = nearest_index(&destination, &map.entry_points).expect("map has entries");
            let exit = map.entry_points[exit_idx];

            let walk_in = to_ms(entry.dist(&destination) / cfg.walk_speed).max(1);
            let walk_out = to_ms(destination.dist(&exit) / cfg.walk_speed).max(1);
            let t_arrive = t_enter + walk_in;
            let t_depart = t_arrive + to_ms(dwell);
            let t_exit = t_depart + walk_out;
            itineraries.push(AgentItinerary {
                agent_id,
                t_enter: from_ms(t_enter),
                entry,
                destination,
                t_arrive: from_ms(t_arrive),
                t_depart: from_ms(t_depart),
                exit,
                t_exit: from_ms(t_exit),
            });
        }
    }
    Ok(itineraries)
}

fn parse_id(path: &Path, v: f64, line: u64) -> Result<u64, TraceError> {
    if v >= 0.0 && v.fract() == 0.0 {
        Ok(v as u64)
    } else {
        Err(TraceError::Parse {
            path: path.display().to_string(),
            line,
            msg: "agent_id must be a non-negative integer".into(),
        })
    }
}

/// Reads only the itinerary file (`*.itineraries.csv`).
pub fn read_itineraries(path: impl AsRef<Path>) -> Result<Vec<AgentItinerary>, TraceError> {
    let path = path.as_ref();
    read_rows(path, &ITINERARY_HEADER)?
        .into_iter()
        .map(|(line, v)| {
            Ok(AgentItinerary {
                agent_id: parse_id(path, v[0], line)?,
                t_enter: v[1],
                entry: GeoPoint::new(v[2], v[3]),
                destination: GeoPoint::new(v[4], v[5]),
                t_arrive: v[6],
                t_depart: v[7],
                exit: GeoPoint::new(v[8], v[9]),
                t_exit: v[10],
            })
        })
        .collect()
}

/// Samples every itinerary on its step grid, truncated at `duration`.
pub fn sample_records(itineraries: &[AgentItinerary], step: f64, duration: f64) -> Vec<TraceRecord> {
    RecordStream::new(itineraries, step, duration).collect()
}

/// Lazy `(t, agent_id)`-ordered merge of all itinerary samples. Memory is
/// proportional to the number of agents alive at once.
pub struct RecordStream<'a> {
    itineraries: &'a [AgentItinerary],
    by_enter: Vec<usize>,
    next: usize,
    step: i64,
    horizon: i64,
    heap: BinaryHeap<Reverse<(i64, u64, usize)>>,
}

impl<'a> RecordStream<'a> {
    pub fn new(itineraries: &'a [AgentItinerary], step: f64, horizon: f64) -> Self {
        let mut by_enter: Vec<usize> = (0..itineraries.len()).collect();
        by_enter.sort_by_key(|&i| (to_ms(itineraries[i].t_enter), itineraries[i].agent_id));
        Self {
            itineraries,
            by_enter,
            next: 0,
            step: to_ms(step).max(1),
            horizon: to_ms(horizon),
            heap: BinaryHeap::new(),
        }
    }

    fn admit(&mut self, idx: usize) {
        let it = &self.itineraries[idx];
        let t = to_ms(it.t_enter);
        if t <= to_ms(it.t_exit) && t < self.horizon {
            self.heap.push(Reverse((t, it.agent_id, idx)));
        }
    }
}

impl Iterator for RecordStream<'_> {
    type Item = TraceRecord;

    fn next(&mut self) -> Option<TraceRecord> {
        // Every agent entering no later than the heap head must be queued
        // before popping, otherwise ties on `t` could come out of id order.
        while let Some(&idx) = self.by_enter.get(self.next) {
            let head = self.heap.peek().map(|Reverse((t, _, _))| *t);
            if head.is_some_and(|t| to_ms(self.itineraries[idx].t_enter) > t) {
                break;
            }
            self.next += 1;
            self.admit(idx);
        }
        let Reverse((t, agent_id, idx)) = self.heap.pop()?;
        let it = &self.itineraries[idx];
        let after = t + self.step;
        if after <= to_ms(it.t_exit) && after < self.horizon {
            self.heap.push(Reverse((after, agent_id, idx)));
        }
        let t = from_ms(t);
        Some(TraceRecord {
            t,
            agent_id,
            position: position_at(it, t).expect("sample inside lifetime"),
        })
    }
}

/// `trace.csv` -> `trace.itineraries.csv`.
pub fn itinerary_path(path: &Path) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.itineraries.csv"))
}

const RECORD_HEADER: [&str; 4] = ["t", "agent_id", "x", "y"];
const ITINERARY_HEADER: [&str; 11] = [
    "agent_id", "t_enter", "ex", "ey", "dx", "dy", "t_arrive", "t_depart", "xx", "xy", "t_exit",
];

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TraceError + '_ {
    move |source| TraceError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn csv_err(path: &Path, e: csv::Error) -> TraceError {
    let line = e.position().map(|p| p.line()).unwrap_or(0);
    TraceError::Parse {
        path: path.display().to_string(),
        line,
        msg: e.to_string(),
    }
}

fn t3(t: f64) -> String {
    format!("{t:.3}")
}

pub fn write_trace(trace: &MobilityTrace, path: impl AsRef<Path>) -> Result<(), TraceError> {
    write_parts(trace.records.iter().copied(), &trace.itineraries, path.as_ref())
}

/// Same files as `write_trace` on the sampled trace, streamed from the
/// itineraries.
pub fn write_sampled_trace(
    itineraries: &[AgentItinerary],
    step: f64,
    duration: f64,
    path: impl AsRef<Path>,
) -> Result<(), TraceError> {
    write_parts(RecordStream::new(itineraries, step, duration), itineraries, path.as_ref())
}

fn write_parts(
    records: impl Iterator<Item = TraceRecord>,
    itineraries: &[AgentItinerary],
    path: &Path,
) -> Result<(), TraceError> {
    let mut out = BufWriter::new(File::create(path).map_err(io_err(path))?);
    writeln!(out, "{}", RECORD_HEADER.join(",")).map_err(io_err(path))?;
    for r in records {
        writeln!(out, "{},{},{},{}", t3(r.t), r.agent_id, r.position.x, r.position.y)
            .map_err(io_err(path))?;
    }
    out.flush().map_err(io_err(path))?;

    let ipath = itinerary_path(path);
    let mut out = BufWriter::new(File::create(&ipath).map_err(io_err(&ipath))?);
    writeln!(out, "{}", ITINERARY_HEADER.join(",")).map_err(io_err(&ipath))?;
    for it in itineraries {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            it.agent_id,
            t3(it.t_enter),
            it.entry.x,
            it.entry.y,
            it.destination.x,
            it.destination.y,
            t3(it.t_arrive),
            t3(it.t_depart),
            it.exit.x,
            it.exit.y,
            t3(it.t_exit)
        )
        .map_err(io_err(&ipath))?;
    }
    out.flush().map_err(io_err(&ipath))
}

fn rows<'a>(
    path: &'a Path,
    header: &[&str],
) -> Result<impl Iterator<Item = Result<(u64, Vec<f64>), TraceError>> + 'a, TraceError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(BufReader::new(file));
    let found = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    if found.iter().ne(header.iter().copied()) {
        return Err(TraceError::Parse {
            path: path.display().to_string(),
            line: 1,
            msg: format!("expected header {:?}, found {:?}", header.join(","), found.iter().collect::<Vec<_>>().join(",")),
        });
    }
    Ok(rdr.into_records().map(move |rec| {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let vals = rec
            .iter()
            .map(|f| f.trim().parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| TraceError::Parse {
                path: path.display().to_string(),
                line,
                msg: e.to_string(),
            })?;
        Ok((line, vals))
    }))
}

fn read_rows(path: &Path, header: &[&str]) -> Result<Vec<(u64, Vec<f64>)>, TraceError> {
    rows(path, header)?.collect()
}

fn to_record(path: &Path, line: u64, v: &[f64]) -> Result<TraceRecord, TraceError> {
    Ok(TraceRecord {
        t: v[0],
        agent_id: parse_id(path, v[1], line)?,
        position: GeoPoint::new(v[2], v[3]),
    })
}

/// Reads the records section of a trace file one row at a time.
pub fn stream_records(
    path: &Path,
) -> Result<impl Iterator<Item = Result<TraceRecord, TraceError>> + '_, TraceError> {
    Ok(rows(path, &RECORD_HEADER)?.map(move |r| r.and_then(|(line, v)| to_record(path, line, &v))))
}

pub fn read_trace(path: impl AsRef<Path>) -> Result<MobilityTrace, TraceError> {
    let path = path.as_ref();
    let records = read_rows(path, &RECORD_HEADER)?
        .into_iter()
        .map(|(line, v)| to_record(path, line, &v))
        .collect::<Result<Vec<_>, TraceError>>()?;
    let itineraries = read_itineraries(itinerary_path(path))?;
    Ok(MobilityTrace { records, itineraries })
}
