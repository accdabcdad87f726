//! Fixed-tick (10 ms) re-implementation of the workload model, written
//! without the event queue. Each tick runs phases in a fixed order:
//! enters, handovers, exits, retries, op finishes, op starts, then the power
//! sample when the tick lands on the sampling grid.

use mdcsim::edgesim::{Detail, LogRecord, RequestSchedule, ServiceKind, SimConfig};
use mdcsim::rng;
use mdcsim::{AgentItinerary, GeoPoint, Placement};
use rand_chacha::ChaCha8Rng;

pub const TICK: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Change {
    pub t: f64,
    pub what: &'static str,
    pub agent: u64,
    pub service: ServiceKind,
    pub mdc: usize,
    pub pu: Option<usize>,
}

#[derive(Debug, Clone, Default)]
pub struct RefOutput {
    pub changes: Vec<Change>,
    /// (t, per-MDC power) at every sampling instant.
    pub power: Vec<(f64, Vec<f64>)>,
}

#[derive(Debug, Clone)]
struct Sess {
    svc: usize,
    mdc: usize,
    pu: usize,
    closing: bool,
    next_start: Option<f64>,
    op_end: Option<f64>,
}

#[derive(Debug, Clone)]
struct Agent {
    alive: bool,
    done: bool,
    mdc: usize,
    next_check: f64,
    open: Vec<Option<usize>>,
    draining: Vec<usize>,
    retry_at: Vec<Option<f64>>,
    gaps: Option<ChaCha8Rng>,
}

fn lerp(a: GeoPoint, b: GeoPoint, f: f64) -> GeoPoint {
    GeoPoint::new(a.x + (b.x - a.x) * f, a.y + (b.y - a.y) * f)
}

fn where_at(it: &AgentItinerary, t: f64) -> GeoPoint {
    let frac = |t0: f64, t1: f64| if t1 > t0 { ((t - t0) / (t1 - t0)).clamp(0.0, 1.0) } else { 1.0 };
    if t <= it.t_arrive {
        lerp(it.entry, it.destination, frac(it.t_enter, it.t_arrive))
    } else if t <= it.t_depart {
        it.destination
    } else {
        lerp(it.destination, it.exit, frac(it.t_depart, it.t_exit))
    }
}

fn closest(p: GeoPoint, candidates: &[GeoPoint]) -> usize {
    let mut best = 0;
    for (i, c) in candidates.iter().enumerate() {
        let d = (c.x - p.x).powi(2) + (c.y - p.y).powi(2);
        let b = (candidates[best].x - p.x).powi(2) + (candidates[best].y - p.y).powi(2);
        if d < b {
            best = i;
        }
    }
    best
}

fn mdc_for(p: GeoPoint, placement: &Placement) -> usize {
    let ap = closest(p, &placement.aps);
    closest(placement.aps[ap], &placement.mdcs)
}

fn due(t_event: f64, t: f64) -> bool {
    t_event <= t + 1e-9
}

pub fn simulate(itineraries: &[AgentItinerary], placement: &Placement, cfg: &SimConfig) -> RefOutput {
    let n_mdc = placement.mdcs.len();
    let n_pu = cfg.mdc.pus;
    let per_pu = cfg.mdc.threads_per_pu;
    let services = &cfg.services;
    // reserved[mdc][pu], busy[mdc][pu]
    let mut reserved = vec![vec![0usize; n_pu]; n_mdc];
    let mut busy = vec![vec![0usize; n_pu]; n_mdc];
    let mut sessions: Vec<Sess> = Vec::new();
    let mut agents: Vec<Agent> = itineraries
        .iter()
        .map(|it| Agent {
            alive: false,
            done: false,
            mdc: 0,
            next_check: it.t_enter,
            open: vec![None; services.len()],
            draining: Vec::new(),
            retry_at: vec![None; services.len()],
            gaps: None,
        })
        .collect();
    let mut out = RefOutput::default();
    let last_tick = (cfg.duration / TICK).round() as i64;
    let sample_every = (cfg.sample_interval / TICK).round() as i64;

    let mut order: Vec<usize> = (0..itineraries.len()).collect();
    order.sort_by(|&a, &b| {
        itineraries[a]
            .t_enter
            .total_cmp(&itineraries[b].t_enter)
            .then(itineraries[a].agent_id.cmp(&itineraries[b].agent_id))
    });

    let draw_gap = |agent: &mut Agent, id: u64, svc: usize| -> f64 {
        let rng = agent
            .gaps
            .get_or_insert_with(|| rng::entity_substream(cfg.seed, &["request-gaps"], id));
        services[svc].sample_gap(rng).expect("gap service")
    };

    for k in 0..=last_tick {
        let t = k as f64 * TICK;
        let mut log = |what, agent: u64, svc: usize, mdc, pu| {
            out.changes.push(Change { t, what, agent, service: services[svc].kind, mdc, pu });
        };

        macro_rules! try_open {
            ($a:expr, $svc:expr) => {{
                let a: usize = $a;
                let svc: usize = $svc;
                let id = itineraries[a].agent_id;
                let mdc = agents[a].mdc;
                match (0..n_pu).find(|&p| reserved[mdc][p] < per_pu) {
                    Some(pu) => {
                        reserved[mdc][pu] += 1;
                        let first = match services[svc].schedule {
                            RequestSchedule::Periodic { .. } => t,
                            RequestSchedule::UniformGap { .. } => t + draw_gap(&mut agents[a], id, svc),
                        };
                        sessions.push(Sess { svc, mdc, pu, closing: false, next_start: Some(first), op_end: None });
                        agents[a].open[svc] = Some(sessions.len() - 1);
                        log("open", id, svc, mdc, Some(pu));
                    }
                    None => {
                        log("reject", id, svc, mdc, None);
                        if agents[a].retry_at[svc].is_none() {
                            agents[a].retry_at[svc] = Some(t + cfg.retry_interval);
                        }
                    }
                }
            }};
        }

        // enters
        for &a in &order {
            let it = &itineraries[a];
            if !agents[a].alive && !agents[a].done && due(it.t_enter, t) {
                agents[a].alive = true;
                agents[a].mdc = mdc_for(it.entry, placement);
                agents[a].next_check = it.t_enter + cfg.handover_step;
                for svc in 0..services.len() {
                    try_open!(a, svc);
                }
            }
        }

        // handovers on the per-agent position grid
        for &a in &order {
            let it = itineraries[a];
            while agents[a].alive
                && due(agents[a].next_check, t)
                && agents[a].next_check <= it.t_exit
                && agents[a].next_check < cfg.duration
            {
                let tc = agents[a].next_check;
                agents[a].next_check += cfg.handover_step;
                let new = mdc_for(where_at(&it, tc), placement);
                let old = agents[a].mdc;
                if new == old {
                    continue;
                }
                for svc in 0..services.len() {
                    if let Some(s) = agents[a].open[svc].take() {
                        if sessions[s].op_end.is_some() {
                            sessions[s].closing = true;
                            agents[a].draining.push(s);
                        } else {
                            reserved[old][sessions[s].pu] -= 1;
                            sessions[s].next_start = None;
                            log("release", it.agent_id, svc, old, Some(sessions[s].pu));
                        }
                    }
                }
                agents[a].mdc = new;
                for svc in 0..services.len() {
                    try_open!(a, svc);
                }
            }
        }

        // exits
        for &a in &order {
            let it = &itineraries[a];
            if agents[a].alive && due(it.t_exit, t) {
                let mut ids: Vec<usize> = agents[a].draining.drain(..).collect();
                for svc in 0..services.len() {
                    agents[a].retry_at[svc] = None;
                    if let Some(s) = agents[a].open[svc].take() {
                        ids.push(s);
                    }
                }
                ids.sort_unstable();
                for s in ids {
                    let svc = sessions[s].svc;
                    let (mdc, pu) = (sessions[s].mdc, sessions[s].pu);
                    if sessions[s].op_end.take().is_some() {
                        busy[mdc][pu] -= 1;
                        log("op_cancel", it.agent_id, svc, mdc, Some(pu));
                    }
                    reserved[mdc][pu] -= 1;
                    sessions[s].next_start = None;
                    log("release", it.agent_id, svc, mdc, Some(pu));
                }
                agents[a].alive = false;
                agents[a].done = true;
            }
        }

        // retries
        for &a in &order {
            for svc in 0..services.len() {
                if let Some(rt) = agents[a].retry_at[svc] {
                    if due(rt, t) {
                        agents[a].retry_at[svc] = None;
                        if agents[a].alive && agents[a].open[svc].is_none() {
                            try_open!(a, svc);
                        }
                    }
                }
            }
        }

        // op finishes
        for &a in &order {
            let id = itineraries[a].agent_id;
            let mut mine: Vec<usize> = agents[a].open.iter().flatten().copied().collect();
            mine.extend(agents[a].draining.iter().copied());
            mine.sort_unstable();
            for s in mine {
                let Some(end) = sessions[s].op_end else { continue };
                if !due(end, t) {
                    continue;
                }
                let svc = sessions[s].svc;
                let (mdc, pu) = (sessions[s].mdc, sessions[s].pu);
                sessions[s].op_end = None;
                busy[mdc][pu] -= 1;
                log("op_finish", id, svc, mdc, Some(pu));
                if sessions[s].closing {
                    agents[a].draining.retain(|&d| d != s);
                    reserved[mdc][pu] -= 1;
                    log("release", id, svc, mdc, Some(pu));
                } else if matches!(services[svc].schedule, RequestSchedule::UniformGap { .. }) {
                    sessions[s].next_start = Some(end + draw_gap(&mut agents[a], id, svc));
                }
            }
        }

        // op starts
        for &a in &order {
            let id = itineraries[a].agent_id;
            for (svc, spec) in services.iter().enumerate() {
                let Some(s) = agents[a].open[svc] else { continue };
                let Some(start) = sessions[s].next_start else { continue };
                if !due(start, t) || sessions[s].op_end.is_some() {
                    continue;
                }
                let (mdc, pu) = (sessions[s].mdc, sessions[s].pu);
                busy[mdc][pu] += 1;
                sessions[s].op_end = Some(start + spec.op_time);
                sessions[s].next_start = match spec.schedule {
                    RequestSchedule::Periodic { period } => Some(start + period),
                    RequestSchedule::UniformGap { .. } => None,
                };
                log("op_start", id, svc, mdc, Some(pu));
            }
        }

        if k % sample_every == 0 || k == last_tick {
            let power = (0..n_mdc)
                .map(|m| {
                    let active = busy[m].iter().filter(|&&b| b > 0).count();
                    cfg.power.idle_w * n_pu as f64 + (cfg.power.active_w - cfg.power.idle_w) * active as f64
                })
                .collect();
            out.power.push((t, power));
        }
    }
    out
}

/// Changes extracted from the simulator's event log.
pub fn changes_from_log(log: &[LogRecord]) -> Vec<Change> {
    log.iter()
        .filter_map(|r| {
            let t = r.t.as_secs();
            let (what, agent, service, mdc, pu) = match r.detail {
                Detail::Open { agent, service, mdc, pu, .. } => ("open", agent, service, mdc, Some(pu)),
                Detail::Reject { agent, service, mdc } => ("reject", agent, service, mdc, None),
                Detail::Release { agent, service, mdc, pu, .. } => ("release", agent, service, mdc, Some(pu)),
                Detail::OpStart { agent, service, mdc, pu, .. } => ("op_start", agent, service, mdc, Some(pu)),
                Detail::OpFinish { agent, service, mdc, pu, .. } => ("op_finish", agent, service, mdc, Some(pu)),
                Detail::OpCancel { agent, service, mdc, pu, .. } => ("op_cancel", agent, service, mdc, Some(pu)),
                _ => return None,
            };
            Some(Change { t, what, agent, service, mdc, pu })
        })
        .collect()
}

/// Pairs changes per (agent, service, kind) in time order and reports any
/// mismatch beyond one tick.
pub fn compare(expected: &[Change], actual: &[Change]) -> Vec<String> {
    let key = |c: &Change| (c.agent, c.service, c.what);
    let mut a: Vec<Change> = expected.to_vec();
    let mut b: Vec<Change> = actual.to_vec();
    let sort = |v: &mut Vec<Change>| {
        v.sort_by(|x, y| key(x).cmp(&key(y)).then(x.t.total_cmp(&y.t)));
    };
    sort(&mut a);
    sort(&mut b);
    let mut problems = Vec::new();
    if a.len() != b.len() {
        problems.push(format!("change count differs: reference {} vs simulator {}", a.len(), b.len()));
    }
    for (x, y) in a.iter().zip(&b) {
        let same = key(x) == key(y) && x.mdc == y.mdc && x.pu == y.pu && (x.t - y.t).abs() <= TICK + 1e-9;
        if !same {
            problems.push(format!("reference {x:?} vs simulator {y:?}"));
            if problems.len() > 10 {
                break;
            }
        }
    }
    problems
}
