//! Device-to-MDC routing: nearest AP, then that AP's MDC.

use crate::geometry::{nearest_index, GeoPoint};
use crate::mobility::{position_at, sample_times, AgentItinerary};
use crate::placement::Placement;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Handover {
    pub t: f64,
    pub old_mdc: usize,
    pub new_mdc: usize,
}

pub fn serving_ap(p: &GeoPoint, placement: &Placement) -> usize {
    nearest_index(p, &placement.aps).expect("placement has APs")
}

pub fn serving_mdc(p: &GeoPoint, placement: &Placement) -> usize {
    placement.ap_to_mdc[serving_ap(p, placement)]
}

/// MDC changes along the agent's path, evaluated on its sample grid up to
/// (excluding) `horizon`.
pub fn handover_schedule(
    it: &AgentItinerary,
    placement: &Placement,
    sample_step: f64,
    horizon: f64,
) -> Vec<Handover> {
    let mut out = Vec::new();
    let mut current: Option<usize> = None;
    for t in sample_times(it, sample_step, horizon) {
        let p = position_at(it, t).expect("sample inside lifetime");
        let mdc = serving_mdc(&p, placement);
        match current {
            Some(old) if old != mdc => out.push(Handover { t, old_mdc: old, new_mdc: mdc }),
            _ => {}
        }
        current = Some(mdc);
    }
    out
}

/// Serving MDC at `t` rebuilt from the entry MDC and the handover list.
pub fn mdc_at(initial: usize, schedule: &[Handover], t: f64) -> usize {
    schedule
        .iter()
        .take_while(|h| h.t <= t)
        .last()
        .map_or(initial, |h| h.new_mdc)
}
