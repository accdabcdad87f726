//! AP and MDC placement: presence heatmap, weighted k-means and the
//! hospital-based deployment variants.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{nearest_index, Bounds, GeoPoint, ScenarioMap};
use crate::mobility::{MobilityTrace, TraceRecord};
use crate::rng;

pub const DEFAULT_RESOLUTION: usize = 40;
pub const DEFAULT_WINDOW: f64 = 60.0;
pub const DEFAULT_MAX_ITER: usize = 300;
/// Convergence tolerance as a fraction of the bounds diagonal.
pub const DEFAULT_TOL_FRACTION: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum PlacementError {
    #[error("k-means needs at least {k} positively weighted points, found {found}")]
    InfeasibleK { k: usize, found: usize },
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("unknown scenario tag {0:?} (expected C3, H1, H3 or H9)")]
    UnknownTag(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed placement file: {0}")]
    Parse(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ScenarioTag {
    C3,
    H1,
    H3,
    H9,
}

impl ScenarioTag {
    pub const ALL: [ScenarioTag; 4] = [ScenarioTag::C3, ScenarioTag::H1, ScenarioTag::H3, ScenarioTag::H9];

    pub fn as_str(&self) -> &'static str {
        match self {
            ScenarioTag::C3 => "C3",
            ScenarioTag::H1 => "H1",
            ScenarioTag::H3 => "H3",
            ScenarioTag::H9 => "H9",
        }
    }
}

impl fmt::Display for ScenarioTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScenarioTag {
    type Err = PlacementError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "C3" => Ok(ScenarioTag::C3),
            "H1" => Ok(ScenarioTag::H1),
            "H3" => Ok(ScenarioTag::H3),
            "H9" => Ok(ScenarioTag::H9),
            _ => Err(PlacementError::UnknownTag(s.to_string())),
        }
    }
}

/// Max-over-windows count of distinct agents per grid cell.
#[derive(Debug, Clone, PartialEq)]
pub struct PresenceGrid {
    pub resolution: usize,
    pub window: f64,
    pub bounds: Bounds,
    /// Row-major, row 0 is the southernmost row.
    pub cells: Vec<u32>,
}

impl PresenceGrid {
    pub fn cell_of(&self, p: &GeoPoint) -> (usize, usize) {
        cell_of(&self.bounds, self.resolution, p)
    }

    pub fn value(&self, col: usize, row: usize) -> u32 {
        self.cells[row * self.resolution + col]
    }

    pub fn cell_center(&self, col: usize, row: usize) -> GeoPoint {
        let cw = self.bounds.width / self.resolution as f64;
        let ch = self.bounds.height / self.resolution as f64;
        GeoPoint::new((col as f64 + 0.5) * cw, (row as f64 + 0.5) * ch)
    }

    /// Cell centers and weights in row-major order.
    pub fn weighted_points(&self) -> (Vec<GeoPoint>, Vec<f64>) {
        let n = self.resolution;
        let points = (0..n * n).map(|i| self.cell_center(i % n, i / n)).collect();
        let weights = self.cells.iter().map(|&v| v as f64).collect();
        (points, weights)
    }

    pub fn positive_cells(&self) -> usize {
        self.cells.iter().filter(|&&v| v > 0).count()
    }

    /// Headerless CSV matrix, first line is the southernmost row.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for row in self.cells.chunks(self.resolution) {
            let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out
    }
}

pub(crate) fn cell_of(bounds: &Bounds, resolution: usize, p: &GeoPoint) -> (usize, usize) {
    let idx = |v: f64, extent: f64| -> usize {
        let i = (v / extent * resolution as f64).floor();
        if i.is_nan() || i < 0.0 {
            0
        } else {
            (i as usize).min(resolution - 1)
        }
    };
    (idx(p.x, bounds.width), idx(p.y, bounds.height))
}

pub fn build_presence_grid(
    trace: &MobilityTrace,
    bounds: Bounds,
    resolution: usize,
    window: f64,
) -> Result<PresenceGrid, PlacementError> {
    presence_grid_from_records(trace.records.iter().copied(), bounds, resolution, window)
}

/// `build_presence_grid` over any time-sorted record sequence.
pub fn presence_grid_from_records(
    records: impl IntoIterator<Item = TraceRecord>,
    bounds: Bounds,
    resolution: usize,
    window: f64,
) -> Result<PresenceGrid, PlacementError> {
    if resolution == 0 || window.is_nan() || window <= 0.0 {
        return Err(PlacementError::Invalid(format!(
            "resolution must be >= 1 and window > 0, got {resolution} and {window}"
        )));
    }
    let mut cells = vec![0u32; resolution * resolution];
    let window_of = |t: f64| (t / window).floor() as i64;
    // Records are time-sorted, so each window is a contiguous run.
    let mut seen: Vec<(usize, u64)> = Vec::new();
    let mut flush = |seen: &mut Vec<(usize, u64)>| {
        seen.sort_unstable();
        seen.dedup();
        let mut i = 0;
        while i < seen.len() {
            let cell = seen[i].0;
            let j = i + seen[i..].iter().take_while(|(c, _)| *c == cell).count();
            cells[cell] = cells[cell].max((j - i) as u32);
            i = j;
        }
        seen.clear();
    };
    let mut current = None;
    for rec in records {
        let w = window_of(rec.t);
        if current != Some(w) {
            flush(&mut seen);
            current = Some(w);
        }
        let (col, row) = cell_of(&bounds, resolution, &rec.position);
        seen.push((row * resolution + col, rec.agent_id));
    }
    flush(&mut seen);
    Ok(PresenceGrid {
        resolution,
        window,
        bounds,
        cells,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub centroids: Vec<GeoPoint>,
    /// Cluster per input point; `None` for zero-weight points.
    pub assignment: Vec<Option<usize>>,
    /// Inertia after every assignment step, initial one included.
    pub inertia_history: Vec<f64>,
    pub iterations: usize,
}

impl KMeansResult {
    pub fn inertia(&self) -> f64 {
        *self.inertia_history.last().expect("at least one assignment")
    }
}

pub fn inertia(points: &[GeoPoint], weights: &[f64], centroids: &[GeoPoint]) -> f64 {
    points
        .iter()
        .zip(weights)
        .filter(|(_, &w)| w > 0.0)
        .map(|(p, &w)| {
            let d = centroids.iter().map(|c| p.dist2(c)).fold(f64::INFINITY, f64::min);
            w * d
        })
        .sum()
}

fn assign(points: &[GeoPoint], active: &[usize], centroids: &[GeoPoint], out: &mut [usize], dist2: &mut [f64]) {
    for (slot, &i) in active.iter().enumerate() {
        let c = nearest_index(&points[i], centroids).expect("k >= 1");
        out[slot] = c;
        dist2[slot] = points[i].dist2(&centroids[c]);
    }
}

fn sample_proportional(rng: &mut impl Rng, masses: &[f64]) -> Option<usize> {
    let total: f64 = masses.iter().sum();
    if total.is_nan() || total <= 0.0 {
        return None;
    }
    let r = rng.gen::<f64>() * total;
    let mut acc = 0.0;
    let mut last_positive = None;
    for (i, &m) in masses.iter().enumerate() {
        if m > 0.0 {
            acc += m;
            last_positive = Some(i);
            if r < acc {
                return Some(i);
            }
        }
    }
    last_positive
}

/// Weighted Lloyd iterations from a seeded k-means++ start.
///
/// Stops once no centroid moves by `tol` meters or more, or after `max_iter`
/// update steps. Zero-weight points take no part in the clustering.
pub fn weighted_kmeans(
    points: &[GeoPoint],
    weights: &[f64],
    k: usize,
    seed: u64,
    tol: f64,
    max_iter: usize,
) -> Result<KMeansResult, PlacementError> {
    if points.len() != weights.len() {
        return Err(PlacementError::Invalid(format!(
            "{} points but {} weights",
            points.len(),
            weights.len()
        )));
    }
    if let Some(i) = weights.iter().position(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(PlacementError::Invalid(format!("weight[{i}] = {} is not a finite nonnegative number", weights[i])));
    }
    if k == 0 {
        return Err(PlacementError::InfeasibleK { k, found: 0 });
    }
    let active: Vec<usize> = (0..points.len()).filter(|&i| weights[i] > 0.0).collect();
    if active.len() < k {
        return Err(PlacementError::InfeasibleK { k, found: active.len() });
    }

    let mut rng = rng::substream(seed, &["kmeans++"]);
    let mut chosen: Vec<usize> = Vec::with_capacity(k);
    let w_active: Vec<f64> = active.iter().map(|&i| weights[i]).collect();
    let first = sample_proportional(&mut rng, &w_active).expect("positive mass");
    chosen.push(first);
    let mut d2: Vec<f64> = active.iter().map(|&i| points[i].dist2(&points[active[first]])).collect();
    while chosen.len() < k {
        let masses: Vec<f64> = w_active.iter().zip(&d2).map(|(w, d)| w * d).collect();
        let next = sample_proportional(&mut rng, &masses)
            .unwrap_or_else(|| (0..active.len()).find(|s| !chosen.contains(s)).expect("k <= active"));
        chosen.push(next);
        let c = points[active[next]];
        for (slot, &i) in active.iter().enumerate() {
            d2[slot] = d2[slot].min(points[i].dist2(&c));
        }
    }
    let mut centroids: Vec<GeoPoint> = chosen.iter().map(|&s| points[active[s]]).collect();

    let mut labels = vec![0usize; active.len()];
    let mut dist2 = vec![0f64; active.len()];
    let mut history = Vec::new();
    let record = |dist2: &[f64], history: &mut Vec<f64>| {
        let value: f64 = w_active.iter().zip(dist2).map(|(w, d)| w * d).sum();
        if let Some(&prev) = history.last() {
            assert!(
                value <= prev * (1.0 + 1e-12) + 1e-9,
                "k-means inertia increased from {prev} to {value}"
            );
        }
        history.push(value);
    };

    assign(points, &active, &centroids, &mut labels, &mut dist2);
    record(&dist2, &mut history);
    let mut iterations = 0;
    while iterations < max_iter {
        iterations += 1;
        let mut sx = vec![0.0; k];
        let mut sy = vec![0.0; k];
        let mut sw = vec![0.0; k];
        for (slot, &i) in active.iter().enumerate() {
            let c = labels[slot];
            let w = w_active[slot];
            sx[c] += w * points[i].x;
            sy[c] += w * points[i].y;
            sw[c] += w;
        }
        let mut next: Vec<GeoPoint> = (0..k)
            .map(|c| {
                if sw[c] > 0.0 {
                    GeoPoint::new(sx[c] / sw[c], sy[c] / sw[c])
                } else {
                    centroids[c]
                }
            })
            .collect();
        // Empty clusters jump to the heaviest far-off point.
        let mut cost: Vec<f64> = w_active.iter().zip(&dist2).map(|(w, d)| w * d).collect();
        for c in (0..k).filter(|&c| sw[c] == 0.0) {
            let mut best: Option<usize> = None;
            for slot in 0..active.len() {
                if cost[slot] > 0.0 && best.is_none_or(|b| cost[slot] > cost[b]) {
                    best = Some(slot);
                }
            }
            if let Some(slot) = best {
                next[c] = points[active[slot]];
                cost[slot] = 0.0;
            }
        }
        let shift = centroids
            .iter()
            .zip(&next)
            .map(|(a, b)| a.dist(b))
            .fold(0.0, f64::max);
        centroids = next;
        assign(points, &active, &centroids, &mut labels, &mut dist2);
        record(&dist2, &mut history);
        if shift < tol {
            break;
        }
    }

    let mut assignment = vec![None; points.len()];
    for (slot, &i) in active.iter().enumerate() {
        assignment[i] = Some(labels[slot]);
    }
    Ok(KMeansResult {
        centroids,
        assignment,
        inertia_history: history,
        iterations,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub scenario_tag: ScenarioTag,
    pub aps: Vec<GeoPoint>,
    pub mdcs: Vec<GeoPoint>,
    pub ap_to_mdc: Vec<usize>,
}

impl Placement {
    pub fn new(scenario_tag: ScenarioTag, aps: Vec<GeoPoint>, mdcs: Vec<GeoPoint>) -> Result<Self, PlacementError> {
        if aps.is_empty() || mdcs.is_empty() {
            return Err(PlacementError::Invalid("placement needs at least one AP and one MDC".into()));
        }
        let ap_to_mdc = aps
            .iter()
            .map(|ap| nearest_index(ap, &mdcs).expect("mdcs non-empty"))
            .collect();
        Ok(Self {
            scenario_tag,
            aps,
            mdcs,
            ap_to_mdc,
        })
    }

    pub fn validate(&self) -> Result<(), PlacementError> {
        if self.aps.is_empty() || self.mdcs.is_empty() || self.ap_to_mdc.len() != self.aps.len() {
            return Err(PlacementError::Invalid(format!(
                "{} APs, {} MDCs, {} AP->MDC entries",
                self.aps.len(),
                self.mdcs.len(),
                self.ap_to_mdc.len()
            )));
        }
        for (i, ap) in self.aps.iter().enumerate() {
            let expect = nearest_index(ap, &self.mdcs).expect("non-empty");
            if self.ap_to_mdc[i] != expect {
                return Err(PlacementError::Invalid(format!(
                    "ap_to_mdc[{i}] = {} but nearest MDC is {expect}",
                    self.ap_to_mdc[i]
                )));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("placement serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, PlacementError> {
        let p: Placement = serde_json::from_str(text)?;
        p.validate()?;
        Ok(p)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), PlacementError> {
        let path = path.as_ref();
        fs::write(path, self.to_json() + "\n").map_err(|source| PlacementError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, PlacementError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| PlacementError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }
}

/// Clustering-based placement: both APs and MDCs at weighted k-means
/// centroids of the presence grid.
pub fn place(grid: &PresenceGrid, n_aps: usize, n_mdcs: usize, seed: u64) -> Result<Placement, PlacementError> {
    let (points, weights) = grid.weighted_points();
    let tol = DEFAULT_TOL_FRACTION * grid.bounds.diagonal();
    let aps = weighted_kmeans(&points, &weights, n_aps, rng::derive_seed(seed, &["aps"]), tol, DEFAULT_MAX_ITER)?;
    let mdcs = weighted_kmeans(&points, &weights, n_mdcs, rng::derive_seed(seed, &["mdcs"]), tol, DEFAULT_MAX_ITER)?;
    Placement::new(ScenarioTag::C3, aps.centroids, mdcs.centroids)
}

/// Builds a deployment variant from the clustering placement. APs are kept;
/// `C3` returns the base unchanged.
pub fn derive_scenario(base: &Placement, map: &ScenarioMap, tag: ScenarioTag) -> Result<Placement, PlacementError> {
    let hospitals = &map.hospitals;
    if hospitals.is_empty() {
        return Err(PlacementError::Invalid("map has no hospitals".into()));
    }
    let mdcs = match tag {
        ScenarioTag::C3 => return Ok(base.clone()),
        ScenarioTag::H1 => {
            let i = nearest_index(&map.bounds.center(), hospitals).expect("non-empty");
            vec![hospitals[i]]
        }
        ScenarioTag::H3 => {
            let mut picked: Vec<usize> = Vec::new();
            for m in &base.mdcs {
                let i = nearest_index(m, hospitals).expect("non-empty");
                if !picked.contains(&i) {
                    picked.push(i);
                }
            }
            picked.into_iter().map(|i| hospitals[i]).collect()
        }
        ScenarioTag::H9 => hospitals.clone(),
    };
    Placement::new(tag, base.aps.clone(), mdcs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Rect;
    use crate::mobility::TraceRecord;

    fn rec(t: f64, agent_id: u64, x: f64, y: f64) -> TraceRecord {
        TraceRecord {
            t,
            agent_id,
            position: GeoPoint::new(x, y),
        }
    }

    const B: Bounds = Bounds { width: 400.0, height: 400.0 };

    #[test]
    fn stationary_agent_counts_once() {
        let records = (0..300).map(|t| rec(t as f64, 7, 15.0, 15.0)).collect();
        let trace = MobilityTrace { records, itineraries: vec![] };
        let g = build_presence_grid(&trace, B, 40, 60.0).unwrap();
        assert_eq!(g.value(1, 1), 1);
        assert_eq!(g.cells.iter().sum::<u32>(), 1);
    }

    #[test]
    fn max_over_windows() {
        let trace = MobilityTrace {
            records: vec![rec(1.0, 0, 5.0, 5.0), rec(2.0, 1, 6.0, 6.0), rec(70.0, 2, 5.0, 5.0)],
            itineraries: vec![],
        };
        let g = build_presence_grid(&trace, B, 40, 60.0).unwrap();
        assert_eq!(g.value(0, 0), 2);
    }

    #[test]
    fn invalid_grid_params() {
        let trace = MobilityTrace::default();
        assert!(build_presence_grid(&trace, B, 0, 60.0).is_err());
        assert!(build_presence_grid(&trace, B, 40, 0.0).is_err());
    }

    #[test]
    fn k1_is_weighted_mean() {
        let pts = vec![GeoPoint::new(0.0, 0.0), GeoPoint::new(10.0, 0.0), GeoPoint::new(0.0, 30.0)];
        let w = vec![1.0, 3.0, 2.0];
        let r = weighted_kmeans(&pts, &w, 1, 5, 1e-9, 100).unwrap();
        let c = r.centroids[0];
        assert!((c.x - 5.0).abs() < 1e-9 && (c.y - 10.0).abs() < 1e-9, "{c:?}");
    }

    #[test]
    fn distinct_locations_recovered() {
        let sites = [GeoPoint::new(0.0, 0.0), GeoPoint::new(100.0, 0.0), GeoPoint::new(50.0, 80.0)];
        let pts: Vec<GeoPoint> = sites.iter().flat_map(|s| std::iter::repeat_n(*s, 4)).collect();
        let w = vec![1.0; pts.len()];
        let r = weighted_kmeans(&pts, &w, 3, 11, 1e-9, 300).unwrap();
        for s in &sites {
            assert!(r.centroids.iter().any(|c| c.dist(s) < 1e-6), "{:?}", r.centroids);
        }
        assert!(r.inertia() < 1e-9);
    }

    #[test]
    fn infeasible_k_and_zero_weights_ignored() {
        let pts = vec![GeoPoint::new(0.0, 0.0), GeoPoint::new(5.0, 0.0), GeoPoint::new(1e6, 1e6)];
        let w = vec![1.0, 1.0, 0.0];
        assert!(matches!(
            weighted_kmeans(&pts, &w, 3, 1, 1e-6, 10),
            Err(PlacementError::InfeasibleK { k: 3, found: 2 })
        ));
        let r = weighted_kmeans(&pts, &w, 1, 1, 1e-9, 10).unwrap();
        assert_eq!(r.assignment[2], None);
        assert!((r.centroids[0].x - 2.5).abs() < 1e-12);
    }

    #[test]
    fn single_mass_places_both_at_cell_center() {
        let mut cells = vec![0; 16];
        cells[4 * 2 + 1] = 5;
        let g = PresenceGrid { resolution: 4, window: 60.0, bounds: B, cells };
        let p = place(&g, 1, 1, 3).unwrap();
        let center = g.cell_center(1, 2);
        assert_eq!(p.aps, vec![center]);
        assert_eq!(p.mdcs, vec![center]);
        assert_eq!(p.ap_to_mdc, vec![0]);
        assert_eq!(p.scenario_tag, ScenarioTag::C3);
    }

    fn hospital_map(hospitals: Vec<GeoPoint>) -> ScenarioMap {
        ScenarioMap {
            bounds: Bounds { width: 100.0, height: 100.0 },
            entry_points: vec![GeoPoint::new(0.0, 0.0)],
            activity_areas: vec![Rect { x: 0.0, y: 0.0, w: 1.0, h: 1.0 }],
            hospitals,
        }
    }

    #[test]
    fn h1_tie_goes_to_lowest_index() {
        let map = hospital_map(vec![GeoPoint::new(40.0, 50.0), GeoPoint::new(60.0, 50.0)]);
        let base = Placement::new(ScenarioTag::C3, vec![GeoPoint::new(1.0, 1.0)], vec![GeoPoint::new(1.0, 1.0)]).unwrap();
        let h1 = derive_scenario(&base, &map, ScenarioTag::H1).unwrap();
        assert_eq!(h1.mdcs, vec![GeoPoint::new(40.0, 50.0)]);
    }

    #[test]
    fn h3_collapses_duplicates() {
        let map = hospital_map(vec![GeoPoint::new(10.0, 10.0), GeoPoint::new(90.0, 90.0), GeoPoint::new(10.0, 90.0)]);
        let mdcs = vec![GeoPoint::new(12.0, 8.0), GeoPoint::new(15.0, 20.0), GeoPoint::new(80.0, 85.0)];
        let aps = vec![GeoPoint::new(0.0, 0.0), GeoPoint::new(100.0, 100.0)];
        let base = Placement::new(ScenarioTag::C3, aps.clone(), mdcs).unwrap();
        let h3 = derive_scenario(&base, &map, ScenarioTag::H3).unwrap();
        // centroids 0 and 1 are both nearest hospital 0
        assert_eq!(h3.mdcs, vec![GeoPoint::new(10.0, 10.0), GeoPoint::new(90.0, 90.0)]);
        assert_eq!(h3.aps, aps);
        assert_eq!(h3.ap_to_mdc, vec![0, 1]);
        let h9 = derive_scenario(&base, &map, ScenarioTag::H9).unwrap();
        assert_eq!(h9.mdcs, map.hospitals);
    }

    #[test]
    fn tag_parsing() {
        assert_eq!("h9".parse::<ScenarioTag>().unwrap(), ScenarioTag::H9);
        assert!("X2".parse::<ScenarioTag>().is_err());
        assert_eq!(serde_json::to_string(&ScenarioTag::H3).unwrap(), "\"H3\"");
    }

    #[test]
    fn placement_file_rejects_inconsistent_mapping() {
        let mut p = Placement::new(
            ScenarioTag::C3,
            vec![GeoPoint::new(0.0, 0.0), GeoPoint::new(10.0, 0.0)],
            vec![GeoPoint::new(0.0, 0.0), GeoPoint::new(10.0, 0.0)],
        )
        .unwrap();
        assert_eq!(Placement::from_json(&p.to_json()).unwrap(), p);
        p.ap_to_mdc = vec![1, 1];
        assert!(Placement::from_json(&p.to_json()).is_err());
    }
}
