//! Urban scenario geometry: planar points in meters, the scenario map and its
//! JSON file format, a synthetic map generator and nearest-point lookup.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;

pub const MAP_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum MapError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed map file: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("unsupported map schema {0}, expected {MAP_SCHEMA_VERSION}")]
    Schema(u32),
    #[error("invalid map: {0}")]
    Validation(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("nearest lookup over an empty candidate set")]
    EmptyCandidates,
}

/// A point in a local planar frame, meters east (`x`) and north (`y`).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct GeoPoint {
    pub x: f64,
    pub y: f64,
}

impl GeoPoint {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dist2(&self, other: &GeoPoint) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        dx * dx + dy * dy
    }

    pub fn dist(&self, other: &GeoPoint) -> f64 {
        self.dist2(other).sqrt()
    }

    /// Linear interpolation, `frac` in [0, 1].
    pub fn lerp(&self, other: &GeoPoint, frac: f64) -> GeoPoint {
        GeoPoint::new(
            self.x + (other.x - self.x) * frac,
            self.y + (other.y - self.y) * frac,
        )
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl From<[f64; 2]> for GeoPoint {
    fn from(v: [f64; 2]) -> Self {
        GeoPoint::new(v[0], v[1])
    }
}

impl From<GeoPoint> for [f64; 2] {
    fn from(p: GeoPoint) -> Self {
        [p.x, p.y]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub width: f64,
    pub height: f64,
}

impl Bounds {
    pub fn contains(&self, p: &GeoPoint) -> bool {
        p.is_finite() && p.x >= 0.0 && p.y >= 0.0 && p.x <= self.width && p.y <= self.height
    }

    pub fn center(&self) -> GeoPoint {
        GeoPoint::new(self.width / 2.0, self.height / 2.0)
    }

    pub fn diagonal(&self) -> f64 {
        self.width.hypot(self.height)
    }
}

/// Axis-aligned rectangle; `(x, y)` is the south-west corner.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl Rect {
    pub fn point_at(&self, u: f64, v: f64) -> GeoPoint {
        GeoPoint::new(self.x + u * self.w, self.y + v * self.h)
    }

    fn within(&self, b: &Bounds) -> bool {
        [self.x, self.y, self.w, self.h].iter().all(|v| v.is_finite())
            && self.w > 0.0
            && self.h > 0.0
            && self.x >= 0.0
            && self.y >= 0.0
            && self.x + self.w <= b.width
            && self.y + self.h <= b.height
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioMap {
    pub bounds: Bounds,
    /// Metro stops; agents enter and leave the scenario here.
    pub entry_points: Vec<GeoPoint>,
    pub activity_areas: Vec<Rect>,
    pub hospitals: Vec<GeoPoint>,
}

#[derive(Serialize, Deserialize)]
struct MapFile {
    schema: u32,
    #[serde(flatten)]
    map: ScenarioMap,
}

impl ScenarioMap {
    pub fn validate(&self) -> Result<(), MapError> {
        let b = &self.bounds;
        if !(b.width.is_finite() && b.height.is_finite() && b.width > 0.0 && b.height > 0.0) {
            return Err(MapError::Validation(format!(
                "bounds must be positive, got {}x{}",
                b.width, b.height
            )));
        }
        for (name, pts) in [("entry_points", &self.entry_points), ("hospitals", &self.hospitals)] {
            if pts.is_empty() {
                return Err(MapError::Validation(format!("{name} must not be empty")));
            }
            if let Some((i, p)) = pts.iter().enumerate().find(|(_, p)| !b.contains(p)) {
                return Err(MapError::Validation(format!(
                    "{name}[{i}] = ({}, {}) lies outside bounds {}x{}",
                    p.x, p.y, b.width, b.height
                )));
            }
        }
        if self.activity_areas.is_empty() {
            return Err(MapError::Validation("activity_areas must not be empty".into()));
        }
        if let Some((i, r)) = self.activity_areas.iter().enumerate().find(|(_, r)| !r.within(b)) {
            return Err(MapError::Validation(format!(
                "activity_areas[{i}] = {{x: {}, y: {}, w: {}, h: {}}} is degenerate or outside bounds",
                r.x, r.y, r.w, r.h
            )));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, MapError> {
        let file: MapFile = serde_json::from_str(text)?;
        if file.schema != MAP_SCHEMA_VERSION {
            return Err(MapError::Schema(file.schema));
        }
        file.map.validate()?;
        Ok(file.map)
    }

    pub fn to_json(&self) -> String {
        let file = MapFile {
            schema: MAP_SCHEMA_VERSION,
            map: self.clone(),
        };
        serde_json::to_string_pretty(&file).expect("map serializes")
    }
}

pub fn load_map(path: impl AsRef<Path>) -> Result<ScenarioMap, MapError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| MapError::Io {
        path: path.display().to_string(),
        source,
    })?;
    ScenarioMap::from_json(&text)
}

pub fn write_map(map: &ScenarioMap, path: impl AsRef<Path>) -> Result<(), MapError> {
    let path = path.as_ref();
    let mut text = map.to_json();
    text.push('\n');
    fs::write(path, text).map_err(|source| MapError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Uniformly random map inside a `width` x `height` box.
///
/// Activity areas have sides between 2% and 15% of the box size so they stay
/// street/park sized regardless of scale.
pub fn generate_synthetic_map(
    width: f64,
    height: f64,
    n_entries: usize,
    n_areas: usize,
    n_hospitals: usize,
    seed: u64,
) -> Result<ScenarioMap, MapError> {
    if !(width.is_finite() && height.is_finite() && width > 0.0 && height > 0.0) {
        return Err(MapError::InvalidParameter(format!(
            "width and height must be positive, got {width}x{height}"
        )));
    }
    for (name, n) in [("n_entries", n_entries), ("n_areas", n_areas), ("n_hospitals", n_hospitals)] {
        if n == 0 {
            return Err(MapError::InvalidParameter(format!("{name} must be at least 1")));
        }
    }
    let mut rng = rng::substream(seed, &["synthetic-map"]);
    let point = |rng: &mut rand_chacha::ChaCha8Rng| {
        GeoPoint::new(rng.gen::<f64>() * width, rng.gen::<f64>() * height)
    };
    let entry_points = (0..n_entries).map(|_| point(&mut rng)).collect();
    let hospitals = (0..n_hospitals).map(|_| point(&mut rng)).collect();
    let activity_areas = (0..n_areas)
        .map(|_| {
            let w = width * rng.gen_range(0.02..0.15);
            let h = height * rng.gen_range(0.02..0.15);
            let x = rng.gen::<f64>() * (width - w);
            let y = rng.gen::<f64>() * (height - h);
            Rect { x, y, w, h }
        })
        .collect();
    let map = ScenarioMap {
        bounds: Bounds { width, height },
        entry_points,
        activity_areas,
        hospitals,
    };
    map.validate()?;
    Ok(map)
}

/// Index of the candidate closest to `p`; ties go to the lowest index.
pub fn nearest_index(p: &GeoPoint, candidates: &[GeoPoint]) -> Result<usize, MapError> {
    let mut best: Option<(usize, f64)> = None;
    for (i, c) in candidates.iter().enumerate() {
        let d = p.dist2(c);
        if best.is_none_or(|(_, bd)| d < bd) {
            best = Some((i, d));
        }
    }
    best.map(|(i, _)| i).ok_or(MapError::EmptyCandidates)
}
