//! Run configuration and the file-based stages chained by the CLI.
//!
//! Output layout under `out`:
//!
//! ```text
//! map.json
//! trace/trace.csv, trace/trace.itineraries.csv
//! placement/grid.csv, placement/<TAG>.json
//! raw/<TAG>/{timeseries.csv, live_agents.csv, meta.json, manifest.json[, events.csv]}
//! report/<TAG>/*.csv|*.svg, report/summary.json
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::edgesim::{self, MdcConfig, PowerModel, ServiceKind, ServiceSpec, SimConfig, SimulationRawResults};
use crate::geometry::{self, MapError, ScenarioMap};
use crate::metrics::{self, MetricsError};
use crate::mobility::{self, MobilityConfig, TraceError};
use crate::placement::{self, PlacementError, ScenarioTag};
use crate::rng;
use crate::util;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("missing stage input {0} (run the previous stage first)")]
    MissingInput(PathBuf),
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Map(#[from] MapError),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Placement(#[from] PlacementError),
    #[error(transparent)]
    Sim(#[from] edgesim::SimError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticMapParams {
    pub width: f64,
    pub height: f64,
    pub n_entries: usize,
    pub n_areas: usize,
    pub n_hospitals: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapSource {
    /// Map file, relative to the config file.
    pub file: Option<PathBuf>,
    pub synthetic: Option<SyntheticMapParams>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlacementParams {
    pub resolution: usize,
    pub window: f64,
    pub n_aps: usize,
    pub n_mdcs: usize,
}

impl Default for PlacementParams {
    fn default() -> Self {
        Self {
            resolution: placement::DEFAULT_RESOLUTION,
            window: placement::DEFAULT_WINDOW,
            n_aps: 30,
            n_mdcs: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationParams {
    pub sample_interval: f64,
    pub retry_interval: f64,
    pub pus_per_mdc: usize,
    pub threads_per_pu: usize,
    pub idle_w: f64,
    pub active_w: f64,
    pub services: Vec<ServiceKind>,
    pub record_log: bool,
}

impl Default for SimulationParams {
    fn default() -> Self {
        let mdc = MdcConfig::default();
        let power = PowerModel::default();
        Self {
            sample_interval: 60.0,
            retry_interval: 1.0,
            pus_per_mdc: mdc.pus,
            threads_per_pu: mdc.threads_per_pu,
            idle_w: power.idle_w,
            active_w: power.active_w,
            services: vec![ServiceKind::Inference, ServiceKind::Training],
            record_log: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default = "default_scenarios")]
    pub scenarios: Vec<ScenarioTag>,
    #[serde(default = "default_warmup")]
    pub warmup: f64,
    pub map: MapSource,
    #[serde(default)]
    pub mobility: MobilityConfig,
    #[serde(default)]
    pub placement: PlacementParams,
    #[serde(default)]
    pub simulation: SimulationParams,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

fn default_scenarios() -> Vec<ScenarioTag> {
    ScenarioTag::ALL.to_vec()
}

fn default_warmup() -> f64 {
    metrics::DEFAULT_WARMUP
}

impl RunConfig {
    /// Parses TOML; relative paths are resolved against `base_dir`.
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self, PipelineError> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        if let Some(f) = cfg.map.file.as_mut() {
            if f.is_relative() {
                *f = base_dir.join(&*f);
            }
        }
        if cfg.out.is_relative() {
            cfg.out = base_dir.join(&cfg.out);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PipelineError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|_| PipelineError::MissingInput(path.to_path_buf()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, base)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        match (&self.map.file, &self.map.synthetic) {
            (Some(_), Some(_)) => return Err(PipelineError::Config("map: set either `file` or `synthetic`, not both".into())),
            (None, None) => return Err(PipelineError::Config("map: missing key `file` or `synthetic`".into())),
            (Some(f), None) if !f.exists() => return Err(PipelineError::MissingInput(f.clone())),
            _ => {}
        }
        self.mobility.validate()?;
        let p = &self.placement;
        if p.resolution == 0 || p.window.is_nan() || p.window <= 0.0 || p.n_aps == 0 || p.n_mdcs == 0 {
            return Err(PlacementError::Invalid("placement parameters must be positive".into()).into());
        }
        if self.scenarios.is_empty() {
            return Err(PipelineError::Config("scenarios: at least one tag is required".into()));
        }
        if self.warmup.is_nan() || self.warmup < 0.0 {
            return Err(PipelineError::Config("warmup must be non-negative".into()));
        }
        self.sim_config().validate()?;
        Ok(())
    }

    pub fn sim_config(&self) -> SimConfig {
        let s = &self.simulation;
        SimConfig {
            duration: self.mobility.duration,
            sample_interval: s.sample_interval,
            retry_interval: s.retry_interval,
            handover_step: self.mobility.sample_step,
            mdc: MdcConfig {
                pus: s.pus_per_mdc,
                threads_per_pu: s.threads_per_pu,
            },
            power: PowerModel {
                idle_w: s.idle_w,
                active_w: s.active_w,
            },
            services: s.services.iter().map(|k| ServiceSpec::standard(*k)).collect(),
            seed: rng::derive_seed(self.seed, &["simulate"]),
            record_log: s.record_log,
        }
    }

    pub fn map_path(&self) -> PathBuf {
        self.out.join("map.json")
    }

    pub fn trace_path(&self) -> PathBuf {
        self.out.join("trace").join("trace.csv")
    }

    pub fn grid_path(&self) -> PathBuf {
        self.out.join("placement").join("grid.csv")
    }

    pub fn placement_path(&self, tag: ScenarioTag) -> PathBuf {
        self.out.join("placement").join(format!("{tag}.json"))
    }

    pub fn raw_dir(&self, tag: ScenarioTag) -> PathBuf {
        self.out.join("raw").join(tag.as_str())
    }

    pub fn report_dir(&self) -> PathBuf {
        self.out.join("report")
    }
}

fn require(path: &Path) -> Result<(), PipelineError> {
    if path.exists() {
        Ok(())
    } else {
        Err(PipelineError::MissingInput(path.to_path_buf()))
    }
}

fn mkdirs(path: &Path) -> Result<(), PipelineError> {
    fs::create_dir_all(path).map_err(|source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn write(path: &Path, text: &str) -> Result<(), PipelineError> {
    fs::write(path, text).map_err(|source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn hash(paths: &[PathBuf]) -> Result<String, PipelineError> {
    util::hash_files(paths).map_err(|source| PipelineError::Io {
        path: paths.first().map(|p| p.display().to_string()).unwrap_or_default(),
        source,
    })
}

pub fn gen_map(cfg: &RunConfig) -> Result<ScenarioMap, PipelineError> {
    let map = match (&cfg.map.file, &cfg.map.synthetic) {
        (Some(file), _) => {
            require(file)?;
            geometry::load_map(file)?
        }
        (None, Some(p)) => geometry::generate_synthetic_map(
            p.width,
            p.height,
            p.n_entries,
            p.n_areas,
            p.n_hospitals,
            rng::derive_seed(cfg.seed, &["map"]),
        )?,
        (None, None) => return Err(PipelineError::Config("map: missing key `file` or `synthetic`".into())),
    };
    mkdirs(&cfg.out)?;
    geometry::write_map(&map, cfg.map_path())?;
    Ok(map)
}

fn load_stage_map(cfg: &RunConfig) -> Result<ScenarioMap, PipelineError> {
    let path = cfg.map_path();
    require(&path)?;
    Ok(geometry::load_map(path)?)
}

/// Writes the trace and returns its content hash.
pub fn gen_trace(cfg: &RunConfig) -> Result<String, PipelineError> {
    let map = load_stage_map(cfg)?;
    let m = &cfg.mobility;
    let itineraries = mobility::generate_itineraries(&map, m, rng::derive_seed(cfg.seed, &["trace"]))?;
    let path = cfg.trace_path();
    mkdirs(path.parent().expect("has parent"))?;
    mobility::write_sampled_trace(&itineraries, m.sample_step, m.duration, &path)?;
    trace_hash(cfg)
}

pub fn trace_hash(cfg: &RunConfig) -> Result<String, PipelineError> {
    let path = cfg.trace_path();
    hash(&[path.clone(), mobility::itinerary_path(&path)])
}

/// Streams the records file so full-scale traces never sit in memory.
fn stage_grid(cfg: &RunConfig, map: &ScenarioMap) -> Result<placement::PresenceGrid, PipelineError> {
    let path = cfg.trace_path();
    require(&path)?;
    require(&mobility::itinerary_path(&path))?;
    let mut failure = None;
    let records = mobility::stream_records(&path)?.map_while(|r| r.map_err(|e| failure = Some(e)).ok());
    let p = &cfg.placement;
    let grid = placement::presence_grid_from_records(records, map.bounds, p.resolution, p.window)?;
    match failure {
        Some(e) => Err(e.into()),
        None => Ok(grid),
    }
}

pub fn place(cfg: &RunConfig) -> Result<Vec<placement::Placement>, PipelineError> {
    let map = load_stage_map(cfg)?;
    let grid = stage_grid(cfg, &map)?;
    let p = &cfg.placement;
    let base = placement::place(&grid, p.n_aps, p.n_mdcs, rng::derive_seed(cfg.seed, &["placement"]))?;
    mkdirs(cfg.grid_path().parent().expect("has parent"))?;
    write(&cfg.grid_path(), &grid.to_csv())?;
    let mut out = Vec::new();
    for &tag in &cfg.scenarios {
        let placement = placement::derive_scenario(&base, &map, tag)?;
        placement.write(cfg.placement_path(tag))?;
        out.push(placement);
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub scenario_tag: ScenarioTag,
    pub seed: u64,
    pub config: RunConfig,
    pub trace_hash: String,
    pub placement_hash: String,
    pub input_hash: String,
}

/// Runs every configured scenario (in parallel) and writes raw results.
pub fn simulate(cfg: &RunConfig) -> Result<Vec<(ScenarioTag, SimulationRawResults)>, PipelineError> {
    let trace_path = cfg.trace_path();
    let it_path = mobility::itinerary_path(&trace_path);
    require(&trace_path)?;
    require(&it_path)?;
    let mut placements = Vec::new();
    for &tag in &cfg.scenarios {
        let path = cfg.placement_path(tag);
        require(&path)?;
        placements.push((tag, placement::Placement::read(&path)?, path));
    }
    let itineraries = mobility::read_itineraries(&it_path)?;
    let sim_cfg = cfg.sim_config();
    let trace_hash = trace_hash(cfg)?;

    let results: Vec<Result<SimulationRawResults, edgesim::SimError>> = std::thread::scope(|s| {
        let handles: Vec<_> = placements
            .iter()
            .map(|(_, p, _)| s.spawn(|| edgesim::run_itineraries(&itineraries, p, &sim_cfg)))
            .collect();
        handles.into_iter().map(|h| h.join().expect("simulation thread")).collect()
    });

    let mut out = Vec::new();
    for ((tag, _, ppath), raw) in placements.into_iter().zip(results) {
        let raw = raw?;
        let dir = cfg.raw_dir(tag);
        raw.write_dir(&dir)?;
        let placement_hash = hash(&[ppath])?;
        let manifest = RunManifest {
            scenario_tag: tag,
            seed: cfg.seed,
            config: cfg.clone(),
            input_hash: util::hash_bytes(format!("{trace_hash}:{placement_hash}").as_bytes()),
            trace_hash: trace_hash.clone(),
            placement_hash,
        };
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        write(&dir.join("manifest.json"), &(text + "\n"))?;
        log::info!("{tag}: simulated {} samples", raw.samples.len());
        out.push((tag, raw));
    }
    Ok(out)
}

pub fn report(cfg: &RunConfig) -> Result<metrics::SimulationReport, PipelineError> {
    let mut raws = Vec::new();
    for &tag in &cfg.scenarios {
        let dir = cfg.raw_dir(tag);
        require(&dir.join("timeseries.csv"))?;
        raws.push((tag.to_string(), SimulationRawResults::read_dir(&dir)?));
    }
    let report = metrics::build_report(raws.iter().map(|(t, r)| (t.as_str(), r)), cfg.warmup);
    metrics::render_report(&report, cfg.report_dir())?;
    Ok(report)
}

pub fn run_all(cfg: &RunConfig) -> Result<metrics::SimulationReport, PipelineError> {
    gen_map(cfg)?;
    gen_trace(cfg)?;
    place(cfg)?;
    simulate(cfg)?;
    report(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixtures() -> PathBuf {
        PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures")
    }

    #[test]
    fn bundled_configs_load() {
        for name in ["desk.toml", "madrid_like.toml"] {
            let cfg = RunConfig::load(fixtures().join(name)).unwrap();
            assert_eq!(cfg.scenarios, ScenarioTag::ALL.to_vec(), "{name}");
            assert!(cfg.out.starts_with(fixtures()), "{name}");
        }
        let desk = RunConfig::load(fixtures().join("desk.toml")).unwrap();
        assert_eq!(desk.mobility.wave_size, 20);
        assert_eq!(desk.mobility.duration, 7200.0);
        assert_eq!(desk.sim_config().mdc.capacity(), 160);
    }

    #[test]
    fn config_errors_name_the_problem() {
        let base = Path::new(".");
        let e = RunConfig::from_toml("seed = 1\n", base).unwrap_err().to_string();
        assert!(e.contains("map"), "{e}");
        let e = RunConfig::from_toml("seed = 1\nscenarios = [\"Q4\"]\n[map]\nfile = \"x\"\n", base)
            .unwrap_err()
            .to_string();
        assert!(e.contains("Q4"), "{e}");
        let e = RunConfig::from_toml("seed = 1\n[map]\nfile = \"absent.json\"\n", base).unwrap_err().to_string();
        assert!(e.contains("absent.json"), "{e}");
    }

    #[test]
    fn stage_inputs_are_checked() {
        let dir = tempfile::tempdir().unwrap();
        let text = "seed = 1\n[map.synthetic]\nwidth = 500.0\nheight = 500.0\nn_entries = 2\nn_areas = 2\nn_hospitals = 3\n";
        let cfg = RunConfig::from_toml(text, dir.path()).unwrap();
        match gen_trace(&cfg) {
            Err(PipelineError::MissingInput(p)) => assert_eq!(p, cfg.map_path()),
            other => panic!("{other:?}"),
        }
        gen_map(&cfg).unwrap();
        match place(&cfg) {
            Err(PipelineError::MissingInput(p)) => assert_eq!(p, cfg.trace_path()),
            other => panic!("{other:?}"),
        }
    }
}
