//! Python bindings for the `mdcsim` simulator.
//!
//! Points cross the boundary as `(x, y)` tuples; structured results are
//! returned as lists, dicts or JSON strings.

use std::collections::BTreeMap;
use std::path::PathBuf;

use mdcsim::edgesim::{MdcConfig, SimConfig, SimulationRawResults};
use mdcsim::geometry::{self, ScenarioMap};
use mdcsim::metrics;
use mdcsim::mobility::{self, MobilityConfig, MobilityTrace};
use mdcsim::pipeline::{self, RunConfig};
use mdcsim::placement::{self, KMeansResult, Placement, PresenceGrid, ScenarioTag};
use mdcsim::{topology, GeoPoint};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn xy(p: &GeoPoint) -> (f64, f64) {
    (p.x, p.y)
}

fn points(v: &[GeoPoint]) -> Vec<(f64, f64)> {
    v.iter().map(xy).collect()
}

#[pyclass(name = "ScenarioMap", module = "pymdcsim", frozen)]
struct PyScenarioMap {
    inner: ScenarioMap,
}

#[pymethods]
impl PyScenarioMap {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        ScenarioMap::from_json(text).map(|inner| Self { inner }).map_err(err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        geometry::load_map(path).map(|inner| Self { inner }).map_err(err)
    }

    #[staticmethod]
    #[pyo3(signature = (width, height, n_entries, n_areas, n_hospitals, seed))]
    fn synthetic(width: f64, height: f64, n_entries: usize, n_areas: usize, n_hospitals: usize, seed: u64) -> PyResult<Self> {
        geometry::generate_synthetic_map(width, height, n_entries, n_areas, n_hospitals, seed)
            .map(|inner| Self { inner })
            .map_err(err)
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        geometry::write_map(&self.inner, path).map_err(err)
    }

    #[getter]
    fn width(&self) -> f64 {
        self.inner.bounds.width
    }

    #[getter]
    fn height(&self) -> f64 {
        self.inner.bounds.height
    }

    #[getter]
    fn entry_points(&self) -> Vec<(f64, f64)> {
        points(&self.inner.entry_points)
    }

    #[getter]
    fn hospitals(&self) -> Vec<(f64, f64)> {
        points(&self.inner.hospitals)
    }

    /// `(x, y, w, h)` per activity area.
    #[getter]
    fn activity_areas(&self) -> Vec<(f64, f64, f64, f64)> {
        self.inner.activity_areas.iter().map(|r| (r.x, r.y, r.w, r.h)).collect()
    }

    fn __repr__(&self) -> String {
        format!(
            "ScenarioMap({}x{}, entries={}, areas={}, hospitals={})",
            self.inner.bounds.width,
            self.inner.bounds.height,
            self.inner.entry_points.len(),
            self.inner.activity_areas.len(),
            self.inner.hospitals.len()
        )
    }
}

#[pyclass(name = "MobilityTrace", module = "pymdcsim", frozen)]
struct PyMobilityTrace {
    inner: MobilityTrace,
}

#[pymethods]
impl PyMobilityTrace {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        mobility::read_trace(path).map(|inner| Self { inner }).map_err(err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        mobility::write_trace(&self.inner, path).map_err(err)
    }

    #[getter]
    fn n_agents(&self) -> usize {
        self.inner.itineraries.len()
    }

    #[getter]
    fn n_records(&self) -> usize {
        self.inner.records.len()
    }

    /// `(t, agent_id, x, y)` rows sorted by time.
    fn records(&self) -> Vec<(f64, u64, f64, f64)> {
        self.inner
            .records
            .iter()
            .map(|r| (r.t, r.agent_id, r.position.x, r.position.y))
            .collect()
    }

    /// `(agent_id, t_enter, t_arrive, t_depart, t_exit)` per agent.
    fn itineraries(&self) -> Vec<(u64, f64, f64, f64, f64)> {
        self.inner
            .itineraries
            .iter()
            .map(|it| (it.agent_id, it.t_enter, it.t_arrive, it.t_depart, it.t_exit))
            .collect()
    }

    fn position_at(&self, agent_index: usize, t: f64) -> PyResult<Option<(f64, f64)>> {
        let it = self
            .inner
            .itineraries
            .get(agent_index)
            .ok_or_else(|| err(format!("no agent at index {agent_index}")))?;
        Ok(mobility::position_at(it, t).map(|p| xy(&p)))
    }

    fn live_agents_at(&self, t: f64) -> usize {
        self.inner.live_agents_at(t)
    }
}

#[pyfunction]
#[pyo3(signature = (map, seed, wave_period=180.0, wave_size=200, walk_speed=1.4, dwell_min=5.0, dwell_max=30.0, duration=36000.0, sample_step=1.0))]
#[allow(clippy::too_many_arguments)]
fn generate_trace(
    map: &PyScenarioMap,
    seed: u64,
    wave_period: f64,
    wave_size: usize,
    walk_speed: f64,
    dwell_min: f64,
    dwell_max: f64,
    duration: f64,
    sample_step: f64,
) -> PyResult<PyMobilityTrace> {
    let cfg = MobilityConfig {
        wave_period,
        wave_size,
        walk_speed,
        dwell_min,
        dwell_max,
        duration,
        sample_step,
    };
    mobility::generate_trace(&map.inner, &cfg, seed)
        .map(|inner| PyMobilityTrace { inner })
        .map_err(err)
}

#[pyclass(name = "PresenceGrid", module = "pymdcsim", frozen)]
struct PyPresenceGrid {
    inner: PresenceGrid,
}

#[pymethods]
impl PyPresenceGrid {
    #[getter]
    fn resolution(&self) -> usize {
        self.inner.resolution
    }

    /// Rows from south to north.
    fn rows(&self) -> Vec<Vec<u32>> {
        self.inner.cells.chunks(self.inner.resolution).map(|r| r.to_vec()).collect()
    }

    fn value(&self, col: usize, row: usize) -> u32 {
        self.inner.value(col, row)
    }

    fn positive_cells(&self) -> usize {
        self.inner.positive_cells()
    }

    fn to_csv(&self) -> String {
        self.inner.to_csv()
    }
}

#[pyfunction]
#[pyo3(signature = (trace, map, resolution=40, window=60.0))]
fn build_presence_grid(trace: &PyMobilityTrace, map: &PyScenarioMap, resolution: usize, window: f64) -> PyResult<PyPresenceGrid> {
    placement::build_presence_grid(&trace.inner, map.inner.bounds, resolution, window)
        .map(|inner| PyPresenceGrid { inner })
        .map_err(err)
}

#[pyclass(name = "KMeansResult", module = "pymdcsim", frozen)]
struct PyKMeansResult {
    inner: KMeansResult,
}

#[pymethods]
impl PyKMeansResult {
    #[getter]
    fn centroids(&self) -> Vec<(f64, f64)> {
        points(&self.inner.centroids)
    }

    #[getter]
    fn assignment(&self) -> Vec<Option<usize>> {
        self.inner.assignment.clone()
    }

    #[getter]
    fn inertia_history(&self) -> Vec<f64> {
        self.inner.inertia_history.clone()
    }

    #[getter]
    fn iterations(&self) -> usize {
        self.inner.iterations
    }

    #[getter]
    fn inertia(&self) -> f64 {
        self.inner.inertia()
    }
}

#[pyfunction]
#[pyo3(signature = (points, weights, k, seed, tol=1e-9, max_iter=300))]
fn weighted_kmeans(points: Vec<(f64, f64)>, weights: Vec<f64>, k: usize, seed: u64, tol: f64, max_iter: usize) -> PyResult<PyKMeansResult> {
    let pts: Vec<GeoPoint> = points.into_iter().map(|(x, y)| GeoPoint::new(x, y)).collect();
    placement::weighted_kmeans(&pts, &weights, k, seed, tol, max_iter)
        .map(|inner| PyKMeansResult { inner })
        .map_err(err)
}

#[pyclass(name = "Placement", module = "pymdcsim", frozen)]
struct PyPlacement {
    inner: Placement,
}

#[pymethods]
impl PyPlacement {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Placement::from_json(text).map(|inner| Self { inner }).map_err(err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Placement::read(path).map(|inner| Self { inner }).map_err(err)
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.write(path).map_err(err)
    }

    #[getter]
    fn scenario_tag(&self) -> &'static str {
        self.inner.scenario_tag.as_str()
    }

    #[getter]
    fn aps(&self) -> Vec<(f64, f64)> {
        points(&self.inner.aps)
    }

    #[getter]
    fn mdcs(&self) -> Vec<(f64, f64)> {
        points(&self.inner.mdcs)
    }

    #[getter]
    fn ap_to_mdc(&self) -> Vec<usize> {
        self.inner.ap_to_mdc.clone()
    }

    fn serving_mdc(&self, x: f64, y: f64) -> usize {
        topology::serving_mdc(&GeoPoint::new(x, y), &self.inner)
    }

    fn __repr__(&self) -> String {
        format!(
            "Placement({}, aps={}, mdcs={})",
            self.inner.scenario_tag,
            self.inner.aps.len(),
            self.inner.mdcs.len()
        )
    }
}

#[pyfunction]
fn place(grid: &PyPresenceGrid, n_aps: usize, n_mdcs: usize, seed: u64) -> PyResult<PyPlacement> {
    placement::place(&grid.inner, n_aps, n_mdcs, seed)
        .map(|inner| PyPlacement { inner })
        .map_err(err)
}

#[pyfunction]
fn derive_scenario(base: &PyPlacement, map: &PyScenarioMap, tag: &str) -> PyResult<PyPlacement> {
    let tag: ScenarioTag = tag.parse().map_err(err)?;
    placement::derive_scenario(&base.inner, &map.inner, tag)
        .map(|inner| PyPlacement { inner })
        .map_err(err)
}

#[pyclass(name = "SimulationResults", module = "pymdcsim", frozen)]
struct PySimulationResults {
    inner: SimulationRawResults,
}

#[pymethods]
impl PySimulationResults {
    #[getter]
    fn n_mdcs(&self) -> usize {
        self.inner.n_mdcs()
    }

    #[getter]
    fn scenario_tag(&self) -> String {
        self.inner.meta.scenario_tag.clone()
    }

    /// One dict per MDC per sample instant.
    fn samples<'py>(&self, py: Python<'py>) -> PyResult<Vec<Bound<'py, PyDict>>> {
        self.inner
            .samples
            .iter()
            .map(|r| {
                let d = PyDict::new(py);
                d.set_item("t", r.t)?;
                d.set_item("mdc_id", r.mdc_id)?;
                d.set_item("reserved_threads", r.reserved_threads)?;
                d.set_item("busy_pus", r.busy_pus)?;
                d.set_item("power_w", r.power_w)?;
                d.set_item("rejections_cum", r.rejections_cum)?;
                d.set_item("served_inference_cum", r.served_inference_cum)?;
                d.set_item("served_training_cum", r.served_training_cum)?;
                d.set_item("traffic_bytes_cum", r.traffic_bytes_cum)?;
                d.set_item("energy_j_cum", r.energy_j_cum)?;
                Ok(d)
            })
            .collect()
    }

    /// `(t, live agents)` at every sample instant.
    fn live_agents(&self) -> Vec<(f64, u64)> {
        self.inner.live_agents.clone()
    }

    fn totals_json(&self) -> String {
        serde_json_string(&self.inner.meta.totals)
    }

    fn write_dir(&self, path: PathBuf) -> PyResult<()> {
        self.inner.write_dir(path).map_err(err)
    }

    #[staticmethod]
    fn read_dir(path: PathBuf) -> PyResult<Self> {
        SimulationRawResults::read_dir(path).map(|inner| Self { inner }).map_err(err)
    }
}

fn serde_json_string<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serializable")
}

#[pyfunction]
#[pyo3(signature = (trace, placement, seed=0, duration=None, sample_interval=60.0, pus=10, threads_per_pu=16, record_log=false))]
#[allow(clippy::too_many_arguments)]
fn run_simulation(
    trace: &PyMobilityTrace,
    placement: &PyPlacement,
    seed: u64,
    duration: Option<f64>,
    sample_interval: f64,
    pus: usize,
    threads_per_pu: usize,
    record_log: bool,
) -> PyResult<PySimulationResults> {
    let duration = duration.unwrap_or_else(|| {
        trace
            .inner
            .itineraries
            .iter()
            .map(|it| it.t_exit)
            .fold(0.0, f64::max)
            .ceil()
    });
    let cfg = SimConfig {
        duration,
        sample_interval,
        mdc: MdcConfig { pus, threads_per_pu },
        seed,
        record_log,
        ..SimConfig::default()
    };
    mdcsim::run_simulation(&trace.inner, &placement.inner, &cfg)
        .map(|inner| PySimulationResults { inner })
        .map_err(err)
}

/// Summary JSON for `{tag: results}`; writes the CSV/SVG tree too when
/// `out_dir` is given.
#[pyfunction]
#[pyo3(signature = (results, warmup=15000.0, out_dir=None))]
fn build_report(results: BTreeMap<String, PyRef<'_, PySimulationResults>>, warmup: f64, out_dir: Option<PathBuf>) -> PyResult<String> {
    let report = metrics::build_report(results.iter().map(|(t, r)| (t.as_str(), &r.inner)), warmup);
    if let Some(dir) = out_dir {
        metrics::render_report(&report, dir).map_err(err)?;
    }
    Ok(serde_json_string(&report.summary()))
}

/// Runs every stage for a TOML config and returns the summary JSON.
#[pyfunction]
#[pyo3(signature = (config, out=None, seed=None))]
fn run_pipeline(config: PathBuf, out: Option<PathBuf>, seed: Option<u64>) -> PyResult<String> {
    let mut cfg = RunConfig::load(config).map_err(err)?;
    if let Some(out) = out {
        cfg.out = out;
    }
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    let report = pipeline::run_all(&cfg).map_err(err)?;
    Ok(serde_json_string(&report.summary()))
}

#[pymodule]
fn pymdcsim(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyScenarioMap>()?;
    m.add_class::<PyMobilityTrace>()?;
    m.add_class::<PyPresenceGrid>()?;
    m.add_class::<PyKMeansResult>()?;
    m.add_class::<PyPlacement>()?;
    m.add_class::<PySimulationResults>()?;
    m.add_function(wrap_pyfunction!(generate_trace, m)?)?;
    m.add_function(wrap_pyfunction!(build_presence_grid, m)?)?;
    m.add_function(wrap_pyfunction!(weighted_kmeans, m)?)?;
    m.add_function(wrap_pyfunction!(place, m)?)?;
    m.add_function(wrap_pyfunction!(derive_scenario, m)?)?;
    m.add_function(wrap_pyfunction!(run_simulation, m)?)?;
    m.add_function(wrap_pyfunction!(build_report, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    m.add("SCENARIO_TAGS", ScenarioTag::ALL.iter().map(|t| t.as_str()).collect::<Vec<_>>())?;
    Ok(())
}
