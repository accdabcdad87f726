mod common;

use std::fs;

use mdcsim::edgesim::{read_event_log, run_itineraries, write_event_log, SimulationRawResults};
use mdcsim::geometry::{Bounds, Rect};
use mdcsim::metrics::{build_report, render_report};
use mdcsim::mobility::{
    generate_itineraries, itinerary_path, sample_times, stream_records, write_sampled_trace, RecordStream, TraceError,
};
use mdcsim::placement::presence_grid_from_records;
use mdcsim::{
    build_presence_grid, generate_synthetic_map, generate_trace, load_map, read_trace, write_map, write_trace, GeoPoint, MobilityConfig,
    MobilityTrace, ScenarioMap,
};
use proptest::prelude::*;

fn coord() -> impl Strategy<Value = f64> {
    0.0f64..1000.0
}

fn map_strategy() -> impl Strategy<Value = ScenarioMap> {
    let pt = || (coord(), coord()).prop_map(|(x, y)| GeoPoint::new(x, y));
    let rect = (0.0f64..900.0, 0.0f64..900.0, 0.0f64..100.0, 0.0f64..100.0).prop_map(|(x, y, w, h)| Rect { x, y, w, h });
    (
        prop::collection::vec(pt(), 1..5),
        prop::collection::vec(rect, 1..5),
        prop::collection::vec(pt(), 1..10),
    )
        .prop_map(|(entry_points, activity_areas, hospitals)| ScenarioMap {
            bounds: Bounds { width: 1000.0, height: 1000.0 },
            entry_points,
            activity_areas,
            hospitals,
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn map_round_trips_exactly(map in map_strategy()) {
        let back = ScenarioMap::from_json(&map.to_json()).unwrap();
        prop_assert_eq!(back, map);
    }

    #[test]
    fn trace_round_trips_exactly(seed in 0u64..1000, wave in 1usize..6) {
        let map = generate_synthetic_map(600.0, 400.0, 4, 3, 2, seed).unwrap();
        let cfg = MobilityConfig { wave_size: wave, wave_period: 45.0, duration: 200.0, ..MobilityConfig::default() };
        let trace = generate_trace(&map, &cfg, seed).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.csv");
        write_trace(&trace, &path).unwrap();
        prop_assert_eq!(read_trace(&path).unwrap(), trace);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn record_stream_matches_sorted_samples(seed in 0u64..1000, horizon in 50.0f64..400.0, step in 1u32..4, rot in 0usize..16) {
        let map = generate_synthetic_map(800.0, 500.0, 4, 3, 2, seed).unwrap();
        let cfg = MobilityConfig { wave_size: 4, wave_period: 30.0, duration: 300.0, ..MobilityConfig::default() };
        let mut its = generate_itineraries(&map, &cfg, seed).unwrap();
        let n = its.len();
        its.rotate_left(rot % n);
        let step = step as f64 * 0.5;
        let mut naive: Vec<(f64, u64)> = its
            .iter()
            .flat_map(|it| sample_times(it, step, horizon).map(move |t| (t, it.agent_id)))
            .collect();
        naive.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let streamed: Vec<(f64, u64)> = RecordStream::new(&its, step, horizon).map(|r| (r.t, r.agent_id)).collect();
        prop_assert_eq!(streamed, naive);
    }
}

#[test]
fn streamed_trace_files_match_materialized_ones() {
    let map = generate_synthetic_map(1500.0, 1000.0, 6, 4, 3, 9).unwrap();
    let cfg = MobilityConfig { wave_size: 7, wave_period: 40.0, duration: 900.0, ..MobilityConfig::default() };
    let trace = generate_trace(&map, &cfg, 9).unwrap();
    assert_eq!(generate_itineraries(&map, &cfg, 9).unwrap(), trace.itineraries);
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    write_trace(&trace, &a).unwrap();
    write_sampled_trace(&trace.itineraries, cfg.sample_step, cfg.duration, &b).unwrap();
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_eq!(fs::read(itinerary_path(&a)).unwrap(), fs::read(itinerary_path(&b)).unwrap());

    let streamed: Vec<_> = stream_records(&b).unwrap().map(Result::unwrap).collect();
    assert_eq!(streamed, trace.records);
    let want = build_presence_grid(&trace, map.bounds, 20, 60.0).unwrap();
    let got = presence_grid_from_records(streamed, map.bounds, 20, 60.0).unwrap();
    assert_eq!(got, want);
}

#[test]
fn map_file_round_trip_and_missing_file() {
    let dir = tempfile::tempdir().unwrap();
    let map = generate_synthetic_map(3000.0, 3000.0, 20, 12, 9, 4).unwrap();
    let path = dir.path().join("m.json");
    write_map(&map, &path).unwrap();
    assert_eq!(load_map(&path).unwrap(), map);
    let err = load_map(dir.path().join("nope.json")).unwrap_err().to_string();
    assert!(err.contains("nope.json"), "{err}");
}

#[test]
fn empty_trace_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("empty.csv");
    write_trace(&MobilityTrace::default(), &path).unwrap();
    assert_eq!(read_trace(&path).unwrap(), MobilityTrace::default());
}

#[test]
fn truncated_trace_reports_line() {
    let map = generate_synthetic_map(600.0, 400.0, 4, 3, 2, 1).unwrap();
    let cfg = MobilityConfig { wave_size: 2, duration: 120.0, ..MobilityConfig::default() };
    let trace = generate_trace(&map, &cfg, 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("trace.csv");
    write_trace(&trace, &path).unwrap();
    let text = fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    // keep the header and four rows, then cut the fifth row short
    let cut = format!("{}\n{}\n", lines[..5].join("\n"), &lines[5][..lines[5].rfind(',').unwrap()]);
    fs::write(&path, cut).unwrap();
    match read_trace(&path) {
        Err(TraceError::Parse { line, path: p, .. }) => {
            assert_eq!(line, 6);
            assert!(p.ends_with("trace.csv"));
        }
        other => panic!("expected parse error, got {other:?}"),
    }
    fs::write(&path, "time,agent,x,y\n").unwrap();
    assert!(matches!(read_trace(&path), Err(TraceError::Parse { line: 1, .. })));
    fs::remove_file(itinerary_path(&path)).unwrap();
    fs::write(&path, "t,agent_id,x,y\n").unwrap();
    assert!(matches!(read_trace(&path), Err(TraceError::Io { .. })));
}

#[test]
fn raw_results_and_event_log_round_trip() {
    let (agents, placement) = common::tiny_scenario();
    let (_, cfg) = common::tiny_variants().remove(2);
    let raw = run_itineraries(&agents, &placement, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    raw.write_dir(dir.path()).unwrap();
    let back = SimulationRawResults::read_dir(dir.path()).unwrap();
    assert_eq!(back, raw);
    let log_path = dir.path().join("log.csv");
    write_event_log(raw.log.as_ref().unwrap(), &log_path).unwrap();
    assert_eq!(&read_event_log(&log_path).unwrap(), raw.log.as_ref().unwrap());
}

#[test]
fn report_rendering_is_deterministic() {
    let (agents, placement) = common::tiny_scenario();
    let (_, cfg) = common::tiny_variants().remove(1);
    let raw = run_itineraries(&agents, &placement, &cfg).unwrap();
    let report = build_report([("C3", &raw)], 120.0);
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    render_report(&report, a.path()).unwrap();
    render_report(&report, b.path()).unwrap();
    let files = ["summary.json", "C3/utilization.csv", "C3/rejections.csv", "C3/shares.csv", "C3/power.csv", "C3/utilization.svg", "C3/rejections.svg", "C3/shares.svg", "C3/power.svg"];
    for f in files {
        let x = fs::read(a.path().join(f)).unwrap();
        assert_eq!(x, fs::read(b.path().join(f)).unwrap(), "{f}");
        assert!(!x.is_empty(), "{f}");
    }
    let svg = fs::read_to_string(a.path().join("C3/utilization.svg")).unwrap();
    let polylines: Vec<&str> = svg.lines().filter(|l| l.contains("<polyline")).collect();
    assert_eq!(polylines.len(), 3);
    let n_samples = raw.sample_times().len();
    for l in polylines {
        let pts = l.split("points=\"").nth(1).unwrap().split('"').next().unwrap();
        assert_eq!(pts.split_whitespace().count(), n_samples);
    }
}
