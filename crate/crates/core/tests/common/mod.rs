#![allow(dead_code)]

pub mod reference;

use std::path::PathBuf;

use mdcsim::edgesim::{MdcConfig, RequestSchedule, ServiceSpec, SimConfig};
use mdcsim::{AgentItinerary, GeoPoint, Placement, ScenarioTag};

pub fn fixtures_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

#[allow(clippy::too_many_arguments)]
fn agent(id: u64, t_enter: f64, entry: (f64, f64), dest: (f64, f64), t_arrive: f64, t_depart: f64, exit: (f64, f64), t_exit: f64) -> AgentItinerary {
    AgentItinerary {
        agent_id: id,
        t_enter,
        entry: GeoPoint::new(entry.0, entry.1),
        destination: GeoPoint::new(dest.0, dest.1),
        t_arrive,
        t_depart,
        exit: GeoPoint::new(exit.0, exit.1),
        t_exit,
    }
}

/// Five agents crossing between two MDC regions over 600 s.
pub fn tiny_scenario() -> (Vec<AgentItinerary>, Placement) {
    let agents = vec![
        agent(0, 0.0, (100.0, 500.0), (900.0, 520.0), 300.25, 320.5, (120.0, 480.0), 590.437),
        agent(1, 7.31, (150.0, 300.0), (850.0, 700.0), 250.77, 262.03, (860.0, 690.0), 700.0),
        agent(2, 13.07, (900.0, 100.0), (200.0, 800.0), 410.11, 430.91, (100.0, 900.0), 599.133),
        agent(3, 21.53, (500.0, 500.0), (520.0, 510.0), 40.2, 70.9, (950.0, 500.0), 400.771),
        agent(4, 95.41, (800.0, 900.0), (300.0, 200.0), 380.66, 395.4, (50.0, 50.0), 560.083),
    ];
    let aps = vec![
        GeoPoint::new(200.0, 500.0),
        GeoPoint::new(400.0, 480.0),
        GeoPoint::new(610.0, 520.0),
        GeoPoint::new(800.0, 500.0),
    ];
    let mdcs = vec![GeoPoint::new(250.0, 500.0), GeoPoint::new(750.0, 500.0)];
    let placement = Placement::new(ScenarioTag::C3, aps, mdcs).expect("valid placement");
    (agents, placement)
}

/// Named configurations for the tiny scenario.
pub fn tiny_variants() -> Vec<(&'static str, SimConfig)> {
    let base = SimConfig {
        duration: 600.0,
        record_log: true,
        seed: 11,
        ..SimConfig::default()
    };
    let constrained = SimConfig {
        mdc: MdcConfig { pus: 2, threads_per_pu: 2 },
        ..base.clone()
    };
    let mut short_gaps = SimConfig {
        mdc: MdcConfig { pus: 2, threads_per_pu: 3 },
        ..base.clone()
    };
    short_gaps.services[1] = ServiceSpec {
        schedule: RequestSchedule::UniformGap { min: 5.0, max: 40.0 },
        ..ServiceSpec::training()
    };
    vec![("default", base), ("constrained", constrained), ("short-gaps", short_gaps)]
}
