//! Mobility-driven simulation of Micro Data Center deployments.
//!
//! The pipeline runs: scenario map → pedestrian trace → presence grid and
//! k-means placement → event-driven workload simulation → report.

pub mod edgesim;
pub mod engine;
pub mod geometry;
pub mod metrics;
pub mod mobility;
pub mod pipeline;
pub mod placement;
pub mod rng;
pub mod topology;
pub mod util;

pub use edgesim::{run_simulation, PowerModel, ServiceKind, ServiceSpec, SimConfig, SimulationRawResults};
pub use engine::{EventQueue, SimTime};
pub use geometry::{generate_synthetic_map, load_map, nearest_index, write_map, GeoPoint, ScenarioMap};
pub use metrics::SimulationReport;
pub use mobility::{generate_trace, position_at, read_trace, write_trace, AgentItinerary, MobilityConfig, MobilityTrace};
pub use pipeline::RunConfig;
pub use placement::{build_presence_grid, derive_scenario, place, weighted_kmeans, Placement, PresenceGrid, ScenarioTag};
pub use topology::{handover_schedule, serving_mdc};
