//! Deterministic multi-vehicle intersection simulation.
//!
//! [`config`] defines the JSON scenario schema, [`truth`] generates
//! kinematically consistent ground truth, [`sensors`] synthesizes the
//! multi-rate sensor streams, and [`runner`] executes the four-method
//! comparison over them. [`rng`] provides the counter-based random
//! streams everything draws from; [`presets`] holds the built-in
//! intersection scenarios.

pub mod config;
pub mod presets;
pub mod rng;
pub mod runner;
pub mod sensors;
pub mod truth;

pub use config::{ConfigError, ScenarioConfig};
pub use runner::{
    run_prepared, run_scenario, run_scenario_methods, CaseTag, MethodId, Phase, RunOutput,
    SimError, TraceRow, TruthEvent,
};
pub use sensors::{synthesize_sensors, GnssFix, SensorPayload, SensorStreams};
pub use truth::{generate_truth, TrafficLight, TrafficLightState, TruthTrajectory};
