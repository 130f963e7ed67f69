//! Deterministic scenario simulation on a virtual clock, with an
//! independent brute-force oracle to check the engine against.

pub mod batch;
pub mod gen;
pub mod oracle;
pub mod runner;
pub mod scenario;
pub mod transcript;

pub use oracle::oracle_replay;
pub use runner::{run_scenario, run_scenario_with_stops, Runner, SimError};
pub use scenario::{Plan, Scenario, ScenarioError};
pub use transcript::Transcript;
