//! Medication reminder core: dose scheduling, the escalation engine,
//! notification channels, reporting, ingestion, the event-sourced store and
//! a deterministic scenario simulator.

pub mod channels;
pub mod domain;
pub mod escalation;
pub mod ingestion;
pub mod mama;
pub mod reporting;
pub mod scheduler;
pub mod sim;
pub mod store;
pub mod world;
