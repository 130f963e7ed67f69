//! Many independent scenario runs at once. With the `parallel` feature the
//! runs spread over a rayon pool; without it they run one after another.
//! Either way each run is single-threaded and results come back in input
//! order.

use super::gen::{generate, GenParams};
use super::oracle::replay_plan;
use super::runner::{Runner, SimError};
use super::scenario::Scenario;
use super::transcript::{first_difference, Transcript};
use crate::store::Store;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Verdict {
    Match { lines: usize },
    Mismatch { index: usize, engine: Option<String>, oracle: Option<String> },
    Error(String),
}

impl Verdict {
    pub fn is_match(&self) -> bool {
        matches!(self, Verdict::Match { .. })
    }
}

/// Engine and oracle transcripts of one scenario.
pub fn both(scenario: &Scenario) -> Result<(Transcript, Transcript), SimError> {
    let plan = scenario.plan()?;
    let oracle = replay_plan(&plan);
    let store = Store::in_memory(plan.timing);
    let engine = Runner::start(plan, store)?.finish()?;
    Ok((engine, oracle))
}

pub fn verify(scenario: &Scenario) -> Verdict {
    match both(scenario) {
        Ok((engine, oracle)) => match first_difference(&engine, &oracle) {
            None => Verdict::Match { lines: engine.len() },
            Some((index, engine, oracle)) => Verdict::Mismatch { index, engine, oracle },
        },
        Err(e) => Verdict::Error(e.to_string()),
    }
}

fn map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync + Send) -> Vec<R> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}

/// Sequential reference path, always available regardless of features.
pub fn verify_many_sequential(scenarios: &[Scenario]) -> Vec<Verdict> {
    scenarios.iter().map(verify).collect()
}

/// Verifies each scenario; parallel when the `parallel` feature is on.
pub fn verify_many(scenarios: &[Scenario]) -> Vec<Verdict> {
    map(scenarios, verify)
}

/// Runs the engine on each scenario and returns rendered transcripts.
pub fn run_many(scenarios: &[Scenario]) -> Vec<Result<String, String>> {
    map(scenarios, |s| super::runner::run_scenario(s).map(|t| t.render()).map_err(|e| e.to_string()))
}

/// Generates `count` scenarios from consecutive seeds starting at `base`.
pub fn generate_many(base: u64, count: u64, params: GenParams) -> Vec<Scenario> {
    (base..base + count).map(|seed| generate(seed, params)).collect()
}
