//! The timer driver: advances the service to each wake-up instant as real
//! time reaches it.

use std::time::Duration;

use chrono::TimeDelta;

use crate::state::AppState;

/// Runs until the task is dropped. Sleeps until the next timer, the
/// configured maximum, or a mutation that may have added timers. The log
/// only grows when a timer is actually due.
pub async fn run(state: AppState) {
    let max_sleep = Duration::from_secs(state.config().max_sleep_secs.max(1));
    loop {
        let mut wait = max_sleep;
        if state.clock().is_live() {
            if let Some(at) = state.read().world.next_wakeup() {
                let delta = at - state.clock().now();
                if delta <= TimeDelta::zero() {
                    match state.write_quietly(|m, now| m.advance(now)) {
                        Ok(actions) => tracing::debug!(count = actions.len(), "timers fired"),
                        Err(e) => tracing::error!(error = %e, "advancing the clock failed"),
                    }
                    continue;
                }
                wait = delta.to_std().unwrap_or(Duration::ZERO).min(max_sleep);
            }
        }
        tokio::select! {
            _ = tokio::time::sleep(wait) => {}
            _ = state.changed().notified() => {}
        }
    }
}
