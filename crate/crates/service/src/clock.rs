//! Wall-clock sources.

use std::sync::{Arc, Mutex};

use chrono::{SubsecRound, Utc};
use mama_core::domain::Timestamp;

pub trait Clock: Send + Sync {
    fn now(&self) -> Timestamp;

    /// Whether the timer driver should follow this clock on its own.
    fn is_live(&self) -> bool {
        true
    }
}

/// System time, truncated to whole seconds.
#[derive(Debug, Clone, Copy, Default)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> Timestamp {
        Utc::now().trunc_subsecs(0)
    }
}

/// A clock that only moves when told to.
#[derive(Debug, Clone)]
pub struct ManualClock(Arc<Mutex<Timestamp>>);

impl ManualClock {
    pub fn new(start: Timestamp) -> Self {
        Self(Arc::new(Mutex::new(start)))
    }

    /// Moves the clock to `to`; earlier instants are ignored.
    pub fn set(&self, to: Timestamp) {
        let mut now = self.0.lock().expect("clock poisoned");
        *now = (*now).max(to);
    }
}

impl Clock for ManualClock {
    fn now(&self) -> Timestamp {
        *self.0.lock().expect("clock poisoned")
    }

    fn is_live(&self) -> bool {
        false
    }
}
