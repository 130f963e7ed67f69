//! Shared service state: the single writer, the clock and the config.

use std::sync::{Arc, Mutex, MutexGuard};

use mama_core::domain::{PatientId, Timestamp};
use mama_core::mama::{Mama, OpError};
use mama_core::store::Snapshot;
use rand::RngCore;
use sha2::{Digest, Sha256};
use tokio::sync::Notify;

use crate::clock::{Clock, ManualClock};
use crate::config::Config;

#[derive(Clone)]
pub struct AppState {
    inner: Arc<Inner>,
}

struct Inner {
    mama: Mutex<Mama>,
    clock: Arc<dyn Clock>,
    manual: Option<ManualClock>,
    config: Config,
    /// Wakes the timer driver after a mutation may have added timers.
    changed: Notify,
}

impl AppState {
    pub fn new(mama: Mama, clock: Arc<dyn Clock>, manual: Option<ManualClock>, config: Config) -> Self {
        Self { inner: Arc::new(Inner { mama: Mutex::new(mama), clock, manual, config, changed: Notify::new() }) }
    }

    pub fn config(&self) -> &Config {
        &self.inner.config
    }

    pub fn clock(&self) -> &dyn Clock {
        self.inner.clock.as_ref()
    }

    pub fn manual_clock(&self) -> Option<&ManualClock> {
        self.inner.manual.as_ref()
    }

    pub fn changed(&self) -> &Notify {
        &self.inner.changed
    }

    fn lock(&self) -> MutexGuard<'_, Mama> {
        // A panic mid-operation cannot leave the store half-written: every
        // append is all-or-nothing and a failed write poisons the store.
        self.inner.mama.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Runs a mutation as the single writer at the current instant. The
    /// instant never precedes the log's clock, even if the system clock
    /// stepped back.
    pub fn write<T>(&self, f: impl FnOnce(&mut Mama, Timestamp) -> Result<T, OpError>) -> Result<T, OpError> {
        let out = self.write_quietly(f);
        self.inner.changed.notify_one();
        out
    }

    /// As [`AppState::write`], without waking the timer driver.
    pub fn write_quietly<T>(&self, f: impl FnOnce(&mut Mama, Timestamp) -> Result<T, OpError>) -> Result<T, OpError> {
        let mut mama = self.lock();
        let now = match mama.world().clock() {
            Some(c) => self.clock().now().max(c),
            None => self.clock().now(),
        };
        f(&mut mama, now)
    }

    /// A consistent read view; readers never block the writer for long.
    pub fn read(&self) -> Snapshot {
        self.lock().snapshot()
    }
}

/// Bearer tokens are stored hashed.
pub fn token_digest(token: &str) -> String {
    Sha256::digest(token.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn fresh_token() -> String {
    let mut bytes = [0u8; 24];
    rand::rng().fill_bytes(&mut bytes);
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Who a request speaks for.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Caller {
    Provider,
    Patient(PatientId),
}

impl Caller {
    pub fn may_access(&self, patient: &PatientId) -> bool {
        match self {
            Caller::Provider => true,
            Caller::Patient(p) => p == patient,
        }
    }
}
