//! HTTP service over the MAMA core: one writer, one event log, a timer
//! driver and pluggable transports.

pub mod api;
pub mod clock;
pub mod config;
pub mod driver;
pub mod error;
pub mod state;
pub mod transports;

use std::sync::Arc;

use mama_core::mama::{Mama, OpError};
use mama_core::store::{repair_torn_tail, Store, StoreError};

use crate::clock::{Clock, ManualClock, SystemClock};
use crate::config::{ClockMode, Config};
use crate::state::AppState;

#[derive(Debug, thiserror::Error)]
pub enum ServeError {
    #[error("opening the event log: {0}")]
    Store(#[from] StoreError),
    #[error("replaying pending dispatches: {0}")]
    Op(#[from] OpError),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

/// Opens the store and assembles the shared state. With `repair`, an
/// incomplete final record left by a crash mid-append is cut first; any
/// other damage still refuses to load.
pub fn build_state(config: Config, repair: bool) -> Result<AppState, ServeError> {
    if repair && config.store_path.exists() {
        repair_torn_tail(&config.store_path)?;
    }
    let store = Store::open(&config.store_path, config.timing)?;
    let transports = transports::build(&config.transport)?;
    let mama = Mama::new(store, transports)?;
    let (clock, manual): (Arc<dyn Clock>, _) = match config.clock {
        ClockMode::System => (Arc::new(SystemClock), None),
        ClockMode::Manual => {
            let start = config.manual_start.or(mama.world().clock()).unwrap_or_else(|| SystemClock.now());
            let manual = ManualClock::new(start);
            if let Some(c) = mama.world().clock() {
                manual.set(c);
            }
            (Arc::new(manual.clone()), Some(manual))
        }
    };
    Ok(AppState::new(mama, clock, manual, config))
}

/// Serves until ctrl-c.
pub async fn serve(state: AppState) -> Result<(), ServeError> {
    let listener = tokio::net::TcpListener::bind(state.config().listen).await?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    let driver = tokio::spawn(driver::run(state.clone()));
    let app = api::router(state);
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
            tracing::info!("shutting down");
        })
        .await?;
    driver.abort();
    Ok(())
}
