//! Reservation service for one zone.
//!
//! Every state change is written to an append-only JSONL log before the
//! response goes out, and the in-memory state is a fold over that log, so
//! `replay` of a log file rebuilds exactly the ledger the live server had.

pub mod api;
pub mod app;
pub mod config;
pub mod log;
pub mod state;

use std::future::Future;
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

pub use api::router;
pub use app::{
    AcceptBody, ApiError, App, Availability, DeclineResponse, PolicyAck, SlotView, WireDecision,
    WireRequest, ZoneMetrics,
};
pub use config::ServiceConfig;
pub use log::{read_log, Event, EventLog, EventRecord};
pub use state::{recover, replay, verify, Counters, Snapshot, VerifyReport, ZoneState};

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("config: {0}")]
    Config(String),

    #[error("CORRUPT_LOG at seq {seq}: {message}")]
    CorruptLog { seq: u64, message: String },

    #[error(transparent)]
    Core(#[from] zonegate_core::Error),
}

/// Source of the service's notion of now, in seconds.
pub trait Clock: Send + Sync {
    fn now(&self) -> f64;
}

/// Unix wall-clock time.
#[derive(Debug, Default)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> f64 {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs_f64())
            .unwrap_or(0.0)
    }
}

/// A clock that only moves when told to.
#[derive(Debug, Default)]
pub struct ManualClock(Mutex<f64>);

impl ManualClock {
    pub fn new(t: f64) -> Self {
        ManualClock(Mutex::new(t))
    }

    pub fn set(&self, t: f64) {
        *self.0.lock().expect("clock lock") = t;
    }

    pub fn advance(&self, dt: f64) {
        *self.0.lock().expect("clock lock") += dt;
    }
}

impl Clock for ManualClock {
    fn now(&self) -> f64 {
        *self.0.lock().expect("clock lock")
    }
}

/// Serves `app` on an already bound listener until `shutdown` resolves.
pub async fn serve_on(
    listener: tokio::net::TcpListener,
    app: Arc<App>,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(app))
        .with_graceful_shutdown(shutdown)
        .await
}

/// Opens the log named in `config`, binds `config.listen` and serves until `shutdown`.
pub async fn serve(
    config: &ServiceConfig,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> Result<(), ServiceError> {
    let app = App::open(config, Arc::new(SystemClock))?;
    let listener = tokio::net::TcpListener::bind(&config.listen).await?;
    tracing::info!(addr = %listener.local_addr()?, log = %config.log_path.display(), "serving");
    serve_on(listener, app, shutdown).await?;
    Ok(())
}
