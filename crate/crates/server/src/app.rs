use std::future::Future;
use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use axum::Router;
use tokio::net::TcpListener;
use tokio::sync::watch;

use neusymms_core::service::MemoryService;
use neusymms_core::store::{FactStore, IdSource, SystemClock};

use crate::auth::Auth;
use crate::config::{ConfigError, ServerConfig};
use crate::routes::{router, AppState};

#[derive(Debug, thiserror::Error)]
pub enum ServeError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("store {path}: {message}")]
    Store { path: String, message: String },
    #[error("cannot bind {addr}: {source}")]
    Bind { addr: String, source: std::io::Error },
    #[error("server failed: {0}")]
    Io(#[from] std::io::Error),
}

/// A configured service, ready to be served.
#[derive(Clone)]
pub struct App {
    pub service: Arc<MemoryService>,
    pub auth: Arc<Auth>,
    /// Interval of the background lifecycle job; `None` disables it.
    pub lifecycle_every: Option<Duration>,
}

impl App {
    pub fn new(service: Arc<MemoryService>, auth: Auth) -> Self {
        Self {
            service,
            auth: Arc::new(auth),
            lifecycle_every: None,
        }
    }

    /// Opens the store directory and loads the rule pack and tokens.
    pub fn from_config(cfg: &ServerConfig) -> Result<Self, ServeError> {
        let pack = cfg.load_rule_pack()?;
        let auth = cfg.auth()?;
        let store_error = |message: String| ServeError::Store {
            path: cfg.store_dir.display().to_string(),
            message,
        };
        let store = FactStore::open(&cfg.store_dir, Arc::new(SystemClock), IdSource::Random)
            .map_err(|e| store_error(e.to_string()))?;
        let mut service = MemoryService::new(Arc::new(store), pack, cfg.extraction.clone(), cfg.lifecycle.clone())
            .map_err(|m| ConfigError::Invalid {
                key: "extraction".into(),
                message: m,
            })?;
        if let Some(path) = &cfg.trace_log {
            service = service.log_traces_to(path).map_err(|e| ConfigError::Invalid {
                key: "trace_log".into(),
                message: format!("{}: {e}", path.display()),
            })?;
        }
        Ok(Self {
            service: Arc::new(service),
            auth: Arc::new(auth),
            lifecycle_every: cfg.lifecycle_job.then(|| cfg.lifecycle.job_interval()),
        })
    }

    pub fn router(&self) -> Router {
        router(AppState {
            service: self.service.clone(),
            auth: self.auth.clone(),
        })
    }
}

pub async fn bind(addr: &str) -> Result<TcpListener, ServeError> {
    TcpListener::bind(addr).await.map_err(|source| ServeError::Bind {
        addr: addr.to_string(),
        source,
    })
}

async fn lifecycle_loop(service: Arc<MemoryService>, every: Duration, mut stop: watch::Receiver<bool>) {
    let mut ticker = tokio::time::interval(every);
    ticker.tick().await;
    loop {
        tokio::select! {
            _ = ticker.tick() => {
                let svc = service.clone();
                match tokio::task::spawn_blocking(move || svc.run_lifecycle(svc.store().now())).await {
                    Ok(report) => tracing::info!(
                        users = report.users,
                        promoted = report.promoted.len(),
                        pruned = report.pruned.len(),
                        failures = report.failures.len(),
                        "lifecycle pass"
                    ),
                    Err(e) => tracing::error!(error = %e, "lifecycle pass panicked"),
                }
            }
            _ = stop.changed() => break,
        }
    }
}

/// Serves until `shutdown` resolves, then drains open requests and stops
/// the lifecycle job.
pub async fn serve(
    listener: TcpListener,
    app: App,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> Result<(), ServeError> {
    let local: Option<SocketAddr> = listener.local_addr().ok();
    let (stop, stopped) = watch::channel(false);
    let job = app
        .lifecycle_every
        .map(|every| tokio::spawn(lifecycle_loop(app.service.clone(), every, stopped)));
    tracing::info!(addr = ?local, users = app.auth.len(), "listening");
    let result = axum::serve(listener, app.router()).with_graceful_shutdown(shutdown).await;
    let _ = stop.send(true);
    if let Some(job) = job {
        let _ = job.await;
    }
    tracing::info!("stopped");
    Ok(result?)
}
