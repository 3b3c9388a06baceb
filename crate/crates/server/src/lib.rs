//! HTTP service over the qdachain engine.
//!
//! Chain stages run as background operations: the start endpoint claims the
//! session, answers `202` with an op id, and clients poll `GET /ops/{op_id}`.

pub mod api_error;
pub mod ops;
pub mod routes;
pub mod setup;

use std::io;
use std::net::SocketAddr;
use std::sync::Arc;

use tokio::net::TcpListener;
use tokio::sync::oneshot;
use tokio::task::JoinHandle;

pub use api_error::ApiError;
pub use routes::{router, AppState};
pub use setup::{EngineOptions, SetupError};

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub listen: SocketAddr,
    pub engine: EngineOptions,
}

#[derive(Debug, thiserror::Error)]
pub enum ServeError {
    #[error("address {0} is already in use")]
    PortInUse(SocketAddr),
    #[error(transparent)]
    Setup(#[from] SetupError),
    #[error("cannot listen on {addr}: {source}")]
    Bind {
        addr: SocketAddr,
        #[source]
        source: io::Error,
    },
}

pub struct ServiceHandle {
    addr: SocketAddr,
    state: Arc<AppState>,
    stop: oneshot::Sender<()>,
    server: JoinHandle<io::Result<()>>,
}

impl ServiceHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn engine(&self) -> &Arc<qdachain::Engine> {
        &self.state.engine
    }

    /// Stops accepting requests, then waits for in-flight chain operations.
    pub async fn shutdown(self) -> io::Result<()> {
        let _ = self.stop.send(());
        let served = self
            .server
            .await
            .unwrap_or_else(|e| Err(io::Error::other(e)));
        self.state.ops.drain().await;
        tracing::info!(addr = %self.addr, "service stopped");
        served
    }
}

/// Opens the storage, binds the listener and starts serving.
pub async fn serve(config: ServiceConfig) -> Result<ServiceHandle, ServeError> {
    let engine = setup::open_engine(&config.engine)?;
    let listener =
        TcpListener::bind(config.listen)
            .await
            .map_err(|source| match source.kind() {
                io::ErrorKind::AddrInUse => ServeError::PortInUse(config.listen),
                _ => ServeError::Bind {
                    addr: config.listen,
                    source,
                },
            })?;
    let addr = listener.local_addr().map_err(|source| ServeError::Bind {
        addr: config.listen,
        source,
    })?;
    let state = Arc::new(AppState {
        engine: Arc::new(engine),
        ops: Default::default(),
    });
    let app = router(state.clone());
    let (stop, stopped) = oneshot::channel::<()>();
    let server = tokio::spawn(async move {
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = stopped.await;
            })
            .await
    });
    tracing::info!(%addr, "service listening");
    Ok(ServiceHandle {
        addr,
        state,
        stop,
        server,
    })
}
