//! HTTP service over mapper graphs, explanations, trajectories and
//! annotations.

mod error;
mod jobs;
mod routes;
mod state;
mod store;

use std::future::Future;

pub use error::ServiceError;
pub use jobs::{Job, JobFailure, JobStatus, Jobs};
pub use routes::router;
pub use state::{graph_id, load_datasets, AppState, Providers, ServiceConfig, StoredTrajectory};
pub use store::{Annotation, AnnotationFilter, AnnotationPatch, ElementRef, Session, SessionStore};

/// Serves the API on `listener` until `shutdown` resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    state: AppState,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> Result<(), ServiceError> {
    let addr = listener.local_addr().map_err(|e| ServiceError::Config(e.to_string()))?;
    log::info!("listening on http://{addr}");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(shutdown)
        .await
        .map_err(|e| ServiceError::Internal(e.to_string()))
}

/// A server running on its own thread and runtime.
pub struct BackgroundServer {
    pub addr: std::net::SocketAddr,
    shutdown: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<Result<(), ServiceError>>>,
}

impl BackgroundServer {
    /// Binds `addr` (port 0 picks a free port) and serves `state`.
    pub fn start(state: AppState, addr: &str) -> Result<Self, ServiceError> {
        let rt = tokio::runtime::Builder::new_multi_thread()
            .enable_all()
            .build()
            .map_err(|e| ServiceError::Config(e.to_string()))?;
        let listener = rt
            .block_on(tokio::net::TcpListener::bind(addr))
            .map_err(|e| ServiceError::Config(format!("cannot bind {addr}: {e}")))?;
        let local = listener.local_addr().map_err(|e| ServiceError::Config(e.to_string()))?;
        let (tx, rx) = tokio::sync::oneshot::channel();
        let thread = std::thread::spawn(move || {
            rt.block_on(serve(listener, state, async {
                let _ = rx.await;
            }))
        });
        Ok(Self {
            addr: local,
            shutdown: Some(tx),
            thread: Some(thread),
        })
    }

    pub fn url(&self, path: &str) -> String {
        format!("http://{}{path}", self.addr)
    }

    /// Stops accepting requests and waits for the server thread.
    pub fn stop(mut self) -> Result<(), ServiceError> {
        self.shutdown_inner()
    }

    fn shutdown_inner(&mut self) -> Result<(), ServiceError> {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        match self.thread.take() {
            Some(t) => t.join().map_err(|_| ServiceError::Internal("server thread panicked".into()))?,
            None => Ok(()),
        }
    }
}

impl Drop for BackgroundServer {
    fn drop(&mut self) {
        let _ = self.shutdown_inner();
    }
}
