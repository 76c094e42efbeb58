//! Operations API over a running simulation.
//!
//! Handlers only read [`Snapshot`]s and push onto the simulation's
//! [`CommandQueue`]; the simulation thread calls [`Gateway::sync`] between
//! steps to publish notices and a fresh snapshot.

pub mod api;
pub mod hub;
pub mod snapshot;

use std::io;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use cssasim_core::controller::Notice;
use cssasim_core::sim::{CommandQueue, Simulation};
use tokio::net::TcpListener;
use tokio::sync::oneshot;
use tokio::task::JoinHandle;

pub use api::{router, ApiError, GatewaySession, CLOSE_SLOW_CONSUMER};
pub use hub::{EventHub, Frame, STREAM_BACKLOG};
pub use snapshot::{Snapshot, SnapshotCell};

#[derive(Debug, thiserror::Error)]
pub enum GatewayError {
    #[error("cannot bind {addr}: {source}")]
    BindFailure { addr: SocketAddr, source: io::Error },
}

#[derive(Debug)]
struct Inner {
    snapshot: SnapshotCell,
    commands: CommandQueue,
    hub: EventHub,
    scenarios: Vec<String>,
    next_session: AtomicU64,
}

#[derive(Debug, Clone)]
pub struct Gateway {
    inner: Arc<Inner>,
}

impl Gateway {
    /// `scenarios` lists names accepted by the start endpoint; empty accepts any.
    pub fn new(commands: CommandQueue, scenarios: Vec<String>) -> Self {
        Self::with_hub(commands, scenarios, EventHub::default())
    }

    pub fn with_hub(commands: CommandQueue, scenarios: Vec<String>, hub: EventHub) -> Self {
        Gateway {
            inner: Arc::new(Inner {
                snapshot: SnapshotCell::default(),
                commands,
                hub,
                scenarios,
                next_session: AtomicU64::new(1),
            }),
        }
    }

    pub fn snapshot(&self) -> &SnapshotCell {
        &self.inner.snapshot
    }

    pub fn commands(&self) -> &CommandQueue {
        &self.inner.commands
    }

    pub fn hub(&self) -> &EventHub {
        &self.inner.hub
    }

    pub fn scenarios(&self) -> &[String] {
        &self.inner.scenarios
    }

    fn next_session_id(&self) -> u64 {
        self.inner.next_session.fetch_add(1, Ordering::Relaxed)
    }

    /// Streams the simulation's pending notices and publishes a new snapshot.
    /// Returns the notices so the caller can inspect them too.
    pub fn sync(&self, sim: &mut Simulation) -> Vec<Notice> {
        let notices = sim.take_notices();
        self.inner.snapshot.publish(Snapshot::capture(sim));
        self.inner.hub.publish_notices(notices.iter().cloned());
        notices
    }
}

pub struct RunningGateway {
    addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    task: JoinHandle<io::Result<()>>,
}

impl RunningGateway {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub async fn shutdown(mut self) -> io::Result<()> {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        self.task.await.map_err(io::Error::other)?
    }
}

/// Binds `addr` and serves the API until [`RunningGateway::shutdown`].
pub async fn serve(gw: Gateway, addr: SocketAddr) -> Result<RunningGateway, GatewayError> {
    let listener = TcpListener::bind(addr).await.map_err(|source| GatewayError::BindFailure { addr, source })?;
    let local = listener.local_addr().map_err(|source| GatewayError::BindFailure { addr, source })?;
    let (tx, rx) = oneshot::channel::<()>();
    let app = router(gw);
    let task = tokio::spawn(async move {
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = rx.await;
            })
            .await
    });
    tracing::info!(%local, "gateway listening");
    Ok(RunningGateway { addr: local, shutdown: Some(tx), task })
}
