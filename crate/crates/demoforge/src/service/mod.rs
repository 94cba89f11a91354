//! HTTP API and WebSocket streaming.
//!
//! | Route | |
//! |---|---|
//! | `GET /api/v1/scenes`, `GET /api/v1/robots` | catalog |
//! | `GET /api/v1/sessions`, `POST /api/v1/sessions` | sessions |
//! | `POST /api/v1/sessions/{id}/recording/start`, `.../stop` | recording control |
//! | `GET /api/v1/episodes`, `GET /api/v1/episodes/{id}` | manifests, annotations, media |
//! | `GET /api/v1/episodes/{id}/frames` | raw frame log |
//! | `POST /api/v1/annotations` | annotate an episode or session |
//! | `POST /api/v1/media/{target}` | upload media |
//! | `GET /ws/v1/sessions/{id}` | wire protocol |

mod http;
pub mod session;
mod ws;

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::sync::{Arc, Mutex};

use axum::routing::{get, post};
use axum::Router;
use tokio::net::TcpListener;
use tokio::sync::watch;
use tokio::task::JoinHandle;

use crate::catalog::Catalog;
use crate::config::ServeConfig;
use crate::store::{Store, StoreError};
use session::SessionHandle;

/// States per second a session streams: tick rate / decimation.
pub fn stream_rate_hz(tick_hz: u32) -> u32 {
    tick_hz / session::STREAM_DECIMATION as u32
}

pub struct AppState {
    pub catalog: Catalog,
    pub store: Store,
    pub max_sessions: usize,
    pub media_cap_bytes: u64,
    sessions: Mutex<BTreeMap<String, Arc<SessionHandle>>>,
}

impl AppState {
    pub fn new(catalog: Catalog, store: Store, max_sessions: usize, media_cap_bytes: u64) -> Self {
        AppState { catalog, store, max_sessions, media_cap_bytes, sessions: Mutex::default() }
    }

    pub fn session(&self, id: &str) -> Option<Arc<SessionHandle>> {
        self.sessions.lock().unwrap().get(id).cloned()
    }

    pub fn sessions(&self) -> Vec<Arc<SessionHandle>> {
        self.sessions.lock().unwrap().values().cloned().collect()
    }

    /// Finalizes open recordings and stops every session loop.
    pub async fn shutdown_sessions(&self) {
        let all: Vec<_> = std::mem::take(&mut *self.sessions.lock().unwrap()).into_values().collect();
        for s in all {
            s.shutdown().await;
        }
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/v1/scenes", get(http::scenes))
        .route("/api/v1/robots", get(http::robots))
        .route("/api/v1/sessions", get(http::list_sessions).post(http::create_session))
        .route("/api/v1/sessions/{id}/recording/start", post(http::recording_start))
        .route("/api/v1/sessions/{id}/recording/stop", post(http::recording_stop))
        .route("/api/v1/episodes", get(http::list_episodes))
        .route("/api/v1/episodes/{id}", get(http::episode))
        .route("/api/v1/episodes/{id}/frames", get(http::episode_frames))
        .route("/api/v1/annotations", post(http::annotate))
        .route("/api/v1/media/{target}", post(http::upload_media))
        .route("/ws/v1/sessions/{id}", get(ws::upgrade))
        .with_state(state)
}

#[derive(Debug, thiserror::Error)]
pub enum ServeError {
    #[error("cannot bind {addr}: {source}")]
    Bind { addr: SocketAddr, source: std::io::Error },
    #[error("recovery failed: {0}")]
    Recovery(#[from] StoreError),
}

/// A running server. Dropping it without [`Server::shutdown`] leaves the task running.
pub struct Server {
    pub addr: SocketAddr,
    pub state: Arc<AppState>,
    stop: watch::Sender<bool>,
    task: JoinHandle<std::io::Result<()>>,
}

impl Server {
    /// Recovers interrupted episodes, binds and starts serving.
    pub async fn start(config: &ServeConfig, catalog: Catalog) -> Result<Server, ServeError> {
        let store = Store::new(&config.data_dir);
        let recovered = store.recover()?;
        for id in &recovered {
            tracing::warn!(episode = %id, "recovered interrupted episode");
        }
        let listener =
            TcpListener::bind(config.bind).await.map_err(|source| ServeError::Bind { addr: config.bind, source })?;
        let addr = listener.local_addr().map_err(|source| ServeError::Bind { addr: config.bind, source })?;
        let state = Arc::new(AppState::new(catalog, store, config.max_sessions, config.media_cap_bytes));
        let (stop, mut stopped) = watch::channel(false);
        let app = router(state.clone());
        let task = tokio::spawn(async move {
            axum::serve(listener, app)
                .with_graceful_shutdown(async move {
                    let _ = stopped.wait_for(|s| *s).await;
                })
                .await
        });
        Ok(Server { addr, state, stop, task })
    }

    /// Finalizes recordings, closes sessions and stops accepting connections.
    pub async fn shutdown(self) -> std::io::Result<()> {
        self.state.shutdown_sessions().await;
        let _ = self.stop.send(true);
        self.task.await.map_err(std::io::Error::other)?
    }
}
