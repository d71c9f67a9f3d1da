//! HTTP inference service over a trained checkpoint and its corpus.
//!
//! All handlers read one immutable [`Snapshot`]; installing a new snapshot
//! swaps it atomically, and in-flight requests finish on the old one.

pub mod api;
mod error;
mod snapshot;

use std::net::SocketAddr;
use std::sync::{Arc, RwLock};

use axum::http::HeaderValue;
use axum::routing::{get, post};
use axum::Router;
use tower_http::cors::{Any, CorsLayer};

pub use api::{
    CategoriesResponse, HealthResponse, ItemSummary, RecommendRequest, RecommendResponse,
    Recommendation, SearchResponse,
};
pub use error::{ApiError, ErrorBody};
pub use snapshot::{category_tree, count_nodes, CategoryNode, Fingerprint, Snapshot};

#[derive(Default)]
pub struct AppState {
    current: RwLock<Option<Arc<Snapshot>>>,
}

impl AppState {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn with_snapshot(snapshot: Snapshot) -> Self {
        let state = Self::default();
        state.install(snapshot);
        state
    }

    pub fn snapshot(&self) -> Option<Arc<Snapshot>> {
        self.current
            .read()
            .unwrap_or_else(|p| p.into_inner())
            .clone()
    }

    /// Replaces the served snapshot.
    pub fn install(&self, snapshot: Snapshot) {
        *self.current.write().unwrap_or_else(|p| p.into_inner()) = Some(Arc::new(snapshot));
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ServeError {
    #[error("invalid CORS origin {0:?}")]
    Origin(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// CORS for the UI: any origin when `origin` is `None`.
pub fn cors(origin: Option<&str>) -> Result<CorsLayer, ServeError> {
    let layer = CorsLayer::new().allow_methods(Any).allow_headers(Any);
    Ok(match origin {
        None | Some("*") => layer.allow_origin(Any),
        Some(o) => layer.allow_origin(
            HeaderValue::from_str(o).map_err(|_| ServeError::Origin(o.to_owned()))?,
        ),
    })
}

pub fn router(state: Arc<AppState>, cors: CorsLayer) -> Router {
    Router::new()
        .route("/v1/recommend", post(api::recommend))
        .route("/v1/items", get(api::search_items))
        .route("/v1/items/{id}", get(api::get_item))
        .route("/v1/categories", get(api::categories))
        .route("/v1/health", get(api::health))
        .layer(cors)
        .with_state(state)
}

/// Serves until ctrl-c.
pub async fn run(addr: SocketAddr, state: Arc<AppState>, cors: CorsLayer) -> Result<(), ServeError> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state, cors))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
