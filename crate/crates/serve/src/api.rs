//! Request and response bodies, and the handlers that produce them.

use std::sync::Arc;

use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{Path, Query, State};
use axum::Json;
use serde::{Deserialize, Serialize};

use flare_core::data::{Item, CATEGORY_DELIMITER};
use flare_core::eval::category_relevance;

use crate::error::ApiError;
use crate::snapshot::{count_nodes, CategoryNode, Fingerprint, Snapshot};
use crate::AppState;

pub const DEFAULT_K: usize = 10;
pub const MAX_K: usize = 100;
pub const DEFAULT_PAGE: usize = 20;
pub const MAX_PAGE: usize = 100;

fn default_k() -> usize {
    DEFAULT_K
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecommendRequest {
    pub history: Vec<String>,
    #[serde(default)]
    pub critique: Option<String>,
    #[serde(default = "default_k")]
    pub k: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemSummary {
    pub item_id: String,
    pub title: String,
    pub categories: Vec<String>,
}

impl From<&Item> for ItemSummary {
    fn from(item: &Item) -> Self {
        Self {
            item_id: item.item_id.clone(),
            title: item.title.clone(),
            categories: item.categories.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Recommendation {
    pub rank: usize,
    pub item_id: String,
    pub title: String,
    pub categories: Vec<String>,
    pub score: f64,
    /// Leading category levels shared with the critique; absent without one.
    pub overlap: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecommendResponse {
    pub items: Vec<Recommendation>,
    /// The critique as applied, after trimming; absent when none was given.
    pub critique: Option<String>,
    pub k: usize,
    pub fingerprint: Fingerprint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchParams {
    #[serde(default)]
    pub q: String,
    #[serde(default)]
    pub offset: usize,
    #[serde(default)]
    pub limit: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchResponse {
    pub query: String,
    pub total: usize,
    pub offset: usize,
    pub limit: usize,
    pub items: Vec<ItemSummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoriesResponse {
    pub node_count: usize,
    pub roots: Vec<CategoryNode>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HealthResponse {
    pub status: String,
    pub fingerprint: Fingerprint,
}

fn snapshot(state: &AppState) -> Result<Arc<Snapshot>, ApiError> {
    state.snapshot().ok_or(ApiError::Unavailable)
}

/// Validates a request and resolves its history to item indices.
pub fn resolve(snap: &Snapshot, req: &RecommendRequest) -> Result<Vec<usize>, ApiError> {
    if req.history.is_empty() {
        return Err(ApiError::bad_field("history", "history must be non-empty"));
    }
    if !(1..=MAX_K).contains(&req.k) {
        return Err(ApiError::bad_field(
            "k",
            format!("k must be in [1, {MAX_K}], got {}", req.k),
        ));
    }
    req.history
        .iter()
        .enumerate()
        .map(|(i, id)| {
            snap.index_of(id).ok_or_else(|| {
                ApiError::bad_field(format!("history[{i}]"), format!("unknown item id {id:?}"))
            })
        })
        .collect()
}

/// Scores a validated request against one snapshot.
pub fn recommend_with(snap: &Snapshot, req: &RecommendRequest) -> Result<RecommendResponse, ApiError> {
    let history = resolve(snap, req)?;
    let critique = req
        .critique
        .as_deref()
        .map(str::trim)
        .filter(|c| !c.is_empty());
    let levels: Option<Vec<String>> =
        critique.map(|c| c.split(CATEGORY_DELIMITER).map(|s| s.trim().to_owned()).collect());
    let top = snap.model.predict_topk(&history, critique, req.k)?;
    let items = top
        .into_iter()
        .enumerate()
        .map(|(r, (idx, score))| {
            let item = &snap.items[idx];
            Recommendation {
                rank: r + 1,
                item_id: item.item_id.clone(),
                title: item.title.clone(),
                categories: item.categories.clone(),
                score,
                overlap: levels
                    .as_deref()
                    .map(|l| category_relevance(&item.categories, l)),
            }
        })
        .collect();
    Ok(RecommendResponse {
        items,
        critique: critique.map(str::to_owned),
        k: req.k,
        fingerprint: snap.fingerprint.clone(),
    })
}

pub async fn recommend(
    State(state): State<Arc<AppState>>,
    body: Result<Json<RecommendRequest>, JsonRejection>,
) -> Result<Json<RecommendResponse>, ApiError> {
    let Json(req) = body.map_err(|e| ApiError::BadRequest {
        message: e.body_text(),
        field: None,
    })?;
    let snap = snapshot(&state)?;
    let resp = tokio::task::spawn_blocking(move || recommend_with(&snap, &req))
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))??;
    Ok(Json(resp))
}

pub async fn get_item(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> Result<Json<Item>, ApiError> {
    let snap = snapshot(&state)?;
    snap.item(&id)
        .cloned()
        .map(Json)
        .ok_or(ApiError::NotFound(id))
}

pub async fn search_items(
    State(state): State<Arc<AppState>>,
    params: Result<Query<SearchParams>, QueryRejection>,
) -> Result<Json<SearchResponse>, ApiError> {
    let Query(p) = params.map_err(|e| ApiError::BadRequest {
        message: e.body_text(),
        field: None,
    })?;
    let limit = p.limit.unwrap_or(DEFAULT_PAGE);
    if !(1..=MAX_PAGE).contains(&limit) {
        return Err(ApiError::bad_field(
            "limit",
            format!("limit must be in [1, {MAX_PAGE}], got {limit}"),
        ));
    }
    let snap = snapshot(&state)?;
    let hits = snap.search(&p.q);
    let items = hits
        .iter()
        .skip(p.offset)
        .take(limit)
        .map(|&i| ItemSummary::from(&snap.items[i]))
        .collect();
    Ok(Json(SearchResponse {
        query: p.q,
        total: hits.len(),
        offset: p.offset,
        limit,
        items,
    }))
}

pub async fn categories(
    State(state): State<Arc<AppState>>,
) -> Result<Json<CategoriesResponse>, ApiError> {
    let snap = snapshot(&state)?;
    Ok(Json(CategoriesResponse {
        node_count: count_nodes(&snap.categories),
        roots: snap.categories.clone(),
    }))
}

pub async fn health(State(state): State<Arc<AppState>>) -> Result<Json<HealthResponse>, ApiError> {
    let snap = snapshot(&state)?;
    Ok(Json(HealthResponse {
        status: "ok".into(),
        fingerprint: snap.fingerprint.clone(),
    }))
}
