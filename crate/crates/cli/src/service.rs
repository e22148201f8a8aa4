//! Read-only HTTP front end over one loaded [`SearchEngine`].
//!
//! `POST /v1/search` takes `{"query": "...", "top_k": 10}`; `GET /v1/stats`
//! returns index statistics; `GET /healthz` answers `ok`.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Instant;

use anyhow::{Context, Result};
use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tower::limit::ConcurrencyLimitLayer;
use unidex_core::index::IndexStats;
use unidex_core::pipeline::{QueryInput, SearchEngine};

use crate::commands::{load_engine, Hit, SearchResponse};
use crate::{ServeArgs, UsageError};

struct AppState {
    engine: SearchEngine,
    stats: IndexStats,
    default_top_k: usize,
    fault_ids: AtomicU64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SearchRequest {
    query: String,
    top_k: Option<usize>,
}

#[derive(Serialize)]
struct SearchReply {
    hits: Vec<Hit>,
    touched: usize,
    truncated: bool,
    latency_ms: f64,
}

#[derive(Serialize)]
struct ErrorReply {
    error: String,
}

fn reject(status: StatusCode, msg: impl Into<String>) -> Response {
    (status, Json(ErrorReply { error: msg.into() })).into_response()
}

/// Internal failures are logged with an id; the client only sees the id.
fn fault(state: &AppState, err: impl std::fmt::Display) -> Response {
    let id = state.fault_ids.fetch_add(1, Ordering::Relaxed);
    eprintln!("fault {id}: {err}");
    reject(StatusCode::INTERNAL_SERVER_ERROR, format!("internal error (ref {id})"))
}

async fn search(State(state): State<Arc<AppState>>, body: Bytes) -> Response {
    let req: SearchRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return reject(StatusCode::BAD_REQUEST, format!("malformed request: {e}")),
    };
    let top_k = req.top_k.unwrap_or(state.default_top_k);
    if top_k == 0 {
        return reject(StatusCode::BAD_REQUEST, "top_k must be >= 1");
    }
    let start = Instant::now();
    let worker = Arc::clone(&state);
    let outcome =
        tokio::task::spawn_blocking(move || worker.engine.search(&QueryInput::Text(req.query), top_k)).await;
    let latency_ms = start.elapsed().as_secs_f64() * 1e3;
    match outcome {
        Ok(Ok(out)) => {
            let r = SearchResponse::from(out);
            Json(SearchReply {
                hits: r.hits,
                touched: r.touched,
                truncated: r.truncated,
                latency_ms,
            })
            .into_response()
        }
        Ok(Err(e)) => fault(&state, e),
        Err(e) => fault(&state, e),
    }
}

async fn stats(State(state): State<Arc<AppState>>) -> Json<IndexStats> {
    Json(state.stats.clone())
}

async fn healthz() -> &'static str {
    "ok"
}

fn router(state: Arc<AppState>, max_concurrent: usize) -> Router {
    Router::new()
        .route("/v1/search", post(search))
        .route("/v1/stats", get(stats))
        .route("/healthz", get(healthz))
        .layer(ConcurrencyLimitLayer::new(max_concurrent))
        .with_state(state)
}

pub(crate) fn serve(a: ServeArgs) -> Result<()> {
    if a.top_k == 0 || a.max_concurrent == 0 {
        return Err(UsageError("--top-k and --max-concurrent must be positive".into()).into());
    }
    let engine = load_engine(
        &a.index,
        &a.touch,
        &a.rank,
        a.rank_embeddings.as_deref(),
        a.max_candidates,
    )?;
    let stats = engine.index().stats(None)?;
    let state = Arc::new(AppState {
        engine,
        stats,
        default_top_k: a.top_k,
        fault_ids: AtomicU64::new(1),
    });
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .context("starting runtime")?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(a.bind)
            .await
            .with_context(|| format!("binding {}", a.bind))?;
        eprintln!("listening on {}", listener.local_addr()?);
        axum::serve(listener, router(state, a.max_concurrent))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .context("serving")
    })
}
