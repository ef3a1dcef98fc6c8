//! HTTP facade over pairwise annotation sessions.
//!
//! | method | path | body | response |
//! |---|---|---|---|
//! | GET | `/health` | | [`Health`] |
//! | POST | `/v1/sessions` | [`CreateSessionRequest`] | 201 [`SessionView`](ordepth_core::api::SessionView) |
//! | GET | `/v1/sessions/{id}/question` | | [`QuestionView`](ordepth_core::api::QuestionView) |
//! | POST | `/v1/sessions/{id}/answer` | [`AnswerRequest`] | [`AnswerView`](ordepth_core::api::AnswerView) |
//! | GET | `/v1/sessions/{id}/relations` | | [`RelationSet`](ordepth_core::supervision::RelationSet) |
//! | GET | `/v1/items/{id}` | | [`ItemView`](ordepth_core::api::ItemView) |
//!
//! Errors carry an [`ErrorBody`](ordepth_core::api::ErrorBody) with 404 for
//! unknown sessions or items, 409 for protocol violations and 400 for
//! malformed requests.

pub mod error;
pub mod store;

use std::future::Future;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::IntoResponse;
use axum::routing::{get, post};
use axum::{Json, Router};
use ordepth_core::api::{AnswerRequest, CreateSessionRequest, Health, ItemRegistry};
use tokio::net::TcpListener;
use tower_http::services::ServeDir;

pub use error::ServiceError;
pub use store::SessionStore;

type AppState = Arc<SessionStore>;

pub fn router(store: AppState, ui_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}/question", get(get_question))
        .route("/sessions/{id}/answer", post(post_answer))
        .route("/sessions/{id}/relations", get(get_relations))
        .route("/items/{id}", get(get_item));
    let app = Router::new()
        .route("/health", get(health))
        .nest("/v1", api)
        .with_state(store);
    match ui_dir {
        Some(dir) => app.fallback_service(ServeDir::new(dir)),
        None => app,
    }
}

/// Runs a store operation off the async executor; log writes fsync.
async fn blocking<T, F>(store: AppState, f: F) -> Result<T, ServiceError>
where
    T: Send + 'static,
    F: FnOnce(&SessionStore) -> Result<T, ServiceError> + Send + 'static,
{
    tokio::task::spawn_blocking(move || f(&store))
        .await
        .map_err(|e| ServiceError::Internal(e.to_string()))?
}

fn body<T>(payload: Result<Json<T>, JsonRejection>) -> Result<T, ServiceError> {
    payload
        .map(|Json(v)| v)
        .map_err(|e| ServiceError::BadRequest(e.body_text()))
}

async fn health(State(store): State<AppState>) -> Json<Health> {
    Json(Health {
        status: "ok".into(),
        items: store.registry().items.len(),
        sessions: store.session_count(),
    })
}

async fn create_session(
    State(store): State<AppState>,
    payload: Result<Json<CreateSessionRequest>, JsonRejection>,
) -> Result<impl IntoResponse, ServiceError> {
    let req = body(payload)?;
    let view = blocking(store, move |s| s.create(&req.item_id)).await?;
    tracing::info!(session = %view.session_id, item = %view.item_id, "session created");
    Ok((StatusCode::CREATED, Json(view)))
}

async fn get_question(State(store): State<AppState>, Path(id): Path<String>) -> Result<impl IntoResponse, ServiceError> {
    Ok(Json(store.question(&id)?))
}

async fn post_answer(
    State(store): State<AppState>,
    Path(id): Path<String>,
    payload: Result<Json<AnswerRequest>, JsonRejection>,
) -> Result<impl IntoResponse, ServiceError> {
    let req = body(payload)?;
    let answer = req.parse().map_err(|e| ServiceError::BadRequest(e.to_string()))?;
    let view = blocking(store, move |s| s.answer(&id, answer, req.seq)).await?;
    Ok(Json(view))
}

async fn get_relations(State(store): State<AppState>, Path(id): Path<String>) -> Result<impl IntoResponse, ServiceError> {
    Ok(Json(store.relations(&id)?))
}

async fn get_item(State(store): State<AppState>, Path(id): Path<String>) -> Result<impl IntoResponse, ServiceError> {
    let reg = store.registry();
    let item = reg
        .get(&id)
        .ok_or_else(|| ServiceError::NotFound(format!("item {id:?}")))?;
    Ok(Json(reg.view(item)))
}

#[derive(Debug, Clone)]
pub struct ServeConfig {
    pub addr: SocketAddr,
    pub registry: ItemRegistry,
    /// Session logs live under `data_dir/sessions`; `None` keeps them in memory.
    pub data_dir: Option<PathBuf>,
    pub ui_dir: Option<PathBuf>,
}

/// A bound but not yet running server.
pub struct Server {
    listener: TcpListener,
    app: Router,
    store: AppState,
}

impl Server {
    pub async fn bind(cfg: ServeConfig) -> Result<Self, ServiceError> {
        let store = Arc::new(match &cfg.data_dir {
            Some(dir) => SessionStore::open(cfg.registry, dir)?,
            None => SessionStore::in_memory(cfg.registry),
        });
        let listener = TcpListener::bind(cfg.addr)
            .await
            .map_err(|e| ServiceError::Internal(format!("cannot bind {}: {e}", cfg.addr)))?;
        let ui_dir = cfg.ui_dir.filter(|d| d.is_dir());
        Ok(Server {
            listener,
            app: router(store.clone(), ui_dir),
            store,
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.listener.local_addr().expect("bound listener has an address")
    }

    pub fn store(&self) -> AppState {
        self.store.clone()
    }

    pub async fn run(self) -> std::io::Result<()> {
        axum::serve(self.listener, self.app).await
    }

    pub async fn run_until<F>(self, shutdown: F) -> std::io::Result<()>
    where
        F: Future<Output = ()> + Send + 'static,
    {
        axum::serve(self.listener, self.app).with_graceful_shutdown(shutdown).await
    }
}
