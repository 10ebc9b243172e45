//! HTTP/JSON tool service.
//!
//! | Method | Path       | Body                                    | Response                    |
//! |--------|------------|-----------------------------------------|-----------------------------|
//! | POST   | `/tool1`   | `{entities: [str], p?: int}`            | `{groups, rendered}`        |
//! | POST   | `/tool2`   | `{groups: [EntityGroup], selected: [int]}` | `{triplets, rendered}`   |
//! | POST   | `/reward`  | `{text, gold, step, s1?, s2?}`          | `RewardBreakdown`           |
//! | POST   | `/rollout` | `{question, id?, config?}`              | `Trajectory`                |
//! | GET    | `/healthz` |                                         | `{status, stats, ...}`      |
//!
//! Errors are `{"error": "..."}` with 400 (bad request body), 401 (token),
//! 413 (body too large), 429 (concurrency limit), 502 (policy or encoder
//! backend failure) or 503 (no policy configured).

use std::collections::BTreeSet;
use std::net::SocketAddr;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::rejection::JsonRejection;
use axum::extract::{DefaultBodyLimit, FromRequest, Request, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tokio::sync::{oneshot, Semaphore};

use crate::config::{ConfigError, Resources, SakeConfig};
use crate::kg::{KgStats, Triplet};
use crate::policy::Policy;
use crate::reward::{curriculum_reward, normalize_gold, RewardSchedule};
use crate::rollout::{run_rollout, RolloutConfig, RolloutError, Trajectory};
use crate::tools::{self, EntityGroup};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tool1Request {
    pub entities: Vec<String>,
    #[serde(default)]
    pub p: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tool1Response {
    pub groups: Vec<EntityGroup>,
    pub rendered: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tool2Request {
    pub groups: Vec<EntityGroup>,
    pub selected: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tool2Response {
    pub triplets: Vec<Triplet>,
    pub rendered: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardRequest {
    pub text: String,
    pub gold: String,
    pub step: u64,
    #[serde(default)]
    pub s1: Option<u64>,
    #[serde(default)]
    pub s2: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutRequest {
    pub question: String,
    #[serde(default)]
    pub id: Option<String>,
    #[serde(default)]
    pub config: Option<RolloutConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub stats: KgStats,
    pub indexed_entities: usize,
    pub policy_configured: bool,
}

/// Shared, read-only server state.
pub struct AppState {
    pub resources: Resources,
    pub policy: Option<Arc<dyn Policy>>,
    pub rollout: RolloutConfig,
    pub reward: RewardSchedule,
    pub auth_token: Option<String>,
    limiter: Arc<Semaphore>,
}

impl AppState {
    pub fn new(
        resources: Resources,
        policy: Option<Arc<dyn Policy>>,
        rollout: RolloutConfig,
        reward: RewardSchedule,
        concurrency_limit: usize,
    ) -> Self {
        Self {
            resources,
            policy,
            rollout,
            reward,
            auth_token: None,
            limiter: Arc::new(Semaphore::new(concurrency_limit.max(1))),
        }
    }

    pub fn with_auth_token(mut self, token: Option<String>) -> Self {
        self.auth_token = token;
        self
    }

    /// Builds resources and the policy client from a config file's contents.
    pub fn from_config(cfg: &SakeConfig) -> Result<Self, ConfigError> {
        let index_path = cfg
            .kg_index
            .as_deref()
            .ok_or_else(|| ConfigError::Invalid("kg_index is required to serve".into()))?;
        let resources = Resources::load(index_path, &cfg.encoder)?;
        let policy = cfg.policy.as_ref().map(|p| p.build()).transpose()?;
        Ok(Self::new(
            resources,
            policy,
            cfg.rollout.clone(),
            cfg.reward,
            cfg.server.concurrency_limit,
        )
        .with_auth_token(cfg.server.auth_token.clone()))
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

impl From<JsonRejection> for ApiError {
    fn from(rejection: JsonRejection) -> Self {
        let status = match rejection.status() {
            StatusCode::PAYLOAD_TOO_LARGE => StatusCode::PAYLOAD_TOO_LARGE,
            _ => StatusCode::BAD_REQUEST,
        };
        ApiError::new(status, rejection.body_text())
    }
}

/// `Json` with rejections mapped to `400 {"error": ...}`.
pub struct ApiJson<T>(pub T);

impl<S, T> FromRequest<S> for ApiJson<T>
where
    Json<T>: FromRequest<S, Rejection = JsonRejection>,
    S: Send + Sync,
{
    type Rejection = ApiError;

    async fn from_request(req: Request, state: &S) -> Result<Self, Self::Rejection> {
        Json::<T>::from_request(req, state)
            .await
            .map(|Json(v)| ApiJson(v))
            .map_err(ApiError::from)
    }
}

/// Serializes with `serde_json::to_vec`, the same bytes a library caller
/// gets from serializing the same value.
fn json_bytes<T: Serialize>(value: &T) -> Response {
    match serde_json::to_vec(value) {
        Ok(body) => (
            [(header::CONTENT_TYPE, HeaderValue::from_static("application/json"))],
            Bytes::from(body),
        )
            .into_response(),
        Err(e) => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()).into_response(),
    }
}

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, ApiError> + Send + 'static,
) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
}

/// Library path behind `/tool1`.
pub fn tool1_response(resources: &Resources, request: &Tool1Request, default_p: usize) -> Result<Tool1Response, crate::embedding::EncodeError> {
    let out = tools::construct_groups(
        &request.entities,
        &resources.index,
        resources.encoder.as_ref(),
        request.p.unwrap_or(default_p),
    )?;
    Ok(Tool1Response {
        groups: out.groups().to_vec(),
        rendered: out.rendered,
    })
}

/// Library path behind `/tool2`.
pub fn tool2_response(resources: &Resources, request: &Tool2Request) -> Tool2Response {
    let selected: BTreeSet<usize> = request.selected.iter().copied().collect();
    let out = tools::retrieve_triplets(&request.groups, &selected, &resources.kg);
    Tool2Response {
        triplets: out.triplets().to_vec(),
        rendered: out.rendered,
    }
}

async fn tool1(State(state): State<Arc<AppState>>, ApiJson(request): ApiJson<Tool1Request>) -> Response {
    let result = blocking(move || {
        tool1_response(&state.resources, &request, state.rollout.p)
            .map_err(|e| ApiError::new(StatusCode::BAD_GATEWAY, e.to_string()))
    })
    .await;
    match result {
        Ok(body) => json_bytes(&body),
        Err(e) => e.into_response(),
    }
}

async fn tool2(State(state): State<Arc<AppState>>, ApiJson(request): ApiJson<Tool2Request>) -> Response {
    json_bytes(&tool2_response(&state.resources, &request))
}

async fn reward(State(state): State<Arc<AppState>>, ApiJson(request): ApiJson<RewardRequest>) -> Response {
    let s1 = request.s1.unwrap_or(state.reward.s1());
    let s2 = request.s2.unwrap_or(state.reward.s2());
    let schedule = match RewardSchedule::new(s1, s2) {
        Ok(s) => s,
        Err(e) => return ApiError::new(StatusCode::BAD_REQUEST, e.to_string()).into_response(),
    };
    json_bytes(&curriculum_reward(
        &request.text,
        &normalize_gold(&request.gold),
        request.step,
        &schedule,
    ))
}

#[derive(Serialize)]
struct RolloutFailure {
    error: String,
    partial: Option<Trajectory>,
}

async fn rollout(State(state): State<Arc<AppState>>, ApiJson(request): ApiJson<RolloutRequest>) -> Response {
    if state.policy.is_none() {
        return ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "no policy backend configured").into_response();
    }
    let config = request.config.clone().unwrap_or_else(|| state.rollout.clone());
    if let Err(e) = config.validate() {
        return ApiError::new(StatusCode::BAD_REQUEST, e).into_response();
    }
    let joined = tokio::task::spawn_blocking(move || {
        let policy = state.policy.as_deref().expect("checked above");
        run_rollout(policy, &request.question, state.resources.view(), &config).map(|mut t| {
            t.id = request.id;
            t
        })
    })
    .await;
    match joined {
        Ok(Ok(trajectory)) => json_bytes(&trajectory),
        Ok(Err(err)) => {
            let status = match err {
                RolloutError::Config(_) => StatusCode::BAD_REQUEST,
                _ => StatusCode::BAD_GATEWAY,
            };
            let body = RolloutFailure {
                error: err.to_string(),
                partial: err.partial().cloned(),
            };
            (status, Json(body)).into_response()
        }
        Err(e) => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()).into_response(),
    }
}

async fn healthz(State(state): State<Arc<AppState>>) -> Response {
    json_bytes(&Health {
        status: "ok".into(),
        stats: state.resources.kg.stats(),
        indexed_entities: state.resources.index.len(),
        policy_configured: state.policy.is_some(),
    })
}

async fn guard(State(state): State<Arc<AppState>>, request: Request, next: Next) -> Response {
    if let Some(token) = &state.auth_token {
        let expected = format!("Bearer {token}");
        let given = request
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok());
        if given != Some(expected.as_str()) {
            return ApiError::new(StatusCode::UNAUTHORIZED, "missing or wrong bearer token").into_response();
        }
    }
    let Ok(_permit) = state.limiter.clone().try_acquire_owned() else {
        return ApiError::new(StatusCode::TOO_MANY_REQUESTS, "server is at its concurrency limit").into_response();
    };
    next.run(request).await
}

pub fn router(state: Arc<AppState>, max_body_bytes: usize) -> Router {
    let guarded = Router::new()
        .route("/tool1", post(tool1))
        .route("/tool2", post(tool2))
        .route("/reward", post(reward))
        .route("/rollout", post(rollout))
        .route_layer(middleware::from_fn_with_state(state.clone(), guard));
    Router::new()
        .route("/healthz", get(healthz))
        .merge(guarded)
        .layer(DefaultBodyLimit::max(max_body_bytes))
        .with_state(state)
}

/// A server running on its own runtime thread.
pub struct ServerHandle {
    pub addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<std::io::Result<()>>>,
}

impl ServerHandle {
    /// Stops accepting connections, drains in-flight requests and joins.
    pub fn shutdown(mut self) -> std::io::Result<()> {
        self.stop()
    }

    fn stop(&mut self) -> std::io::Result<()> {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        match self.thread.take() {
            Some(t) => t.join().unwrap_or_else(|_| Err(std::io::Error::other("server thread panicked"))),
            None => Ok(()),
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        let _ = self.stop();
    }
}

/// Binds `bind` and serves on a background thread until the handle is
/// shut down or dropped.
pub fn spawn(state: AppState, bind: &str, max_body_bytes: usize) -> std::io::Result<ServerHandle> {
    let listener = std::net::TcpListener::bind(bind)?;
    listener.set_nonblocking(true)?;
    let addr = listener.local_addr()?;
    let (tx, rx) = oneshot::channel::<()>();
    let app = router(Arc::new(state), max_body_bytes);
    let thread = std::thread::Builder::new()
        .name("sake-server".into())
        .spawn(move || {
            let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
            runtime.block_on(async move {
                let listener = tokio::net::TcpListener::from_std(listener)?;
                axum::serve(listener, app)
                    .with_graceful_shutdown(async {
                        let _ = rx.await;
                    })
                    .await
            })
        })?;
    Ok(ServerHandle {
        addr,
        shutdown: Some(tx),
        thread: Some(thread),
    })
}

/// Serves until Ctrl-C, then drains in-flight requests.
pub fn serve_until_interrupted(state: AppState, bind: &str, max_body_bytes: usize) -> std::io::Result<()> {
    let listener = std::net::TcpListener::bind(bind)?;
    listener.set_nonblocking(true)?;
    tracing::info!(addr = %listener.local_addr()?, "serving");
    let app = router(Arc::new(state), max_body_bytes);
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::from_std(listener)?;
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
    })
}
