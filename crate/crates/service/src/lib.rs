//! HTTP front end over a single immutable model bundle.
//!
//! Routes: `GET /health`, `GET /model`, `POST /rank`, `POST /insights`,
//! `POST /opportunities`. Request and response bodies are the JSON forms of
//! the types in [`accel_core::api`].

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use accel_core::api::{ChatSpec, Engine, EngineConfig, InsightsRequest, OpportunitiesRequest, RankRequest};
use accel_core::embedding::ProviderSpec;
use accel_core::indices::ExpressionBasis;
use accel_core::Error;
use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::json;

/// Flags shared by every command that loads a bundle. Each flag can also
/// come from its environment variable; an explicit flag wins.
#[derive(Debug, Clone, clap::Args)]
pub struct EngineArgs {
    /// Trained model bundle.
    #[arg(long, env = "ACCEL_BUNDLE")]
    pub bundle: PathBuf,
    /// Embedding provider: http(s) URL, `file:PATH` or `hash:DIM:SEED`.
    /// Defaults to the provider recorded in the bundle when possible.
    #[arg(long = "provider-url", alias = "provider", env = "ACCEL_PROVIDER_URL")]
    pub provider: Option<String>,
    /// Model name for an HTTP provider; part of every cache key.
    #[arg(long, env = "ACCEL_PROVIDER_ID")]
    pub provider_id: Option<String>,
    /// Chat endpoint for narration: http(s) URL or `script:PATH`.
    #[arg(long = "chat-url", env = "ACCEL_CHAT_URL")]
    pub chat: Option<String>,
    #[arg(long, env = "ACCEL_EMBED_CACHE")]
    pub cache_dir: Option<PathBuf>,
    /// Directory of `<name>.j2` files replacing built-in prompt templates.
    #[arg(long, env = "ACCEL_TEMPLATES")]
    pub templates: Option<PathBuf>,
    #[arg(long, env = "ACCEL_IMPACT_FLOOR")]
    pub impact_floor: Option<f64>,
    /// `max` or `mean` over the current variants.
    #[arg(long, env = "ACCEL_EXPRESSION_BASIS")]
    pub expression_basis: Option<String>,
    /// Default number of attributes to select when a request gives no `k`.
    #[arg(long = "k", env = "ACCEL_K")]
    pub default_k: Option<usize>,
}

impl EngineArgs {
    pub fn config(&self) -> accel_core::Result<EngineConfig> {
        let provider = self
            .provider
            .as_deref()
            .map(|s| s.parse::<ProviderSpec>().map(|p| p.with_id(self.provider_id.clone())))
            .transpose()?;
        let expression_basis = self
            .expression_basis
            .as_deref()
            .map(|s| s.parse::<ExpressionBasis>())
            .transpose()?;
        Ok(EngineConfig {
            bundle: self.bundle.clone(),
            provider,
            cache_dir: self.cache_dir.clone(),
            chat: self.chat.as_deref().map(|s| s.parse::<ChatSpec>()).transpose()?,
            templates_dir: self.templates.clone(),
            impact_floor: self.impact_floor,
            expression_basis,
            default_k: self.default_k,
        })
    }

    pub fn engine(&self) -> accel_core::Result<Engine> {
        self.config()?.build()
    }
}

#[derive(Debug, Clone, clap::Args)]
pub struct ServeArgs {
    #[arg(long, env = "ACCEL_PORT", default_value_t = 8080)]
    pub port: u16,
    #[arg(long, env = "ACCEL_HOST", default_value = "127.0.0.1")]
    pub host: String,
    #[command(flatten)]
    pub engine: EngineArgs,
}

pub fn router(engine: Arc<Engine>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/model", get(model))
        .route("/rank", post(rank))
        .route("/insights", post(insights))
        .route("/opportunities", post(opportunities))
        .with_state(engine)
}

/// Serves until the listener fails or ctrl-c arrives.
pub async fn serve(listener: tokio::net::TcpListener, engine: Arc<Engine>) -> std::io::Result<()> {
    axum::serve(listener, router(engine))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

/// Loads the bundle, binds and blocks. Used by both binaries.
pub fn run(args: &ServeArgs) -> Result<(), RunError> {
    let engine = Arc::new(args.engine.engine().map_err(RunError::Setup)?);
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async {
        let addr: SocketAddr = format!("{}:{}", args.host, args.port)
            .parse()
            .map_err(|e| RunError::Setup(Error::Config(format!("bad listen address: {e}"))))?;
        let listener = tokio::net::TcpListener::bind(addr).await?;
        log::info!(
            "serving bundle {} ({} attributes) on http://{}",
            args.engine.bundle.display(),
            engine.bundle().m(),
            listener.local_addr()?
        );
        serve(listener, engine).await?;
        Ok(())
    })
}

#[derive(Debug)]
pub enum RunError {
    Setup(Error),
    Io(std::io::Error),
}

impl From<std::io::Error> for RunError {
    fn from(e: std::io::Error) -> Self {
        RunError::Io(e)
    }
}

impl std::fmt::Display for RunError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RunError::Setup(e) => write!(f, "{e}"),
            RunError::Io(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for RunError {}

/// 400 with a field-level message, or 500 with an opaque id whose details
/// only go to the log.
#[derive(Debug)]
pub enum ApiError {
    BadRequest { field: Option<String>, message: String },
    Internal { id: String },
}

impl ApiError {
    fn from_core(e: Error) -> Self {
        if e.is_invalid_input() {
            let field = match &e {
                Error::InvalidField { field, .. } => Some(field.clone()),
                _ => None,
            };
            let message = match e {
                Error::InvalidField { message, .. } => message,
                other => other.to_string(),
            };
            return ApiError::BadRequest { field, message };
        }
        Self::internal(&e)
    }

    fn internal(e: &dyn std::fmt::Display) -> Self {
        let id = uuid::Uuid::new_v4().to_string();
        log::error!("request {id} failed: {e}");
        ApiError::Internal { id }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        match self {
            ApiError::BadRequest { field, message } => (
                StatusCode::BAD_REQUEST,
                Json(json!({ "error": "invalid_request", "field": field, "message": message })),
            )
                .into_response(),
            ApiError::Internal { id } => (
                StatusCode::INTERNAL_SERVER_ERROR,
                Json(json!({ "error": "internal", "id": id })),
            )
                .into_response(),
        }
    }
}

fn parse_body<T: DeserializeOwned>(body: &[u8]) -> Result<T, ApiError> {
    let de = &mut serde_json::Deserializer::from_slice(body);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        ApiError::BadRequest {
            field: (path != ".").then_some(path),
            message: e.into_inner().to_string(),
        }
    })
}

/// Runs a blocking engine call off the async workers.
async fn call<Req, Resp>(
    engine: Arc<Engine>,
    body: Bytes,
    f: fn(&Engine, &Req) -> accel_core::Result<Resp>,
) -> Result<Json<Resp>, ApiError>
where
    Req: DeserializeOwned + Send + 'static,
    Resp: Serialize + Send + 'static,
{
    let req: Req = parse_body(&body)?;
    match tokio::task::spawn_blocking(move || f(&engine, &req)).await {
        Ok(Ok(resp)) => Ok(Json(resp)),
        Ok(Err(e)) => Err(ApiError::from_core(e)),
        Err(join) => Err(ApiError::internal(&join)),
    }
}

async fn health(State(engine): State<Arc<Engine>>) -> impl IntoResponse {
    Json(engine.health())
}

async fn model(State(engine): State<Arc<Engine>>) -> impl IntoResponse {
    Json(engine.model_info())
}

async fn rank(State(engine): State<Arc<Engine>>, body: Bytes) -> Result<impl IntoResponse, ApiError> {
    call::<RankRequest, _>(engine, body, Engine::rank).await
}

async fn insights(State(engine): State<Arc<Engine>>, body: Bytes) -> Result<impl IntoResponse, ApiError> {
    call::<InsightsRequest, _>(engine, body, Engine::insights).await
}

async fn opportunities(State(engine): State<Arc<Engine>>, body: Bytes) -> Result<impl IntoResponse, ApiError> {
    call::<OpportunitiesRequest, _>(engine, body, Engine::opportunities).await
}
