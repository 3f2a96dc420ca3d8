//! HTTP/JSON scoring service around any [`SimilarityOracle`], and a client
//! that implements the same trait against a remote endpoint.
//!
//! Endpoints (protocol version 1):
//!
//! - `POST /v1/score`: [`ScoreRequest`] → [`ScoreResponse`]
//! - `GET /v1/health`: [`HealthResponse`]
//!
//! Images travel as base64-encoded binary PGM/PPM, i.e. quantized to 8 bits.
//! Errors carry an [`ErrorBody`] with a machine-readable `code`:
//!
//! | status | code                  |
//! |--------|-----------------------|
//! | 400    | `bad_request`, `empty_batch`, `decode_error`, `geometry_mismatch`, `unsupported_protocol` |
//! | 404    | `unknown_identity`    |
//! | 429    | `budget_exhausted` (with `used`, `limit`) |
//! | 500    | `internal`            |
//!
//! The client does not retry. A batch the caller resends is scored and
//! billed again, as a real service would.

use std::net::{SocketAddr, TcpListener as StdListener, ToSocketAddrs};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::oneshot;

use crate::image::{Geometry, Image};
use crate::oracle::{OracleError, SimilarityOracle};

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum WireError {
    #[error("cannot bind {addr}: {source}")]
    Bind {
        addr: String,
        source: std::io::Error,
    },
    #[error("server runtime: {0}")]
    Runtime(std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRequest {
    pub id: String,
    /// Base64 of binary PGM (gray) or PPM (RGB) files.
    pub images: Vec<String>,
    pub protocol_version: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreResponse {
    pub scores: Vec<f64>,
    pub queries_used: u64,
    pub budget_remaining: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HealthResponse {
    pub protocol_version: u32,
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub queries_used: u64,
    pub budget_limit: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub used: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub limit: Option<u64>,
}

pub fn encode_image(image: &Image) -> String {
    BASE64.encode(image.to_pnm_bytes())
}

pub fn decode_image(payload: &str) -> Result<Image, String> {
    let bytes = BASE64
        .decode(payload)
        .map_err(|e| format!("invalid base64: {e}"))?;
    Image::from_pnm_bytes(&bytes).map_err(|e| e.to_string())
}

impl ScoreRequest {
    pub fn new(id: &str, images: &[Image]) -> Self {
        Self {
            id: id.to_string(),
            images: images.iter().map(encode_image).collect(),
            protocol_version: PROTOCOL_VERSION,
        }
    }
}

struct ApiError {
    status: StatusCode,
    body: ErrorBody,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self {
            status,
            body: ErrorBody {
                code: code.to_string(),
                message: message.into(),
                used: None,
                limit: None,
            },
        }
    }
}

impl From<OracleError> for ApiError {
    fn from(e: OracleError) -> Self {
        match e {
            OracleError::UnknownIdentity(_) => {
                ApiError::new(StatusCode::NOT_FOUND, "unknown_identity", e.to_string())
            }
            OracleError::BudgetExhausted { used, limit, .. } => {
                let mut err = ApiError::new(StatusCode::TOO_MANY_REQUESTS, "budget_exhausted", e.to_string());
                err.body.used = Some(used);
                err.body.limit = Some(limit);
                err
            }
            OracleError::Geometry { .. } => {
                ApiError::new(StatusCode::BAD_REQUEST, "geometry_mismatch", e.to_string())
            }
            other => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", other.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

type SharedOracle = Arc<dyn SimilarityOracle>;

async fn health(State(oracle): State<SharedOracle>) -> Json<HealthResponse> {
    let g = oracle.geometry();
    Json(HealthResponse {
        protocol_version: PROTOCOL_VERSION,
        width: g.width,
        height: g.height,
        channels: g.channels,
        queries_used: oracle.queries_used(),
        budget_limit: oracle.budget(),
    })
}

async fn score(State(oracle): State<SharedOracle>, body: Bytes) -> Result<Json<ScoreResponse>, ApiError> {
    let req: ScoreRequest = serde_json::from_slice(&body)
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "bad_request", e.to_string()))?;
    if req.protocol_version != PROTOCOL_VERSION {
        return Err(ApiError::new(
            StatusCode::BAD_REQUEST,
            "unsupported_protocol",
            format!("protocol_version {} (server speaks {PROTOCOL_VERSION})", req.protocol_version),
        ));
    }
    if req.images.is_empty() {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, "empty_batch", "no images in request"));
    }
    let expected = oracle.geometry();
    // decode everything before scoring anything
    let mut images = Vec::with_capacity(req.images.len());
    for (i, payload) in req.images.iter().enumerate() {
        let img = decode_image(payload).map_err(|e| {
            ApiError::new(StatusCode::BAD_REQUEST, "decode_error", format!("image {i}: {e}"))
        })?;
        if img.geometry() != expected {
            return Err(ApiError::new(
                StatusCode::BAD_REQUEST,
                "geometry_mismatch",
                format!("image {i} is {}, server expects {expected}", img.geometry()),
            ));
        }
        images.push(img);
    }
    let id = req.id;
    let scored = tokio::task::spawn_blocking(move || {
        let scores = oracle.score_batch(&images, &id)?;
        Ok::<_, OracleError>(ScoreResponse {
            scores,
            queries_used: oracle.queries_used(),
            budget_remaining: oracle.remaining(),
        })
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))??;
    Ok(Json(scored))
}

pub fn router(oracle: SharedOracle) -> Router {
    Router::new()
        .route("/v1/health", get(health))
        .route("/v1/score", post(score))
        .with_state(oracle)
}

/// A scoring service running on a background thread.
pub struct ServerHandle {
    addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<Result<(), WireError>>>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Blocks until the server stops.
    pub fn wait(mut self) -> Result<(), WireError> {
        match self.thread.take() {
            Some(t) => t.join().unwrap_or(Ok(())),
            None => Ok(()),
        }
    }

    pub fn shutdown(mut self) -> Result<(), WireError> {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        self.wait()
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

/// Binds `bind_address` and serves `oracle` until the handle is shut down
/// or dropped. Use port 0 to pick a free port.
pub fn serve(oracle: SharedOracle, bind_address: &str) -> Result<ServerHandle, WireError> {
    let bind_err = |source| WireError::Bind {
        addr: bind_address.to_string(),
        source,
    };
    let listener = StdListener::bind(bind_address).map_err(bind_err)?;
    listener.set_nonblocking(true).map_err(bind_err)?;
    let addr = listener.local_addr().map_err(bind_err)?;
    let (tx, rx) = oneshot::channel::<()>();
    let app = router(oracle);
    let thread = std::thread::Builder::new()
        .name("facet-oracle-server".into())
        .spawn(move || {
            let rt = tokio::runtime::Builder::new_multi_thread()
                .worker_threads(4)
                .enable_all()
                .build()
                .map_err(WireError::Runtime)?;
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::from_std(listener).map_err(WireError::Runtime)?;
                axum::serve(listener, app)
                    .with_graceful_shutdown(async {
                        let _ = rx.await;
                    })
                    .await
                    .map_err(WireError::Runtime)
            })
        })
        .map_err(WireError::Runtime)?;
    tracing::info!(%addr, "oracle server listening");
    Ok(ServerHandle {
        addr,
        shutdown: Some(tx),
        thread: Some(thread),
    })
}

/// [`SimilarityOracle`] backed by a remote scoring service.
///
/// `queries_used` mirrors the server's count as of the last response.
#[derive(Debug)]
pub struct RemoteOracle {
    base: String,
    client: reqwest::blocking::Client,
    geometry: Geometry,
    budget: Option<u64>,
    used: AtomicU64,
}

fn transport(e: reqwest::Error) -> OracleError {
    OracleError::Transport(e.to_string())
}

/// Connects to `endpoint` (e.g. `http://127.0.0.1:8080`) and reads the
/// served geometry from the health check.
pub fn connect(endpoint: &str) -> Result<RemoteOracle, OracleError> {
    let base = endpoint.trim_end_matches('/').to_string();
    if let Some(hostport) = base.strip_prefix("http://") {
        // fail fast on unresolvable hosts instead of inside reqwest
        hostport
            .to_socket_addrs()
            .map_err(|e| OracleError::Transport(format!("{endpoint}: {e}")))?;
    }
    let client = reqwest::blocking::Client::builder()
        .timeout(Duration::from_secs(60))
        .build()
        .map_err(transport)?;
    let resp = client
        .get(format!("{base}/v1/health"))
        .send()
        .map_err(transport)?;
    if !resp.status().is_success() {
        return Err(OracleError::Transport(format!(
            "health check returned {}",
            resp.status()
        )));
    }
    let health: HealthResponse = resp.json().map_err(transport)?;
    if health.protocol_version != PROTOCOL_VERSION {
        return Err(OracleError::Transport(format!(
            "server speaks protocol {}, client {PROTOCOL_VERSION}",
            health.protocol_version
        )));
    }
    let geometry = Geometry::new(health.width, health.height, health.channels)
        .map_err(|e| OracleError::Transport(format!("bad geometry in health check: {e}")))?;
    Ok(RemoteOracle {
        base,
        client,
        geometry,
        budget: health.budget_limit,
        used: AtomicU64::new(health.queries_used),
    })
}

impl RemoteOracle {
    pub fn endpoint(&self) -> &str {
        &self.base
    }
}

impl SimilarityOracle for RemoteOracle {
    fn geometry(&self) -> Geometry {
        self.geometry
    }

    fn enroll(&self, _id: &str, _image: &Image) -> Result<(), OracleError> {
        Err(OracleError::Unsupported(
            "enrollment is server-side; the wire protocol only scores".into(),
        ))
    }

    fn score_batch(&self, images: &[Image], id: &str) -> Result<Vec<f64>, OracleError> {
        for img in images {
            if img.geometry() != self.geometry {
                return Err(OracleError::Geometry {
                    expected: self.geometry,
                    actual: img.geometry(),
                });
            }
        }
        let resp = self
            .client
            .post(format!("{}/v1/score", self.base))
            .json(&ScoreRequest::new(id, images))
            .send()
            .map_err(transport)?;
        let status = resp.status();
        if status.is_success() {
            let body: ScoreResponse = resp.json().map_err(transport)?;
            if body.scores.len() != images.len() {
                return Err(OracleError::Transport(format!(
                    "server returned {} scores for {} images",
                    body.scores.len(),
                    images.len()
                )));
            }
            self.used.store(body.queries_used, Ordering::SeqCst);
            return Ok(body.scores);
        }
        let err: ErrorBody = resp.json().unwrap_or_else(|e| ErrorBody {
            code: "unknown".into(),
            message: e.to_string(),
            used: None,
            limit: None,
        });
        Err(match (status.as_u16(), err.code.as_str()) {
            (404, "unknown_identity") => OracleError::UnknownIdentity(id.to_string()),
            (429, _) => OracleError::BudgetExhausted {
                used: err.used.unwrap_or_default(),
                limit: err.limit.unwrap_or_default(),
                attempted: images.len() as u64,
            },
            _ => OracleError::Remote {
                status: status.as_u16(),
                code: err.code,
                message: err.message,
            },
        })
    }

    fn queries_used(&self) -> u64 {
        self.used.load(Ordering::SeqCst)
    }

    fn budget(&self) -> Option<u64> {
        self.budget
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn payload_round_trip_is_quantized() {
        let g = Geometry::rgb(3, 2);
        let img = Image::from_fn(g, |r, c, ch| (r * 7 + c * 3 + ch) as f64 / 17.0);
        assert_eq!(decode_image(&encode_image(&img)).unwrap(), img.quantize());
    }

    #[test]
    fn decode_rejects_garbage() {
        assert!(decode_image("***").unwrap_err().contains("base64"));
        let p7 = BASE64.encode(b"P7\n1 1\n255\n\0");
        assert!(decode_image(&p7).unwrap_err().contains("magic"));
    }

    #[test]
    fn request_json_shape() {
        let req = ScoreRequest::new("bob", &[Image::zeros(Geometry::gray(1, 1))]);
        let v: serde_json::Value = serde_json::to_value(&req).unwrap();
        assert_eq!(v["id"], "bob");
        assert_eq!(v["protocol_version"], 1);
        assert_eq!(v["images"].as_array().unwrap().len(), 1);
    }
}
