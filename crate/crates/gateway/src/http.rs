use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine as _;
use serde::{Deserialize, Serialize};
use serde_json::json;

use same_core::data::{ImageTensor, Shape};

use crate::error::GatewayError;
use crate::service::{unix_millis, Gateway, GatewayResponse};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PredictRequest {
    /// Base64 of little-endian f32 pixels, channel-major.
    pub image: String,
    pub shape: [usize; 3],
}

impl PredictRequest {
    pub fn encode(x: &ImageTensor) -> Self {
        let s = x.shape();
        Self {
            image: base64::engine::general_purpose::STANDARD.encode(x.to_le_bytes()),
            shape: [s.channels, s.height, s.width],
        }
    }

    pub fn decode(&self) -> Result<ImageTensor, GatewayError> {
        let raw = base64::engine::general_purpose::STANDARD
            .decode(&self.image)
            .map_err(|e| GatewayError::Malformed(format!("image is not base64: {e}")))?;
        if raw.len() % 4 != 0 {
            return Err(GatewayError::Malformed(format!("{} bytes is not a whole number of f32 values", raw.len())));
        }
        let pixels = raw.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        let [c, h, w] = self.shape;
        ImageTensor::new(Shape::new(c, h, w), pixels).map_err(|e| GatewayError::Malformed(e.to_string()))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PowRequest {
    pub challenge_id: String,
    /// Hex-encoded nonce bytes.
    pub nonce: String,
}

fn error_response(status: StatusCode, code: &str, message: String) -> Response {
    (status, Json(json!({"status": "error", "code": code, "message": message}))).into_response()
}

impl IntoResponse for GatewayError {
    fn into_response(self) -> Response {
        let (status, code) = match &self {
            GatewayError::Malformed(_) => (StatusCode::BAD_REQUEST, "MALFORMED_REQUEST"),
            GatewayError::Expired(_) => (StatusCode::GONE, "CHALLENGE_EXPIRED"),
            GatewayError::UnknownChallenge(_) => (StatusCode::NOT_FOUND, "CHALLENGE_UNKNOWN"),
            GatewayError::Policy(_) | GatewayError::Core(_) => (StatusCode::INTERNAL_SERVER_ERROR, "INTERNAL"),
        };
        error_response(status, code, self.to_string())
    }
}

fn respond(r: GatewayResponse) -> Response {
    let status = match r {
        GatewayResponse::Rejected { .. } => StatusCode::FORBIDDEN,
        _ => StatusCode::OK,
    };
    (status, Json(r)).into_response()
}

async fn predict(State(gw): State<Arc<Gateway>>, body: axum::body::Bytes) -> Response {
    let req: PredictRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return GatewayError::Malformed(e.to_string()).into_response(),
    };
    let x = match req.decode() {
        Ok(x) => x,
        Err(e) => return e.into_response(),
    };
    let now = unix_millis() / 1000;
    match tokio::task::spawn_blocking(move || gw.handle(&x, now)).await {
        Ok(Ok(r)) => respond(r),
        Ok(Err(e)) => e.into_response(),
        Err(e) => error_response(StatusCode::INTERNAL_SERVER_ERROR, "INTERNAL", e.to_string()),
    }
}

async fn pow(State(gw): State<Arc<Gateway>>, body: axum::body::Bytes) -> Response {
    let req: PowRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return GatewayError::Malformed(e.to_string()).into_response(),
    };
    let nonce = match hex::decode(&req.nonce) {
        Ok(n) => n,
        Err(e) => return GatewayError::Malformed(format!("nonce is not hex: {e}")).into_response(),
    };
    match gw.redeem(&req.challenge_id, &nonce, unix_millis() / 1000) {
        Ok(Some(r)) => respond(r),
        Ok(None) => error_response(StatusCode::FORBIDDEN, "POW_INVALID", "nonce does not solve the challenge".into()),
        Err(e) => e.into_response(),
    }
}

async fn health(State(gw): State<Arc<Gateway>>) -> Response {
    Json(json!({
        "status": "ok",
        "policy": gw.policy().kind,
        "threshold": gw.threshold(),
        "victim": gw.detector().victim.content_hash(),
    }))
    .into_response()
}

pub fn router(gw: Arc<Gateway>) -> Router {
    Router::new()
        .route("/v1/predict", post(predict))
        .route("/v1/pow", post(pow))
        .route("/v1/health", get(health))
        .with_state(gw)
}

/// Binds and serves until the process is stopped.
pub async fn serve(gw: Arc<Gateway>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(%addr, "gateway listening");
    axum::serve(listener, router(gw)).await
}
