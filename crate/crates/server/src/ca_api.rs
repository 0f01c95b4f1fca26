//! HTTP face of the certification authority.

use std::sync::{Arc, Mutex, MutexGuard};
use std::time::Duration;

use archain_core::ca::{
    CaError, CaSubscriber, CaUpdate, CertificateAuthority, ChainKind, Profile, Role, UserSummary,
};
use archain_core::crypto::Digest;
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::mpsc;

use crate::{bearer, ApiError};

#[derive(Clone)]
pub struct CaState {
    ca: Arc<Mutex<CertificateAuthority>>,
    sync_token: Arc<String>,
}

impl CaState {
    /// `sync_token` authorizes administrative nodes to read the chains
    /// without a user session.
    pub fn new(ca: CertificateAuthority, sync_token: impl Into<String>) -> Self {
        Self {
            ca: Arc::new(Mutex::new(ca)),
            sync_token: Arc::new(sync_token.into()),
        }
    }

    pub fn lock(&self) -> MutexGuard<'_, CertificateAuthority> {
        self.ca.lock().unwrap_or_else(|p| p.into_inner())
    }

    /// Pushes every chain update to the given node URLs. Delivery is best
    /// effort; nodes also poll.
    pub fn notify_nodes(&self, urls: Vec<String>) {
        if urls.is_empty() {
            return;
        }
        let (tx, mut rx) = mpsc::unbounded_channel::<CaUpdate>();
        self.lock().subscribe(Arc::new(Forwarder(tx)));
        tokio::spawn(async move {
            let http = reqwest::Client::new();
            while let Some(update) = rx.recv().await {
                for url in &urls {
                    let target = format!("{}/ca/notify", url.trim_end_matches('/'));
                    if let Err(e) = http.post(&target).json(&update).send().await {
                        tracing::warn!(%target, error = %e, "ca notification not delivered");
                    }
                }
            }
        });
    }

    /// Revokes overdue certificates every `period`.
    pub fn spawn_expiry_sweep(&self, period: Duration) -> tokio::task::JoinHandle<()> {
        let state = self.clone();
        tokio::spawn(async move {
            let mut ticker = tokio::time::interval(period);
            loop {
                ticker.tick().await;
                let mut ca = state.lock();
                let now = ca.now();
                match ca.check_expiry(now) {
                    Ok(ids) if !ids.is_empty() => {
                        tracing::info!(?ids, "expired certificates revoked")
                    }
                    Ok(_) => {}
                    Err(e) => tracing::error!(error = %e, "expiry sweep failed"),
                }
            }
        })
    }
}

struct Forwarder(mpsc::UnboundedSender<CaUpdate>);

impl CaSubscriber for Forwarder {
    fn notify(&self, update: &CaUpdate) {
        let _ = self.0.send(update.clone());
    }
}

/// Serves until the listener fails.
pub async fn serve(state: CaState, listener: tokio::net::TcpListener) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}

pub fn router(state: CaState) -> Router {
    Router::new()
        .route("/register", post(register))
        .route("/login", post(login))
        .route("/users", get(list_users))
        .route("/users/{id}/role", post(set_role))
        .route("/keys/claim", post(claim_key))
        .route("/renew", post(renew))
        .route("/certificates/{hash}/validity", get(validity))
        .route("/certificates/{id}/download", get(download))
        .route("/ca/certificate", get(root_certificate))
        .route("/chains/{kind}", get(chain))
        .with_state(state)
}

impl From<CaError> for ApiError {
    fn from(e: CaError) -> Self {
        let status = match &e {
            CaError::DuplicateUsername(_) | CaError::UnconfirmedHolder => StatusCode::CONFLICT,
            CaError::WeakPassword
            | CaError::InvalidProfile(_)
            | CaError::MalformedCertificate(_) => StatusCode::BAD_REQUEST,
            CaError::BadCredentials | CaError::Unauthorized => StatusCode::UNAUTHORIZED,
            CaError::Forbidden(_) => StatusCode::FORBIDDEN,
            CaError::UnknownUser(_) | CaError::UnknownCertificate(_) | CaError::NoPendingKey => {
                StatusCode::NOT_FOUND
            }
            CaError::ChainVerificationFailed { .. }
            | CaError::Ledger(_)
            | CaError::Identity(_)
            | CaError::Io(_)
            | CaError::Json(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError::new(status, e.code(), e.to_string())
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RegisterRequest {
    pub username: String,
    pub password: String,
    #[serde(default)]
    pub profile: Profile,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct LoginRequest {
    pub username: String,
    pub password: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct LoginResponse {
    pub token: String,
    pub user_id: u64,
    pub role: Role,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RoleRequest {
    pub role: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RoleResponse {
    pub user_id: u64,
    pub role: Role,
    /// Text of the certificate issued for the new role, if any.
    pub certificate: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ValidityResponse {
    pub cert_hash: Digest,
    pub validity: archain_core::ca::Validity,
}

#[derive(Debug, Deserialize)]
struct FromQuery {
    #[serde(default)]
    from: usize,
}

async fn register(
    State(s): State<CaState>,
    Json(req): Json<RegisterRequest>,
) -> Result<(StatusCode, Json<UserSummary>), ApiError> {
    let mut ca = s.lock();
    let acc = ca.register_user(&req.username, &req.password, req.profile)?;
    Ok((StatusCode::CREATED, Json(UserSummary::from(&acc))))
}

async fn login(
    State(s): State<CaState>,
    Json(req): Json<LoginRequest>,
) -> Result<Json<LoginResponse>, ApiError> {
    let mut ca = s.lock();
    let token = ca.login(&req.username, &req.password)?;
    let acc = ca.session_user(&token)?;
    Ok(Json(LoginResponse {
        user_id: acc.user_id,
        role: acc.role,
        token,
    }))
}

async fn list_users(
    State(s): State<CaState>,
    headers: HeaderMap,
) -> Result<Json<Vec<UserSummary>>, ApiError> {
    let token = bearer(&headers)?;
    Ok(Json(s.lock().list_users(&token)?))
}

async fn set_role(
    State(s): State<CaState>,
    headers: HeaderMap,
    Path(id): Path<u64>,
    Json(req): Json<RoleRequest>,
) -> Result<Json<RoleResponse>, ApiError> {
    let token = bearer(&headers)?;
    let role = Role::parse(&req.role).ok_or_else(|| {
        ApiError::new(
            StatusCode::BAD_REQUEST,
            "UnknownRole",
            format!("unknown role {:?}", req.role),
        )
    })?;
    let cert = s.lock().assign_role(&token, id, role)?;
    Ok(Json(RoleResponse {
        user_id: id,
        role,
        certificate: cert.map(|c| c.to_text()),
    }))
}

async fn claim_key(State(s): State<CaState>, headers: HeaderMap) -> Result<Response, ApiError> {
    let token = bearer(&headers)?;
    let claimed = s.lock().claim_key(&token)?;
    Ok(Json(claimed).into_response())
}

async fn renew(State(s): State<CaState>, headers: HeaderMap) -> Result<Response, ApiError> {
    let token = bearer(&headers)?;
    let cert = s.lock().renew(&token)?;
    Ok(Json(json!({ "certificate": cert.to_text() })).into_response())
}

async fn validity(
    State(s): State<CaState>,
    Path(h): Path<String>,
) -> Result<Json<ValidityResponse>, ApiError> {
    let cert_hash = Digest::from_hex(&h)
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "Malformed", e.to_string()))?;
    let validity = s.lock().check_validity_and_expire(&cert_hash)?;
    Ok(Json(ValidityResponse {
        cert_hash,
        validity,
    }))
}

fn text(body: String) -> Response {
    ([(header::CONTENT_TYPE, "text/plain; charset=utf-8")], body).into_response()
}

async fn download(State(s): State<CaState>, Path(id): Path<u64>) -> Result<Response, ApiError> {
    let body = s
        .lock()
        .certificate_text(id)
        .ok_or_else(|| ApiError::from(CaError::UnknownCertificate(id.to_string())))?;
    Ok(text(body))
}

async fn root_certificate(State(s): State<CaState>) -> Response {
    text(s.lock().root_certificate().to_text())
}

async fn chain(
    State(s): State<CaState>,
    headers: HeaderMap,
    Path(kind): Path<String>,
    Query(q): Query<FromQuery>,
) -> Result<Json<CaUpdate>, ApiError> {
    let token = bearer(&headers)?;
    let kind = ChainKind::parse(&kind).ok_or_else(|| {
        ApiError::new(
            StatusCode::NOT_FOUND,
            "UnknownChain",
            format!("no chain {kind:?}"),
        )
    })?;
    let ca = s.lock();
    if token != *s.sync_token && ca.session_user(&token).is_err() {
        return Err(CaError::Unauthorized.into());
    }
    Ok(Json(ca.chain_update(kind, q.from)))
}
