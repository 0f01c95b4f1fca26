//! HTTP and WebSocket face of the administrative node.
//!
//! One `Node` sits behind a mutex, so every mutation is serialized through
//! the same writer. Broadcasts fan out to WebSocket sessions over a
//! `tokio::sync::broadcast` hub.

use std::path::PathBuf;
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::Duration;

use archain_core::ca::{Certificate, ChainKind};
use archain_core::clock::SystemClock;
use archain_core::crypto::Digest;
use archain_core::identity::Identity;
use archain_core::ledger::Status;
use archain_core::node::{Envelope, MsgType, Node, NodeConfig, NodeError, Outcome, Session};
use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::{SinkExt, StreamExt};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::broadcast;
use tokio::task::JoinHandle;

use crate::ca_client::{CaClient, CaClientError};
use crate::ApiError;

pub const DEFAULT_POLL_INTERVAL: Duration = Duration::from_secs(30);
pub const DEFAULT_TICK_INTERVAL: Duration = Duration::from_secs(5);

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error(transparent)]
    Node(#[from] NodeError),
    #[error(transparent)]
    Ca(#[from] CaClientError),
    #[error("no CA endpoint is configured")]
    NoCa,
    #[error("certificate file: {0}")]
    Certificate(String),
    #[error("node store: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug)]
pub struct NodeServerConfig {
    pub node: NodeConfig,
    pub ca_url: Option<String>,
    pub ca_token: String,
    /// Trusted CA certificate. Without it the node pins whatever
    /// `root.crt` its replica already holds, or fetches one from the CA.
    pub ca_root: Option<PathBuf>,
    pub poll_interval: Duration,
    pub tick_interval: Duration,
}

impl NodeServerConfig {
    pub fn new(node: NodeConfig) -> Self {
        Self {
            node,
            ca_url: None,
            ca_token: String::new(),
            ca_root: None,
            poll_interval: DEFAULT_POLL_INTERVAL,
            tick_interval: DEFAULT_TICK_INTERVAL,
        }
    }
}

#[derive(Clone)]
pub struct NodeService {
    node: Arc<Mutex<Node>>,
    hub: broadcast::Sender<Envelope>,
    ca: Option<CaClient>,
}

impl NodeService {
    /// Opens the node directory, resolves the CA certificate and runs a
    /// first CA sync when a CA is configured.
    pub async fn open(config: &NodeServerConfig, identity: Identity) -> Result<Self, ServiceError> {
        let ca = config
            .ca_url
            .as_ref()
            .map(|url| CaClient::new(url.clone(), config.ca_token.clone()));
        let pinned = config.node.ca_dir().join("root.crt");
        let root = match (&config.ca_root, &ca) {
            (Some(path), _) => read_certificate(path)?,
            (None, _) if pinned.exists() => read_certificate(&pinned)?,
            (None, Some(client)) => client.root_certificate().await?,
            (None, None) => return Err(ServiceError::NoCa),
        };
        let node = Node::open(config.node.clone(), identity, root, Arc::new(SystemClock))?;
        let service = Self::from_node(node, ca);
        if service.ca.is_some() {
            if let Err(e) = service.sync_ca().await {
                tracing::warn!(error = %e, "initial CA sync failed");
            }
        } else {
            service.genesis_if_needed();
        }
        Ok(service)
    }

    pub fn from_node(node: Node, ca: Option<CaClient>) -> Self {
        let (hub, _) = broadcast::channel(1024);
        Self {
            node: Arc::new(Mutex::new(node)),
            hub,
            ca,
        }
    }

    pub fn lock(&self) -> MutexGuard<'_, Node> {
        self.node.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn subscribe(&self) -> broadcast::Receiver<Envelope> {
        self.hub.subscribe()
    }

    /// Fire and forget: nobody listening is not an error.
    pub fn publish(&self, envelopes: Vec<Envelope>) {
        for env in envelopes {
            let _ = self.hub.send(env);
        }
    }

    async fn with_node<T, F>(&self, f: F) -> T
    where
        T: Send + 'static,
        F: FnOnce(&mut Node) -> T + Send + 'static,
    {
        let node = self.node.clone();
        tokio::task::spawn_blocking(move || f(&mut node.lock().unwrap_or_else(|p| p.into_inner())))
            .await
            .expect("node task panicked")
    }

    /// Routes one request and fans out its broadcasts.
    pub async fn handle(&self, env: Envelope, session: Option<Session>) -> Envelope {
        let Outcome { reply, broadcasts } = self
            .with_node(move |n| n.handle(&env, session.as_ref()))
            .await;
        self.publish(broadcasts);
        reply
    }

    /// Extends both CA replicas to the CA's head.
    pub async fn sync_ca(&self) -> Result<usize, ServiceError> {
        let ca = self.ca.as_ref().ok_or(ServiceError::NoCa)?;
        let mut applied = 0;
        for kind in [ChainKind::All, ChainKind::Revoked] {
            let from = self.lock().registry().chain(kind).len();
            let update = ca.chain(kind, from).await?;
            let (res, envs) = self.with_node(move |n| n.apply_ca_update(&update)).await;
            self.publish(envs);
            applied += res?;
        }
        self.genesis_if_needed();
        Ok(applied)
    }

    fn genesis_if_needed(&self) {
        let mut node = self.lock();
        if !node.chain().is_empty() {
            return;
        }
        match node.ensure_genesis() {
            Ok(Some(_)) => {
                let env = node.chain_rows_envelope(0);
                drop(node);
                self.publish(vec![env]);
            }
            Ok(None) => {}
            Err(e) => tracing::warn!(error = %e, "genesis row not written yet"),
        }
    }

    pub async fn tick(&self) {
        match self.with_node(|n| n.tick()).await {
            Ok(envs) => self.publish(envs),
            Err(e) => tracing::error!(error = %e, "expiry sweep failed"),
        }
    }

    /// CA polling and the examination-deadline sweep.
    pub fn spawn_background(&self, poll: Duration, tick: Duration) -> Vec<JoinHandle<()>> {
        let mut tasks = Vec::new();
        if self.ca.is_some() {
            let s = self.clone();
            tasks.push(tokio::spawn(async move {
                let mut t = tokio::time::interval(poll);
                t.tick().await;
                loop {
                    t.tick().await;
                    if let Err(e) = s.sync_ca().await {
                        tracing::warn!(error = %e, "CA sync failed");
                    }
                }
            }));
        }
        let s = self.clone();
        tasks.push(tokio::spawn(async move {
            let mut t = tokio::time::interval(tick);
            loop {
                t.tick().await;
                s.tick().await;
            }
        }));
        tasks
    }

    pub fn router(&self) -> Router {
        Router::new()
            .route("/status", get(status))
            .route("/chain", get(chain))
            .route("/ledger", get(ledger_file))
            .route("/documents", get(list_documents).post(submit))
            .route("/documents/{id}", get(document))
            .route("/documents/{id}/assign", post(assign))
            .route("/documents/{id}/decision", post(decision))
            .route("/documents/{id}/archive", post(archive))
            .route("/blobs/{digest}", get(blob))
            .route("/alarms", get(alarms))
            .route("/session/challenge", get(challenge))
            .route("/session/hello", post(hello))
            .route("/ca/notify", post(ca_notify))
            .route("/ws", get(ws))
            .with_state(self.clone())
    }
}

fn read_certificate(path: &std::path::Path) -> Result<Certificate, ServiceError> {
    let text = std::fs::read_to_string(path)?;
    Certificate::parse(&text)
        .map_err(|e| ServiceError::Certificate(format!("{}: {e}", path.display())))
}

/// HTTP status for an error code carried in an error envelope.
pub fn http_status(code: &str) -> StatusCode {
    match code {
        "AuthFailed" | "BadSignature" | "InvalidCertificate" | "RevokedCertificate" => {
            StatusCode::UNAUTHORIZED
        }
        "WrongRole"
        | "NotAnExpert"
        | "NotAssignedExpert"
        | "Forbidden"
        | "MissingAppendAuthorization"
        | "AppendKeyMismatch" => StatusCode::FORBIDDEN,
        "UnknownDocument" | "MissingBlob" => StatusCode::NOT_FOUND,
        "WrongStatus" | "DeadlinePassed" | "DuplicateDocument" => StatusCode::CONFLICT,
        "Alarm"
        | "MissingSecretFile"
        | "ChainVerificationFailed"
        | "CorruptBlob"
        | "StoreError"
        | "AppendRejected"
        | "LedgerError"
        | "BadParameters"
        | "CaError" => StatusCode::INTERNAL_SERVER_ERROR,
        _ => StatusCode::BAD_REQUEST,
    }
}

fn envelope_response(reply: Envelope, ok: StatusCode) -> Response {
    let status = reply.error_info().map_or(ok, |e| http_status(&e.code));
    (status, Json(reply)).into_response()
}

#[derive(Debug, Serialize, Deserialize)]
pub struct NodeStatus {
    pub cert_id: u64,
    pub rows: usize,
    pub head_hash: Option<Digest>,
    pub documents: usize,
    pub ca_all_rows: usize,
    pub ca_revoked_rows: usize,
    pub alarms: usize,
}

async fn status(State(s): State<NodeService>) -> Json<NodeStatus> {
    let n = s.lock();
    Json(NodeStatus {
        cert_id: n.identity().cert_id,
        rows: n.chain().len(),
        head_hash: n.chain().head().map(|r| r.row_hash),
        documents: n.documents(None).len(),
        ca_all_rows: n.registry().chain(ChainKind::All).len(),
        ca_revoked_rows: n.registry().chain(ChainKind::Revoked).len(),
        alarms: n.alarms().len(),
    })
}

#[derive(Debug, Deserialize)]
struct FromQuery {
    #[serde(default)]
    from: usize,
}

async fn chain(State(s): State<NodeService>, Query(q): Query<FromQuery>) -> Json<Envelope> {
    Json(s.lock().chain_rows_envelope(q.from))
}

async fn ledger_file(State(s): State<NodeService>) -> Result<Response, ApiError> {
    let path = s.lock().config().ledger_path();
    let text = std::fs::read_to_string(path).unwrap_or_default();
    Ok(([(header::CONTENT_TYPE, "text/tab-separated-values")], text).into_response())
}

#[derive(Debug, Deserialize)]
struct StatusQuery {
    status: Option<String>,
}

async fn list_documents(
    State(s): State<NodeService>,
    Query(q): Query<StatusQuery>,
) -> Result<Response, ApiError> {
    let status = match q.status.as_deref() {
        None | Some("") => None,
        Some(name) => Some(Status::parse(name).ok_or_else(|| {
            ApiError::new(
                StatusCode::BAD_REQUEST,
                "UnknownStatus",
                format!("no status {name:?}"),
            )
        })?),
    };
    let n = s.lock();
    let docs: Vec<_> = n.documents(status).into_iter().cloned().collect();
    Ok(Json(docs).into_response())
}

async fn document(
    State(s): State<NodeService>,
    Path(id): Path<String>,
) -> Result<Response, ApiError> {
    let n = s.lock();
    let doc = n.workflow().document(&id).cloned().ok_or_else(|| {
        ApiError::new(
            StatusCode::NOT_FOUND,
            "UnknownDocument",
            format!("no document {id:?}"),
        )
    })?;
    Ok(Json(doc).into_response())
}

/// Checks that a POSTed envelope matches its route before routing it.
async fn mutate(
    s: NodeService,
    expected: MsgType,
    doc_id: Option<String>,
    env: Envelope,
    ok: StatusCode,
) -> Response {
    let mismatch = if env.msg_type != expected.as_str() {
        Some(format!(
            "this endpoint takes {expected} envelopes, not {}",
            env.msg_type
        ))
    } else {
        doc_id
            .filter(|id| env.body.get("doc_id").and_then(|v| v.as_str()) != Some(id.as_str()))
            .map(|id| format!("envelope does not refer to document {id:?}"))
    };
    if let Some(m) = mismatch {
        let reply = s.lock().error_envelope(&NodeError::Malformed(m));
        return envelope_response(reply, ok);
    }
    envelope_response(s.handle(env, None).await, ok)
}

async fn submit(State(s): State<NodeService>, Json(env): Json<Envelope>) -> Response {
    mutate(s, MsgType::SubmitDocument, None, env, StatusCode::CREATED).await
}

async fn assign(
    State(s): State<NodeService>,
    Path(id): Path<String>,
    Json(env): Json<Envelope>,
) -> Response {
    mutate(s, MsgType::Assign, Some(id), env, StatusCode::OK).await
}

async fn decision(
    State(s): State<NodeService>,
    Path(id): Path<String>,
    Json(env): Json<Envelope>,
) -> Response {
    mutate(s, MsgType::Decide, Some(id), env, StatusCode::OK).await
}

async fn archive(
    State(s): State<NodeService>,
    Path(id): Path<String>,
    Json(env): Json<Envelope>,
) -> Response {
    mutate(s, MsgType::Archive, Some(id), env, StatusCode::OK).await
}

async fn blob(
    State(s): State<NodeService>,
    Path(digest): Path<String>,
) -> Result<Response, ApiError> {
    let d = Digest::from_hex(&digest)
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "Malformed", e.to_string()))?;
    let res = s.lock().blobs().get(&d);
    match res {
        Ok(Some(bytes)) => {
            Ok(([(header::CONTENT_TYPE, "application/octet-stream")], bytes).into_response())
        }
        Ok(None) => Err(ApiError::new(
            StatusCode::NOT_FOUND,
            "MissingBlob",
            format!("blob {d} is not stored"),
        )),
        Err(e) => Err(ApiError::new(
            http_status(e.code()),
            e.code(),
            e.to_string(),
        )),
    }
}

async fn alarms(State(s): State<NodeService>) -> Response {
    Json(s.lock().alarms().to_vec()).into_response()
}

async fn challenge(State(s): State<NodeService>) -> Json<Envelope> {
    Json(s.lock().challenge_envelope())
}

async fn hello(
    State(s): State<NodeService>,
    Json(env): Json<Envelope>,
) -> Result<Json<Session>, ApiError> {
    let res = s.lock().hello(&env);
    res.map(Json)
        .map_err(|e| ApiError::new(http_status(e.code()), e.code(), e.to_string()))
}

/// The CA's push notification only triggers a pull over the authorized
/// channel; its body is not trusted.
async fn ca_notify(State(s): State<NodeService>) -> Result<Json<serde_json::Value>, ApiError> {
    match s.sync_ca().await {
        Ok(n) => Ok(Json(serde_json::json!({ "applied": n }))),
        Err(ServiceError::Node(e)) => Err(ApiError::new(
            http_status(e.code()),
            e.code(),
            e.to_string(),
        )),
        Err(e) => Err(ApiError::new(
            StatusCode::BAD_GATEWAY,
            "CaSyncFailed",
            e.to_string(),
        )),
    }
}

async fn ws(State(s): State<NodeService>, upgrade: WebSocketUpgrade) -> Response {
    upgrade.on_upgrade(move |socket| ws_session(s, socket))
}

async fn send_env<S>(sink: &mut S, env: &Envelope) -> bool
where
    S: futures::Sink<Message> + Unpin,
{
    let text = serde_json::to_string(env).expect("plain data");
    sink.send(Message::Text(text.into())).await.is_ok()
}

/// Challenge, hello, then requests and broadcasts until either side closes.
async fn ws_session(s: NodeService, socket: WebSocket) {
    let (mut sink, mut stream) = socket.split();
    let mut hub = s.subscribe();
    let challenge = s.lock().challenge_envelope();
    if !send_env(&mut sink, &challenge).await {
        return;
    }
    let mut session: Option<Session> = None;
    // Replies that are also broadcast reach the requester once.
    let mut echoes: std::collections::VecDeque<Envelope> = std::collections::VecDeque::new();
    loop {
        tokio::select! {
            incoming = stream.next() => {
                let text = match incoming {
                    Some(Ok(Message::Text(t))) => t,
                    Some(Ok(Message::Close(_))) | None | Some(Err(_)) => break,
                    Some(Ok(_)) => continue,
                };
                let env: Envelope = match serde_json::from_str(text.as_str()) {
                    Ok(env) => env,
                    Err(e) => {
                        let reply = s.lock().error_envelope(&NodeError::Malformed(e.to_string()));
                        if !send_env(&mut sink, &reply).await { break }
                        continue;
                    }
                };
                let reply = match &session {
                    None => {
                        let mut node = s.lock();
                        match node.hello(&env) {
                            Ok(sess) => {
                                let reply = node.envelope(
                                    MsgType::Hello,
                                    serde_json::to_value(&sess).expect("plain data"),
                                );
                                tracing::info!(cert_id = sess.cert_id, role = %sess.role, "participant connected");
                                session = Some(sess);
                                reply
                            }
                            Err(e) => node.error_envelope(&e),
                        }
                    }
                    Some(sess) => {
                        let reply = s.handle(env, Some(sess.clone())).await;
                        if reply.error_info().is_none() {
                            echoes.push_back(reply.clone());
                            if echoes.len() > 64 {
                                echoes.pop_front();
                            }
                        }
                        reply
                    }
                };
                if !send_env(&mut sink, &reply).await { break }
            }
            b = hub.recv(), if session.is_some() => match b {
                Ok(env) => {
                    if let Some(i) = echoes.iter().position(|e| *e == env) {
                        echoes.remove(i);
                        continue;
                    }
                    if !send_env(&mut sink, &env).await { break }
                }
                Err(broadcast::error::RecvError::Lagged(n)) => {
                    tracing::warn!(missed = n, "participant lagging; it must catch up with chain_rows");
                }
                Err(broadcast::error::RecvError::Closed) => break,
            },
        }
    }
}

/// Serves until the listener fails.
pub async fn serve(service: NodeService, listener: tokio::net::TcpListener) -> std::io::Result<()> {
    axum::serve(listener, service.router()).await
}
