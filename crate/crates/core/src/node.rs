//! The administrative node: signed message envelopes, the content-addressed
//! blob store, participant sessions, request routing onto the workflow and
//! the guarded ledger, and the local replica of the CA chains.
//!
//! Transport lives elsewhere. Everything here is synchronous state that a
//! server wraps in one lock, which makes it the single ledger writer.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::RngCore;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::ca::{CaError, CaUpdate, CertRegistry, Certificate, ChainKind, Role, Validity};
use crate::clock::{format_ms, Clock, Millis};
use crate::codec::Encoder;
use crate::crypto::{hash, verify, Digest, SignatureValue};
use crate::guard::{Guard, GuardConfig, GuardError};
use crate::identity::{CertId, Identity};
use crate::ledger::{
    verify_chain_with, Chain, LedgerError, LedgerRow, LedgerStore, Payload, SignatureCache, Status,
    VerificationReport,
};
use crate::workflow::{
    AppendAuthorization, Document, TransitionProof, Verdict, Workflow, WorkflowConfig,
    WorkflowError,
};

pub const NONCE_TTL_MS: Millis = 60_000;
pub const ENVELOPE_MAX_SKEW_MS: Millis = 5 * 60 * 1000;
pub const DEFAULT_CHAIN_TITLE: &str = "ARCHAIN document archive";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MsgType {
    Challenge,
    Hello,
    SubmitDocument,
    Assign,
    Decide,
    Archive,
    StatusUpdate,
    ChainRows,
    CaRows,
    Alarm,
    Error,
}

impl MsgType {
    pub const ALL: [MsgType; 11] = [
        MsgType::Challenge,
        MsgType::Hello,
        MsgType::SubmitDocument,
        MsgType::Assign,
        MsgType::Decide,
        MsgType::Archive,
        MsgType::StatusUpdate,
        MsgType::ChainRows,
        MsgType::CaRows,
        MsgType::Alarm,
        MsgType::Error,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MsgType::Challenge => "challenge",
            MsgType::Hello => "hello",
            MsgType::SubmitDocument => "submit_document",
            MsgType::Assign => "assign",
            MsgType::Decide => "decide",
            MsgType::Archive => "archive",
            MsgType::StatusUpdate => "status_update",
            MsgType::ChainRows => "chain_rows",
            MsgType::CaRows => "ca_rows",
            MsgType::Alarm => "alarm",
            MsgType::Error => "error",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.as_str() == s)
    }
}

impl fmt::Display for MsgType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Compact JSON with object keys in byte order at every depth.
pub fn canonical_json(value: &Value) -> String {
    fn write(v: &Value, out: &mut String) {
        match v {
            Value::Object(map) => {
                let mut entries: Vec<_> = map.iter().collect();
                entries.sort_by(|a, b| a.0.as_bytes().cmp(b.0.as_bytes()));
                out.push('{');
                for (i, (k, v)) in entries.into_iter().enumerate() {
                    if i > 0 {
                        out.push(',');
                    }
                    out.push_str(&Value::String(k.clone()).to_string());
                    out.push(':');
                    write(v, out);
                }
                out.push('}');
            }
            Value::Array(items) => {
                out.push('[');
                for (i, v) in items.iter().enumerate() {
                    if i > 0 {
                        out.push(',');
                    }
                    write(v, out);
                }
                out.push(']');
            }
            other => out.push_str(&other.to_string()),
        }
    }
    let mut out = String::new();
    write(value, &mut out);
    out
}

/// One message on the wire. `msg_type` stays a string so that unknown
/// types reach the router and get an error reply.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub msg_type: String,
    pub sender_cert_id: CertId,
    pub timestamp: Millis,
    pub body: Value,
    pub signature: SignatureValue,
}

impl Envelope {
    pub fn signing_bytes(msg_type: &str, timestamp: Millis, body: &Value) -> Vec<u8> {
        Encoder::new()
            .str(msg_type)
            .u64(timestamp)
            .str(&canonical_json(body))
            .finish()
    }

    pub fn sign(identity: &Identity, msg_type: MsgType, timestamp: Millis, body: Value) -> Self {
        let signature = identity.sign(&Self::signing_bytes(msg_type.as_str(), timestamp, &body));
        Self {
            msg_type: msg_type.as_str().to_string(),
            sender_cert_id: identity.cert_id,
            timestamp,
            body,
            signature,
        }
    }

    pub fn kind(&self) -> Option<MsgType> {
        MsgType::parse(&self.msg_type)
    }

    pub fn verify_with(&self, cert: &Certificate) -> bool {
        verify(
            &cert.public_key,
            &Self::signing_bytes(&self.msg_type, self.timestamp, &self.body),
            &self.signature,
        )
    }

    pub fn body_as<T: DeserializeOwned>(&self) -> Result<T, NodeError> {
        serde_json::from_value(self.body.clone())
            .map_err(|e| NodeError::Malformed(format!("{} body: {e}", self.msg_type)))
    }

    /// The error carried by an `error` envelope.
    pub fn error_info(&self) -> Option<ErrorBody> {
        if self.kind() == Some(MsgType::Error) {
            serde_json::from_value(self.body.clone()).ok()
        } else {
            None
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

#[derive(Debug, Error)]
pub enum NodeError {
    #[error("authentication failed: {0}")]
    AuthFailed(String),
    #[error("certificate {0} is revoked")]
    RevokedCertificate(CertId),
    #[error("envelope signature does not verify")]
    BadSignature,
    #[error("unknown message type {0:?}")]
    UnknownMessageType(String),
    #[error("malformed request: {0}")]
    Malformed(String),
    #[error("forbidden: {0}")]
    Forbidden(String),
    #[error("blob {0} is not stored")]
    MissingBlob(Digest),
    #[error("stored blob {0} does not match its digest")]
    CorruptBlob(Digest),
    #[error(transparent)]
    Workflow(#[from] WorkflowError),
    #[error(transparent)]
    Ca(#[from] CaError),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error(transparent)]
    Guard(#[from] GuardError),
    #[error("node store: {0}")]
    Io(#[from] io::Error),
    #[error("node store: {0}")]
    Json(#[from] serde_json::Error),
}

impl NodeError {
    /// Stable name used in error envelopes and by clients.
    pub fn code(&self) -> &'static str {
        match self {
            NodeError::AuthFailed(_) => "AuthFailed",
            NodeError::RevokedCertificate(_) => "RevokedCertificate",
            NodeError::BadSignature => "BadSignature",
            NodeError::UnknownMessageType(_) => "UnknownMessageType",
            NodeError::Malformed(_) => "Malformed",
            NodeError::Forbidden(_) => "Forbidden",
            NodeError::MissingBlob(_) => "MissingBlob",
            NodeError::CorruptBlob(_) => "CorruptBlob",
            NodeError::Workflow(e) => match e {
                WorkflowError::InvalidCertificate { .. } => "InvalidCertificate",
                WorkflowError::WrongRole { .. } => "WrongRole",
                WorkflowError::EmptyContent => "EmptyContent",
                WorkflowError::InvalidMetadata(_) => "InvalidMetadata",
                WorkflowError::UnknownDocument(_) => "UnknownDocument",
                WorkflowError::DuplicateDocument(_) => "DuplicateDocument",
                WorkflowError::WrongStatus { .. } => "WrongStatus",
                WorkflowError::NotAnExpert(_) => "NotAnExpert",
                WorkflowError::NotAssignedExpert { .. } => "NotAssignedExpert",
                WorkflowError::DeadlinePassed { .. } => "DeadlinePassed",
                WorkflowError::BadSignature => "BadSignature",
                WorkflowError::ClockSkew { .. } => "ClockSkew",
                WorkflowError::MissingAppendAuthorization { .. } => "MissingAppendAuthorization",
                WorkflowError::AppendKeyMismatch(_) => "AppendKeyMismatch",
                WorkflowError::Commit(g) => guard_code(g),
                WorkflowError::Io(_) | WorkflowError::Json(_) => "StoreError",
            },
            NodeError::Ca(CaError::ChainVerificationFailed { .. }) => "ChainVerificationFailed",
            NodeError::Ca(_) => "CaError",
            NodeError::Ledger(_) => "LedgerError",
            NodeError::Guard(g) => guard_code(g),
            NodeError::Io(_) | NodeError::Json(_) => "StoreError",
        }
    }

    /// Integrity failures, as opposed to rejected requests.
    pub fn is_alarm(&self) -> bool {
        is_alarm_code(self.code())
    }

    pub fn to_body(&self) -> ErrorBody {
        ErrorBody {
            code: self.code().to_string(),
            message: self.to_string(),
        }
    }
}

fn guard_code(e: &GuardError) -> &'static str {
    match e {
        GuardError::Alarm(_) => "Alarm",
        GuardError::MissingSecretFile => "MissingSecretFile",
        GuardError::AppendRejected(_) => "AppendRejected",
        GuardError::BadParameters(_) => "BadParameters",
        GuardError::Io(_) => "StoreError",
    }
}

pub fn is_alarm_code(code: &str) -> bool {
    matches!(
        code,
        "Alarm" | "MissingSecretFile" | "ChainVerificationFailed" | "CorruptBlob"
    )
}

/// Content-addressed blob directory: one file per digest, named by its hex.
#[derive(Clone, Debug)]
pub struct BlobStore {
    dir: PathBuf,
}

impl BlobStore {
    pub fn open(dir: impl Into<PathBuf>) -> io::Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self { dir })
    }

    fn path(&self, digest: &Digest) -> PathBuf {
        self.dir.join(digest.to_hex())
    }

    pub fn put(&self, bytes: &[u8]) -> io::Result<Digest> {
        let digest = hash(bytes);
        let path = self.path(&digest);
        if !path.exists() {
            let tmp = self.dir.join(format!(".{}.tmp", digest.to_hex()));
            fs::write(&tmp, bytes)?;
            fs::rename(tmp, path)?;
        }
        Ok(digest)
    }

    /// `Ok(None)` for an absent digest; an error if the stored bytes no
    /// longer hash to their name.
    pub fn get(&self, digest: &Digest) -> Result<Option<Vec<u8>>, NodeError> {
        match fs::read(self.path(digest)) {
            Ok(bytes) if hash(&bytes) == *digest => Ok(Some(bytes)),
            Ok(_) => Err(NodeError::CorruptBlob(*digest)),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    pub fn contains(&self, digest: &Digest) -> bool {
        self.path(digest).exists()
    }
}

/// An authenticated participant connection.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Session {
    pub cert_id: CertId,
    pub holder_id: u64,
    pub role: Role,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HelloBody {
    pub nonce: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubmitBody {
    pub doc_id: String,
    pub metadata: BTreeMap<String, String>,
    /// Hex of the document bytes; may be omitted when the blob is already
    /// stored under `content_digest`.
    #[serde(default)]
    pub content: Option<String>,
    pub content_digest: Digest,
    pub proof: TransitionProof,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssignBody {
    pub doc_id: String,
    pub expert_id: u64,
    #[serde(default)]
    pub window_ms: Option<Millis>,
    pub proof: TransitionProof,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecideBody {
    pub doc_id: String,
    pub verdict: Verdict,
    pub proof: TransitionProof,
    #[serde(default)]
    pub authorization: Option<AppendAuthorization>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchiveBody {
    pub doc_id: String,
    pub proof: TransitionProof,
    #[serde(default)]
    pub authorization: Option<SignatureValue>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainRowsBody {
    pub from: usize,
    #[serde(default)]
    pub rows: Vec<LedgerRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaRowsRequest {
    pub chain: ChainKind,
    pub from: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlarmRecord {
    pub at: Millis,
    pub source: String,
    pub reason: String,
}

/// Reply to the requester plus envelopes for every connected participant.
#[derive(Clone, Debug)]
pub struct Outcome {
    pub reply: Envelope,
    pub broadcasts: Vec<Envelope>,
}

#[derive(Clone, Debug)]
pub struct NodeConfig {
    pub data_dir: PathBuf,
    pub guard: GuardConfig,
    pub guard_dir: Option<PathBuf>,
    pub workflow: WorkflowConfig,
    pub chain_title: String,
}

impl NodeConfig {
    pub fn new(data_dir: impl Into<PathBuf>) -> Self {
        Self {
            data_dir: data_dir.into(),
            guard: GuardConfig::default(),
            guard_dir: None,
            workflow: WorkflowConfig::default(),
            chain_title: DEFAULT_CHAIN_TITLE.into(),
        }
    }

    pub fn ledger_path(&self) -> PathBuf {
        self.data_dir.join("ledger.tsv")
    }

    pub fn guard_dir(&self) -> PathBuf {
        self.guard_dir
            .clone()
            .unwrap_or_else(|| self.data_dir.join("guard"))
    }

    pub fn alarm_log(&self) -> PathBuf {
        self.data_dir.join("alarms.log")
    }

    fn workflow_path(&self) -> PathBuf {
        self.data_dir.join("workflow.json")
    }

    /// The CA chain replica, in the layout `CertRegistry::save_dir` writes.
    pub fn ca_dir(&self) -> PathBuf {
        self.data_dir.join("ca")
    }
}

pub struct Node {
    config: NodeConfig,
    identity: Identity,
    registry: CertRegistry,
    workflow: Workflow,
    store: LedgerStore,
    guard: Guard,
    blobs: BlobStore,
    nonces: HashMap<String, Millis>,
    alarms: Vec<AlarmRecord>,
    cache: SignatureCache,
    clock: Arc<dyn Clock>,
}

impl fmt::Debug for Node {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Node")
            .field("data_dir", &self.config.data_dir)
            .field("cert_id", &self.identity.cert_id)
            .field("rows", &self.store.chain().len())
            .finish()
    }
}

impl Node {
    /// Opens (or creates) a node directory. `root` is the CA certificate the
    /// replica trusts; `identity` is the node's Administrator identity.
    pub fn open(
        config: NodeConfig,
        identity: Identity,
        root: Certificate,
        clock: Arc<dyn Clock>,
    ) -> Result<Self, NodeError> {
        fs::create_dir_all(&config.data_dir)?;
        let registry = if config.ca_dir().join("all.tsv").exists() {
            CertRegistry::load_dir(&config.ca_dir(), Some(root))?
        } else {
            CertRegistry::new(root)
        };
        let guard = Guard::new(
            config.guard_dir(),
            config.alarm_log(),
            config.guard,
            clock.clone(),
        )?;
        let store = LedgerStore::open(config.ledger_path())?;
        let workflow = match Workflow::load(&config.workflow_path())? {
            w if w.documents().next().is_none() => Workflow::new(config.workflow),
            w => w,
        };
        let blobs = BlobStore::open(config.data_dir.join("blobs"))?;
        let alarms = read_alarm_log(&config.alarm_log());
        Ok(Self {
            config,
            identity,
            registry,
            workflow,
            store,
            guard,
            blobs,
            nonces: HashMap::new(),
            alarms,
            cache: SignatureCache::new(),
            clock,
        })
    }

    pub fn config(&self) -> &NodeConfig {
        &self.config
    }

    pub fn identity(&self) -> &Identity {
        &self.identity
    }

    pub fn registry(&self) -> &CertRegistry {
        &self.registry
    }

    pub fn workflow(&self) -> &Workflow {
        &self.workflow
    }

    pub fn chain(&self) -> &Chain {
        self.store.chain()
    }

    pub fn guard(&self) -> &Guard {
        &self.guard
    }

    pub fn blobs(&self) -> &BlobStore {
        &self.blobs
    }

    pub fn alarms(&self) -> &[AlarmRecord] {
        &self.alarms
    }

    pub fn now(&self) -> Millis {
        self.clock.now_ms()
    }

    pub fn documents(&self, status: Option<Status>) -> Vec<&Document> {
        self.workflow
            .documents()
            .filter(|d| status.is_none_or(|s| d.status == s))
            .collect()
    }

    fn raise(&mut self, source: &str, reason: String) -> Envelope {
        let at = self.now();
        let line = format!(
            "{}\t{}\tALARM\texpected=-\tcomputed=-\t{source}: {reason}\n",
            format_ms(at),
            at
        );
        let written = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(self.config.alarm_log())
            .and_then(|mut f| f.write_all(line.as_bytes()));
        if let Err(e) = written {
            tracing::error!(error = %e, "could not write the alarm log");
        }
        tracing::warn!(%source, %reason, "alarm");
        self.record_alarm(AlarmRecord {
            at,
            source: source.to_string(),
            reason,
        })
    }

    fn record_alarm(&mut self, record: AlarmRecord) -> Envelope {
        let env = self.envelope(
            MsgType::Alarm,
            serde_json::to_value(&record).expect("plain data"),
        );
        self.alarms.push(record);
        env
    }

    /// An envelope signed by the node.
    pub fn envelope(&self, msg_type: MsgType, body: Value) -> Envelope {
        Envelope::sign(&self.identity, msg_type, self.now(), body)
    }

    pub fn error_envelope(&self, err: &NodeError) -> Envelope {
        self.envelope(
            MsgType::Error,
            serde_json::to_value(err.to_body()).expect("plain data"),
        )
    }

    fn persist_workflow(&self) -> Result<(), NodeError> {
        self.workflow.save(&self.config.workflow_path())?;
        Ok(())
    }

    fn persist_replica(&self) -> Result<(), NodeError> {
        self.registry.save_dir(&self.config.ca_dir())?;
        Ok(())
    }

    /// Writes the genesis row through the guard if the ledger is empty.
    /// The node certificate must already be in the replica.
    pub fn ensure_genesis(&mut self) -> Result<Option<LedgerRow>, NodeError> {
        if !self.store.chain().is_empty() {
            return Ok(None);
        }
        let now = self.now();
        match self.registry.valid_certificate(self.identity.cert_id, now) {
            Ok(c) if c.holder_category == Role::Administrator => {}
            Ok(c) => {
                return Err(NodeError::Forbidden(format!(
                    "node certificate has role {}, Administrator is required",
                    c.holder_category
                )))
            }
            Err(v) => {
                return Err(NodeError::Forbidden(format!(
                    "node certificate {} is {v}",
                    self.identity.cert_id
                )))
            }
        }
        let (identity, clock, title) = (&self.identity, &self.clock, &self.config.chain_title);
        let out = self.guard.guarded_append(&mut self.store, |chain| {
            chain.prepare_genesis(title, identity, clock.as_ref())
        })?;
        Ok(Some(out.row))
    }

    /// Full offline-style verification of the local ledger.
    pub fn verify_ledger(&self) -> VerificationReport {
        verify_chain_with(self.store.chain().rows(), &self.registry, Some(&self.cache))
    }

    /// Extends the CA replica. A chain that fails verification raises an
    /// alarm and leaves the replica untouched. The envelopes returned are
    /// for every connected participant.
    pub fn apply_ca_update(
        &mut self,
        update: &CaUpdate,
    ) -> (Result<usize, NodeError>, Vec<Envelope>) {
        match self.registry.apply(update) {
            Ok(0) => (Ok(0), Vec::new()),
            Ok(n) => {
                if let Err(e) = self.persist_replica() {
                    return (Err(e), Vec::new());
                }
                let env = self.envelope(
                    MsgType::CaRows,
                    serde_json::to_value(update).expect("plain data"),
                );
                (Ok(n), vec![env])
            }
            Err(e @ CaError::ChainVerificationFailed { .. }) => {
                let alarm = self.raise("ca_sync", e.to_string());
                (Err(e.into()), vec![alarm])
            }
            Err(e) => (Err(e.into()), Vec::new()),
        }
    }

    /// Fresh nonce for a hello handshake.
    pub fn challenge(&mut self) -> String {
        let now = self.now();
        self.nonces.retain(|_, exp| *exp > now);
        let mut buf = [0u8; 32];
        rand::rngs::OsRng.fill_bytes(&mut buf);
        let nonce = hex::encode(buf);
        self.nonces.insert(nonce.clone(), now + NONCE_TTL_MS);
        nonce
    }

    pub fn challenge_envelope(&mut self) -> Envelope {
        let nonce = self.challenge();
        self.envelope(MsgType::Challenge, json!({ "nonce": nonce }))
    }

    fn signer_certificate(&self, env: &Envelope) -> Result<Certificate, NodeError> {
        let now = self.now();
        match self.registry.validity_of(env.sender_cert_id, now) {
            Validity::Valid => {}
            Validity::Revoked => return Err(NodeError::RevokedCertificate(env.sender_cert_id)),
            Validity::Unknown => {
                return Err(NodeError::AuthFailed(format!(
                    "certificate {} is not valid",
                    env.sender_cert_id
                )))
            }
        }
        let cert = self
            .registry
            .certificate(env.sender_cert_id)
            .expect("valid certificates are indexed")
            .clone();
        if !env.verify_with(&cert) {
            return Err(NodeError::BadSignature);
        }
        if env.timestamp.abs_diff(now) > ENVELOPE_MAX_SKEW_MS {
            return Err(NodeError::AuthFailed("envelope timestamp is stale".into()));
        }
        Ok(cert)
    }

    /// Completes a handshake: the hello must sign an outstanding nonce under
    /// a currently valid certificate.
    pub fn hello(&mut self, env: &Envelope) -> Result<Session, NodeError> {
        if env.kind() != Some(MsgType::Hello) {
            return Err(NodeError::AuthFailed("expected hello".into()));
        }
        let body: HelloBody = env.body_as()?;
        let now = self.now();
        match self.nonces.get(&body.nonce) {
            Some(&exp) if exp > now => {}
            _ => return Err(NodeError::AuthFailed("unknown or expired nonce".into())),
        }
        let cert = self.signer_certificate(env)?;
        self.nonces.remove(&body.nonce);
        Ok(Session {
            cert_id: cert.cert_id,
            holder_id: cert.holder_id,
            role: cert.holder_category,
        })
    }

    /// Routes one request. Failures become an error reply; nothing here
    /// closes a connection.
    pub fn handle(&mut self, env: &Envelope, session: Option<&Session>) -> Outcome {
        match self.dispatch(env, session) {
            Ok(out) => out,
            Err(err) => {
                let mut broadcasts = Vec::new();
                if let NodeError::Guard(GuardError::Alarm(a))
                | NodeError::Workflow(WorkflowError::Commit(GuardError::Alarm(a))) = &err
                {
                    let record = AlarmRecord {
                        at: a.at,
                        source: "guard".into(),
                        reason: a.reason.clone(),
                    };
                    broadcasts.push(self.record_alarm(record));
                }
                tracing::debug!(code = err.code(), error = %err, "request refused");
                Outcome {
                    reply: self.error_envelope(&err),
                    broadcasts,
                }
            }
        }
    }

    fn dispatch(
        &mut self,
        env: &Envelope,
        session: Option<&Session>,
    ) -> Result<Outcome, NodeError> {
        let kind = env
            .kind()
            .ok_or_else(|| NodeError::UnknownMessageType(env.msg_type.clone()))?;
        self.signer_certificate(env)?;
        if let Some(s) = session {
            if s.cert_id != env.sender_cert_id {
                return Err(NodeError::AuthFailed(
                    "envelope signer differs from the session".into(),
                ));
            }
        }
        let now = self.now();
        match kind {
            MsgType::SubmitDocument => {
                let body: SubmitBody = env.body_as()?;
                self.require_proof_sender(env, &body.proof)?;
                let content_len = match &body.content {
                    Some(h) => {
                        let bytes = hex::decode(h)
                            .map_err(|e| NodeError::Malformed(format!("content: {e}")))?;
                        if bytes.is_empty() {
                            return Err(WorkflowError::EmptyContent.into());
                        }
                        if hash(&bytes) != body.content_digest {
                            return Err(NodeError::Malformed(
                                "content does not hash to content_digest".into(),
                            ));
                        }
                        self.blobs.put(&bytes)?;
                        bytes.len() as u64
                    }
                    None => self
                        .blobs
                        .get(&body.content_digest)?
                        .ok_or(NodeError::MissingBlob(body.content_digest))?
                        .len() as u64,
                };
                let doc = self
                    .workflow
                    .create_document(
                        &self.registry,
                        now,
                        &body.doc_id,
                        body.content_digest,
                        content_len,
                        body.metadata,
                        &body.proof,
                    )?
                    .clone();
                self.persist_workflow()?;
                Ok(self.status_outcome(&doc, Vec::new()))
            }
            MsgType::Assign => {
                let body: AssignBody = env.body_as()?;
                self.require_proof_sender(env, &body.proof)?;
                let doc = self
                    .workflow
                    .assign_expert(
                        &self.registry,
                        now,
                        &body.doc_id,
                        body.expert_id,
                        body.window_ms,
                        &body.proof,
                    )?
                    .clone();
                self.persist_workflow()?;
                Ok(self.status_outcome(&doc, Vec::new()))
            }
            MsgType::Decide => {
                let body: DecideBody = env.body_as()?;
                self.require_proof_sender(env, &body.proof)?;
                let doc = self
                    .workflow
                    .decide(
                        &self.registry,
                        now,
                        &body.doc_id,
                        body.verdict,
                        &body.proof,
                        body.authorization.as_ref(),
                    )?
                    .clone();
                self.persist_workflow()?;
                Ok(self.status_outcome(&doc, Vec::new()))
            }
            MsgType::Archive => {
                let body: ArchiveBody = env.body_as()?;
                self.require_proof_sender(env, &body.proof)?;
                let (doc, row) = self.archive(&body)?;
                let rows = self.envelope(
                    MsgType::ChainRows,
                    serde_json::to_value(ChainRowsBody {
                        from: row.index as usize,
                        rows: vec![row],
                    })?,
                );
                Ok(self.status_outcome(&doc, vec![rows]))
            }
            MsgType::ChainRows => {
                let body: ChainRowsBody = env.body_as()?;
                Ok(Outcome {
                    reply: self.chain_rows_envelope(body.from),
                    broadcasts: Vec::new(),
                })
            }
            MsgType::CaRows => {
                let body: CaRowsRequest = env.body_as()?;
                let update = self.registry.update_from(body.chain, body.from);
                Ok(Outcome {
                    reply: self.envelope(MsgType::CaRows, serde_json::to_value(update)?),
                    broadcasts: Vec::new(),
                })
            }
            MsgType::Hello
            | MsgType::Challenge
            | MsgType::StatusUpdate
            | MsgType::Alarm
            | MsgType::Error => Err(NodeError::UnknownMessageType(format!(
                "{} is not a request",
                env.msg_type
            ))),
        }
    }

    fn require_proof_sender(
        &self,
        env: &Envelope,
        proof: &TransitionProof,
    ) -> Result<(), NodeError> {
        if proof.signer_cert_id != env.sender_cert_id {
            return Err(NodeError::AuthFailed(
                "transition is signed by a different certificate than the envelope".into(),
            ));
        }
        Ok(())
    }

    fn archive(&mut self, body: &ArchiveBody) -> Result<(Document, LedgerRow), NodeError> {
        let now = self.now();
        let (identity, clock, guard, store) =
            (&self.identity, &self.clock, &self.guard, &mut self.store);
        let (doc, row) = self.workflow.archive(
            &self.registry,
            now,
            &body.doc_id,
            &body.proof,
            body.authorization.as_ref(),
            |tx| {
                guard
                    .guarded_append(store, |chain| {
                        chain.prepare(
                            &Payload::FinalTransaction(tx.clone()),
                            identity,
                            clock.as_ref(),
                        )
                    })
                    .map(|out| out.row)
            },
        )?;
        let doc = doc.clone();
        self.persist_workflow()?;
        Ok((doc, row))
    }

    fn status_outcome(&self, doc: &Document, mut extra: Vec<Envelope>) -> Outcome {
        let update = self.envelope(
            MsgType::StatusUpdate,
            serde_json::to_value(doc).expect("plain data"),
        );
        let mut broadcasts = vec![update.clone()];
        broadcasts.append(&mut extra);
        Outcome {
            reply: update,
            broadcasts,
        }
    }

    pub fn chain_rows_envelope(&self, from: usize) -> Envelope {
        let rows = self.store.chain().rows_from(from).to_vec();
        self.envelope(
            MsgType::ChainRows,
            serde_json::to_value(ChainRowsBody {
                from: from.min(self.store.chain().len()),
                rows,
            })
            .expect("plain data"),
        )
    }

    /// Expires overdue examinations; returns the status updates to send.
    pub fn tick(&mut self) -> Result<Vec<Envelope>, NodeError> {
        let now = self.now();
        let expired = self
            .workflow
            .expire_documents(&self.registry, now, &self.identity)?;
        if expired.is_empty() {
            return Ok(Vec::new());
        }
        self.persist_workflow()?;
        Ok(expired
            .iter()
            .filter_map(|id| self.workflow.document(id))
            .map(|doc| {
                self.envelope(
                    MsgType::StatusUpdate,
                    serde_json::to_value(doc).expect("plain data"),
                )
            })
            .collect())
    }
}

fn read_alarm_log(path: &Path) -> Vec<AlarmRecord> {
    let Ok(text) = fs::read_to_string(path) else {
        return Vec::new();
    };
    text.lines()
        .filter_map(|line| {
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() < 6 || fields[2] != "ALARM" {
                return None;
            }
            let reason = fields[5..].join("\t");
            let (source, reason) = match reason.split_once(": ") {
                Some((s, r)) if !s.contains(' ') => (s.to_string(), r.to_string()),
                _ => ("guard".to_string(), reason),
            };
            Some(AlarmRecord {
                at: fields[1].parse().ok()?,
                source,
                reason,
            })
        })
        .collect()
}

/// A participant's copy of the main chain and the CA chains, kept current
/// from node broadcasts and re-verified on every extension.
pub struct Replica {
    chain: Chain,
    registry: CertRegistry,
    documents: BTreeMap<String, Document>,
    /// Status updates whose signatures did not check out.
    suspicious: Vec<String>,
    cache: SignatureCache,
}

impl fmt::Debug for Replica {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Replica")
            .field("rows", &self.chain.len())
            .field("documents", &self.documents.len())
            .finish()
    }
}

impl Replica {
    pub fn new(root: Certificate) -> Self {
        Self {
            chain: Chain::new(),
            registry: CertRegistry::new(root),
            documents: BTreeMap::new(),
            suspicious: Vec::new(),
            cache: SignatureCache::new(),
        }
    }

    pub fn chain(&self) -> &Chain {
        &self.chain
    }

    pub fn registry(&self) -> &CertRegistry {
        &self.registry
    }

    pub fn document(&self, doc_id: &str) -> Option<&Document> {
        self.documents.get(doc_id)
    }

    pub fn suspicious(&self) -> &[String] {
        &self.suspicious
    }

    /// Rows the node should send next.
    pub fn next_row(&self) -> usize {
        self.chain.len()
    }

    /// Accepts rows starting at `from`. Rows already held must match; the
    /// extended chain must verify from row 0.
    pub fn apply_chain_rows(
        &mut self,
        from: usize,
        rows: &[LedgerRow],
    ) -> Result<usize, NodeError> {
        if from > self.chain.len() {
            return Err(NodeError::Malformed(format!(
                "rows start at {from}, replica holds {}",
                self.chain.len()
            )));
        }
        let held = &self.chain.rows()[from..];
        for (mine, theirs) in held.iter().zip(rows) {
            if mine != theirs {
                return Err(NodeError::Ledger(LedgerError::BrokenLink(format!(
                    "row {} differs from the local replica",
                    mine.index
                ))));
            }
        }
        if rows.len() <= held.len() {
            return Ok(0);
        }
        let mut all = self.chain.rows().to_vec();
        all.extend_from_slice(&rows[held.len()..]);
        let report = verify_chain_with(&all, &self.registry, Some(&self.cache));
        if !report.valid {
            return Err(NodeError::Ledger(LedgerError::BrokenLink(
                report.to_string(),
            )));
        }
        let added = all.len() - self.chain.len();
        self.chain = Chain::from_rows(all);
        Ok(added)
    }

    pub fn apply_ca_update(&mut self, update: &CaUpdate) -> Result<usize, NodeError> {
        Ok(self.registry.apply(update)?)
    }

    /// Records a document snapshot. Transitions that fail verification are
    /// logged and the snapshot is still kept.
    pub fn apply_status_update(&mut self, doc: Document) {
        for t in &doc.transition_log {
            if let Err(e) = t.verify(&self.registry, &doc.content_digest, t.timestamp) {
                let note = format!("{} {}: {e}", doc.doc_id, t.new_status);
                tracing::warn!(%note, "unverifiable status change");
                self.suspicious.push(note);
            }
        }
        self.documents.insert(doc.doc_id.clone(), doc);
    }

    /// Applies any envelope the node broadcasts. Envelopes must be signed by
    /// a certificate valid in this replica.
    pub fn receive(&mut self, env: &Envelope, now: Millis) -> Result<(), NodeError> {
        let cert = match self.registry.valid_certificate(env.sender_cert_id, now) {
            Ok(c) => c,
            Err(Validity::Revoked) => {
                return Err(NodeError::RevokedCertificate(env.sender_cert_id))
            }
            Err(_) => {
                // CA rows may introduce the sender's certificate itself.
                if env.kind() == Some(MsgType::CaRows) {
                    let update: CaUpdate = env.body_as()?;
                    self.apply_ca_update(&update)?;
                    return self.receive_checked(env, now);
                }
                return Err(NodeError::AuthFailed(format!(
                    "certificate {} is not valid",
                    env.sender_cert_id
                )));
            }
        };
        if !env.verify_with(cert) {
            return Err(NodeError::BadSignature);
        }
        match env.kind() {
            Some(MsgType::ChainRows) => {
                let body: ChainRowsBody = env.body_as()?;
                self.apply_chain_rows(body.from, &body.rows)?;
            }
            Some(MsgType::CaRows) => {
                let update: CaUpdate = env.body_as()?;
                self.apply_ca_update(&update)?;
            }
            Some(MsgType::StatusUpdate) => self.apply_status_update(env.body_as()?),
            _ => {}
        }
        Ok(())
    }

    fn receive_checked(&mut self, env: &Envelope, now: Millis) -> Result<(), NodeError> {
        let cert = self
            .registry
            .valid_certificate(env.sender_cert_id, now)
            .map_err(|v| {
                NodeError::AuthFailed(format!("certificate {} is {v}", env.sender_cert_id))
            })?;
        if env.verify_with(cert) {
            Ok(())
        } else {
            Err(NodeError::BadSignature)
        }
    }
}

/// Signed requests as a client builds them. Each carries the transition
/// proof the workflow needs, signed by the same identity as the envelope.
pub mod requests {
    use super::*;
    use crate::workflow::sign_append_authorization;

    pub fn hello(identity: &Identity, now: Millis, nonce: &str) -> Envelope {
        Envelope::sign(identity, MsgType::Hello, now, json!({ "nonce": nonce }))
    }

    /// Uploads `content` inline with the submission.
    pub fn submit(
        identity: &Identity,
        now: Millis,
        doc_id: &str,
        metadata: BTreeMap<String, String>,
        content: &[u8],
    ) -> Envelope {
        let content_digest = hash(content);
        let body = SubmitBody {
            doc_id: doc_id.to_string(),
            metadata,
            content: Some(hex::encode(content)),
            content_digest,
            proof: TransitionProof::sign(identity, doc_id, Status::Created, now, &content_digest),
        };
        Envelope::sign(identity, MsgType::SubmitDocument, now, to_value(&body))
    }

    pub fn assign(
        identity: &Identity,
        now: Millis,
        doc_id: &str,
        content_digest: &Digest,
        expert_id: u64,
        window_ms: Option<Millis>,
    ) -> Envelope {
        let body = AssignBody {
            doc_id: doc_id.to_string(),
            expert_id,
            window_ms,
            proof: TransitionProof::sign(
                identity,
                doc_id,
                Status::OnExamination,
                now,
                content_digest,
            ),
        };
        Envelope::sign(identity, MsgType::Assign, now, to_value(&body))
    }

    /// An approval carries the append authorization when the identity has
    /// a second key.
    pub fn decide(
        identity: &Identity,
        now: Millis,
        doc_id: &str,
        content_digest: &Digest,
        verdict: Verdict,
    ) -> Envelope {
        let authorization = match (verdict, &identity.append_key) {
            (Verdict::Approved, Some(key)) => {
                Some(AppendAuthorization::from_key(key, doc_id, content_digest))
            }
            _ => None,
        };
        let body = DecideBody {
            doc_id: doc_id.to_string(),
            verdict,
            proof: TransitionProof::sign(identity, doc_id, verdict.status(), now, content_digest),
            authorization,
        };
        Envelope::sign(identity, MsgType::Decide, now, to_value(&body))
    }

    pub fn archive(
        identity: &Identity,
        now: Millis,
        doc_id: &str,
        content_digest: &Digest,
        authorization: Option<SignatureValue>,
    ) -> Envelope {
        let body = ArchiveBody {
            doc_id: doc_id.to_string(),
            proof: TransitionProof::sign(identity, doc_id, Status::Added, now, content_digest),
            authorization,
        };
        Envelope::sign(identity, MsgType::Archive, now, to_value(&body))
    }

    /// The expert-side signature an administrator may attach to an archive
    /// request when the approval did not carry one.
    pub fn append_authorization(
        expert: &Identity,
        doc_id: &str,
        content_digest: &Digest,
    ) -> Option<SignatureValue> {
        expert
            .append_key
            .as_ref()
            .map(|k| sign_append_authorization(k, doc_id, content_digest))
    }

    pub fn chain_rows(identity: &Identity, now: Millis, from: usize) -> Envelope {
        let body = ChainRowsBody {
            from,
            rows: Vec::new(),
        };
        Envelope::sign(identity, MsgType::ChainRows, now, to_value(&body))
    }

    pub fn ca_rows(identity: &Identity, now: Millis, chain: ChainKind, from: usize) -> Envelope {
        Envelope::sign(
            identity,
            MsgType::CaRows,
            now,
            to_value(&CaRowsRequest { chain, from }),
        )
    }

    fn to_value<T: Serialize>(body: &T) -> Value {
        serde_json::to_value(body).expect("request bodies are plain data")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_json_sorts_keys_at_every_depth() {
        let v = json!({"b": 1, "a": {"z": [1, {"y": true, "x": null}], "c": "s"}});
        assert_eq!(
            canonical_json(&v),
            r#"{"a":{"c":"s","z":[1,{"x":null,"y":true}]},"b":1}"#
        );
    }

    #[test]
    fn msg_types_roundtrip() {
        for t in MsgType::ALL {
            assert_eq!(MsgType::parse(t.as_str()), Some(t));
            assert_eq!(serde_json::to_value(t).unwrap(), json!(t.as_str()));
        }
        assert_eq!(MsgType::parse("teleport"), None);
    }

    #[test]
    fn blob_store_roundtrip_and_miss() {
        let dir = tempfile::tempdir().unwrap();
        let store = BlobStore::open(dir.path()).unwrap();
        let d = store.put(b"document bytes").unwrap();
        assert_eq!(store.get(&d).unwrap().unwrap(), b"document bytes");
        assert_eq!(store.get(&hash(b"other")).unwrap(), None);
        fs::write(dir.path().join(d.to_hex()), b"swapped").unwrap();
        assert!(matches!(store.get(&d), Err(NodeError::CorruptBlob(_))));
    }

    #[test]
    fn alarm_log_lines_parse() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("alarms.log");
        fs::write(
            &p,
            "2026-01-01T00:00:00.000Z\t5\tALARM\texpected=ab\tcomputed=cd\tledger file does not match\n\
             2026-01-01T00:00:00.000Z\t6\tALARM\texpected=-\tcomputed=-\tca_sync: bad row\n",
        )
        .unwrap();
        let alarms = read_alarm_log(&p);
        assert_eq!(alarms.len(), 2);
        assert_eq!(alarms[0].source, "guard");
        assert_eq!(alarms[1].source, "ca_sync");
        assert_eq!(alarms[1].reason, "bad row");
    }
}
