//! Document lifecycle: six statuses, role-bound signed status changes kept
//! off-chain, deadline expiry, and assembly of the archival record.
//!
//! The engine is pure state. Callers pass the certificate registry and the
//! current time into every operation, and archival hands the assembled
//! record to a commit closure that performs the guarded ledger append.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ca::{CertRegistry, Certificate, Role, Validity};
use crate::clock::{Millis, HOUR_MS};
use crate::codec::Encoder;
use crate::crypto::{sign, verify, Digest, KeyPair, PublicKey, SignatureValue};
use crate::guard::GuardError;
use crate::identity::{CertId, Identity};
use crate::ledger::{
    transition_message, Endorsement, FinalTransaction, LedgerRow, Status, REQUIRED_METADATA,
};

pub const DEFAULT_EXAMINATION_WINDOW_MS: Millis = 72 * HOUR_MS;
pub const DEFAULT_MAX_SKEW_MS: Millis = 5 * 60 * 1000;

#[derive(Debug, Error)]
pub enum WorkflowError {
    #[error("certificate {cert_id} is {validity}")]
    InvalidCertificate { cert_id: CertId, validity: Validity },
    #[error("{action} needs the {expected} role, certificate {cert_id} is {actual}")]
    WrongRole {
        action: &'static str,
        cert_id: CertId,
        expected: Role,
        actual: Role,
    },
    #[error("document content is empty")]
    EmptyContent,
    #[error("invalid metadata: {0}")]
    InvalidMetadata(String),
    #[error("unknown document {0}")]
    UnknownDocument(String),
    #[error("document {0} already exists")]
    DuplicateDocument(String),
    #[error("cannot {action} document {doc_id} in status {status}")]
    WrongStatus {
        doc_id: String,
        status: Status,
        action: &'static str,
    },
    #[error("user {0} holds no valid Expert certificate")]
    NotAnExpert(u64),
    #[error("document {doc_id} is assigned to another expert")]
    NotAssignedExpert { doc_id: String },
    #[error("the examination deadline for document {doc_id} has passed")]
    DeadlinePassed { doc_id: String },
    #[error("transition signature does not verify")]
    BadSignature,
    #[error("transition timestamp {timestamp} is outside the accepted window (now {now})")]
    ClockSkew { timestamp: Millis, now: Millis },
    #[error("the approving expert has not authorized ledger placement of {doc_id}")]
    MissingAppendAuthorization { doc_id: String },
    #[error("append key differs from the key pinned for user {0}")]
    AppendKeyMismatch(u64),
    #[error(transparent)]
    Commit(#[from] GuardError),
    #[error("workflow store: {0}")]
    Io(#[from] io::Error),
    #[error("workflow store: {0}")]
    Json(#[from] serde_json::Error),
}

/// Which role signs the change into each status.
pub fn signer_role(status: Status) -> Role {
    match status {
        Status::Created => Role::User,
        Status::Approved | Status::Rejected => Role::Expert,
        Status::OnExamination | Status::Expired | Status::Added => Role::Administrator,
    }
}

/// The transitions the lifecycle allows.
pub fn is_allowed(from: Option<Status>, to: Status) -> bool {
    matches!(
        (from, to),
        (None, Status::Created)
            | (Some(Status::Created), Status::OnExamination)
            | (Some(Status::OnExamination), Status::Approved)
            | (Some(Status::OnExamination), Status::Rejected)
            | (Some(Status::OnExamination), Status::Expired)
            | (Some(Status::Approved), Status::Added)
    )
}

/// A signed status change. Broadcast to participants, never chained.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntermediateTransaction {
    pub doc_id: String,
    pub new_status: Status,
    pub timestamp: Millis,
    pub signer_cert_id: CertId,
    pub signature: SignatureValue,
}

impl IntermediateTransaction {
    pub fn message(&self, content_digest: &Digest) -> Vec<u8> {
        transition_message(
            &self.doc_id,
            self.new_status,
            self.timestamp,
            content_digest,
        )
    }

    /// Checks signature and signer role against a registry as of `at`.
    pub fn verify(
        &self,
        registry: &CertRegistry,
        content_digest: &Digest,
        at: Millis,
    ) -> Result<(), WorkflowError> {
        let cert = authorize(
            registry,
            at,
            self.signer_cert_id,
            signer_role(self.new_status),
            "sign",
        )?;
        if verify(
            &cert.public_key,
            &self.message(content_digest),
            &self.signature,
        ) {
            Ok(())
        } else {
            Err(WorkflowError::BadSignature)
        }
    }

    pub fn endorsement(&self) -> Endorsement {
        Endorsement {
            cert_id: self.signer_cert_id,
            signature: self.signature.clone(),
        }
    }
}

/// A caller's signature over the status change it requests.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransitionProof {
    pub signer_cert_id: CertId,
    pub timestamp: Millis,
    pub signature: SignatureValue,
}

impl TransitionProof {
    pub fn sign(
        identity: &Identity,
        doc_id: &str,
        status: Status,
        timestamp: Millis,
        content_digest: &Digest,
    ) -> Self {
        Self {
            signer_cert_id: identity.cert_id,
            timestamp,
            signature: identity.sign(&transition_message(
                doc_id,
                status,
                timestamp,
                content_digest,
            )),
        }
    }
}

/// Bytes an expert signs with their second key to release a document for
/// ledger placement.
pub fn append_authorization_message(doc_id: &str, content_digest: &Digest) -> Vec<u8> {
    Encoder::new()
        .str("archain/append-authorization")
        .str(doc_id)
        .digest(content_digest)
        .finish()
}

pub fn sign_append_authorization(
    append_key: &KeyPair,
    doc_id: &str,
    content_digest: &Digest,
) -> SignatureValue {
    sign(
        append_key.private_key(),
        &append_authorization_message(doc_id, content_digest),
    )
    .expect("key pairs are valid")
}

/// Second-key material an expert attaches to a decision or an archival.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AppendAuthorization {
    /// Pinned for the expert on first use.
    pub public_key: Option<PublicKey>,
    pub signature: Option<SignatureValue>,
}

impl AppendAuthorization {
    pub fn from_key(append_key: &KeyPair, doc_id: &str, content_digest: &Digest) -> Self {
        Self {
            public_key: Some(append_key.public_key().clone()),
            signature: Some(sign_append_authorization(
                append_key,
                doc_id,
                content_digest,
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub content_digest: Digest,
    pub metadata: BTreeMap<String, String>,
    pub status: Status,
    /// User id of the submitting holder.
    pub creator_id: u64,
    pub assigned_expert_id: Option<u64>,
    pub deadline: Option<Millis>,
    pub transition_log: Vec<IntermediateTransaction>,
    pub append_authorization: Option<SignatureValue>,
    /// Main-chain row holding the archival record.
    pub ledger_index: Option<u64>,
}

impl Document {
    pub fn transition(&self, status: Status) -> Option<&IntermediateTransaction> {
        self.transition_log.iter().find(|t| t.new_status == status)
    }

    fn last_timestamp(&self) -> Millis {
        self.transition_log.last().map_or(0, |t| t.timestamp)
    }

    /// Structural invariants; used by tests and on snapshot load.
    pub fn check_invariants(&self) -> Result<(), String> {
        let last = self
            .transition_log
            .last()
            .ok_or_else(|| "empty transition log".to_string())?;
        if last.new_status != self.status {
            return Err(format!(
                "status {} but last transition {}",
                self.status, last.new_status
            ));
        }
        let mut prev: Option<Status> = None;
        let mut prev_ts = 0;
        for t in &self.transition_log {
            if t.doc_id != self.doc_id {
                return Err("transition for another document".into());
            }
            if !is_allowed(prev, t.new_status) {
                return Err(format!("illegal transition {prev:?} -> {}", t.new_status));
            }
            if t.timestamp < prev_ts {
                return Err("transition timestamps go backwards".into());
            }
            prev = Some(t.new_status);
            prev_ts = t.timestamp;
        }
        let examined = self.transition(Status::OnExamination).is_some();
        if examined != self.assigned_expert_id.is_some() || examined != self.deadline.is_some() {
            return Err("assignment fields disagree with the transition log".into());
        }
        if (self.status == Status::Added) != self.ledger_index.is_some() {
            return Err("ledger index disagrees with status".into());
        }
        Ok(())
    }

    /// Transition log as tab-separated lines for audit.
    pub fn audit_text(&self) -> String {
        let mut out = String::new();
        for t in &self.transition_log {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                t.doc_id,
                t.new_status,
                t.timestamp,
                t.signer_cert_id,
                t.signature.to_hex()
            ));
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkflowConfig {
    pub examination_window_ms: Millis,
    /// How far a signed timestamp may lag the engine clock.
    pub max_skew_ms: Millis,
}

impl Default for WorkflowConfig {
    fn default() -> Self {
        Self {
            examination_window_ms: DEFAULT_EXAMINATION_WINDOW_MS,
            max_skew_ms: DEFAULT_MAX_SKEW_MS,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Approved,
    Rejected,
}

impl Verdict {
    pub fn status(self) -> Status {
        match self {
            Verdict::Approved => Status::Approved,
            Verdict::Rejected => Status::Rejected,
        }
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.status().fmt(f)
    }
}

fn authorize<'r>(
    registry: &'r CertRegistry,
    now: Millis,
    cert_id: CertId,
    expected: Role,
    action: &'static str,
) -> Result<&'r Certificate, WorkflowError> {
    let cert = registry
        .valid_certificate(cert_id, now)
        .map_err(|validity| WorkflowError::InvalidCertificate { cert_id, validity })?;
    if cert.holder_category != expected {
        return Err(WorkflowError::WrongRole {
            action,
            cert_id,
            expected,
            actual: cert.holder_category,
        });
    }
    Ok(cert)
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct Workflow {
    config: WorkflowConfig,
    documents: BTreeMap<String, Document>,
    /// Expert second keys by user id.
    append_keys: BTreeMap<u64, PublicKey>,
}

impl Workflow {
    pub fn new(config: WorkflowConfig) -> Self {
        Self {
            config,
            ..Self::default()
        }
    }

    pub fn config(&self) -> WorkflowConfig {
        self.config
    }

    pub fn document(&self, doc_id: &str) -> Option<&Document> {
        self.documents.get(doc_id)
    }

    pub fn documents(&self) -> impl Iterator<Item = &Document> {
        self.documents.values()
    }

    pub fn documents_with_status(&self, status: Status) -> impl Iterator<Item = &Document> {
        self.documents.values().filter(move |d| d.status == status)
    }

    pub fn append_key(&self, user_id: u64) -> Option<&PublicKey> {
        self.append_keys.get(&user_id)
    }

    pub fn load(path: &Path) -> Result<Self, WorkflowError> {
        match fs::read(path) {
            Ok(bytes) => Ok(serde_json::from_slice(&bytes)?),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(Self::default()),
            Err(e) => Err(e.into()),
        }
    }

    /// Writes a snapshot via a temporary file and rename.
    pub fn save(&self, path: &Path) -> Result<(), WorkflowError> {
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, serde_json::to_vec_pretty(self)?)?;
        fs::rename(tmp, path)?;
        Ok(())
    }

    fn doc(&self, doc_id: &str) -> Result<&Document, WorkflowError> {
        self.documents
            .get(doc_id)
            .ok_or_else(|| WorkflowError::UnknownDocument(doc_id.to_string()))
    }

    fn check_time(
        &self,
        doc: Option<&Document>,
        timestamp: Millis,
        now: Millis,
    ) -> Result<(), WorkflowError> {
        let floor = doc.map_or(0, Document::last_timestamp);
        if timestamp > now || timestamp + self.config.max_skew_ms < now || timestamp < floor {
            return Err(WorkflowError::ClockSkew { timestamp, now });
        }
        Ok(())
    }

    /// Verifies a proof for `status` and returns the transition it yields.
    fn accept<'r>(
        &self,
        registry: &'r CertRegistry,
        now: Millis,
        doc_id: &str,
        digest: &Digest,
        status: Status,
        proof: &TransitionProof,
        action: &'static str,
    ) -> Result<(IntermediateTransaction, &'r Certificate), WorkflowError> {
        let cert = authorize(
            registry,
            now,
            proof.signer_cert_id,
            signer_role(status),
            action,
        )?;
        let tx = IntermediateTransaction {
            doc_id: doc_id.to_string(),
            new_status: status,
            timestamp: proof.timestamp,
            signer_cert_id: proof.signer_cert_id,
            signature: proof.signature.clone(),
        };
        if !verify(&cert.public_key, &tx.message(digest), &tx.signature) {
            return Err(WorkflowError::BadSignature);
        }
        Ok((tx, cert))
    }

    fn wrong_status(doc: &Document, action: &'static str) -> WorkflowError {
        WorkflowError::WrongStatus {
            doc_id: doc.doc_id.clone(),
            status: doc.status,
            action,
        }
    }

    /// Registers an uploaded document. `content_digest` is the stored blob's
    /// hash and is recorded into the metadata.
    #[allow(clippy::too_many_arguments)]
    pub fn create_document(
        &mut self,
        registry: &CertRegistry,
        now: Millis,
        doc_id: &str,
        content_digest: Digest,
        content_len: u64,
        mut metadata: BTreeMap<String, String>,
        proof: &TransitionProof,
    ) -> Result<&Document, WorkflowError> {
        if content_len == 0 {
            return Err(WorkflowError::EmptyContent);
        }
        if doc_id.is_empty() || doc_id.chars().any(|c| c.is_control() || c == '/') {
            return Err(WorkflowError::InvalidMetadata("bad document id".into()));
        }
        if self.documents.contains_key(doc_id) {
            return Err(WorkflowError::DuplicateDocument(doc_id.to_string()));
        }
        match metadata.get("content_digest") {
            Some(h) if Digest::from_hex(h).ok() != Some(content_digest) => {
                return Err(WorkflowError::InvalidMetadata(
                    "content_digest does not match the uploaded content".into(),
                ))
            }
            Some(_) => {}
            None => {
                metadata.insert("content_digest".into(), content_digest.to_hex());
            }
        }
        for key in REQUIRED_METADATA {
            if !metadata.contains_key(key) {
                return Err(WorkflowError::InvalidMetadata(format!("missing {key:?}")));
            }
        }
        self.check_time(None, proof.timestamp, now)?;
        let (tx, cert) = self.accept(
            registry,
            now,
            doc_id,
            &content_digest,
            Status::Created,
            proof,
            "submit",
        )?;
        let doc = Document {
            doc_id: doc_id.to_string(),
            content_digest,
            metadata,
            status: Status::Created,
            creator_id: cert.holder_id,
            assigned_expert_id: None,
            deadline: None,
            transition_log: vec![tx],
            append_authorization: None,
            ledger_index: None,
        };
        Ok(self.documents.entry(doc_id.to_string()).or_insert(doc))
    }

    /// Puts a document on examination by an expert (a user id) until
    /// `now + window`.
    pub fn assign_expert(
        &mut self,
        registry: &CertRegistry,
        now: Millis,
        doc_id: &str,
        expert_id: u64,
        window: Option<Millis>,
        proof: &TransitionProof,
    ) -> Result<&Document, WorkflowError> {
        let doc = self.doc(doc_id)?;
        if doc.status != Status::Created {
            return Err(Self::wrong_status(doc, "assign"));
        }
        self.check_time(Some(doc), proof.timestamp, now)?;
        let (tx, _) = self.accept(
            registry,
            now,
            doc_id,
            &doc.content_digest,
            Status::OnExamination,
            proof,
            "assign",
        )?;
        match registry.valid_certificate_for_holder(expert_id, now) {
            Some(c) if c.holder_category == Role::Expert => {}
            _ => {
                // Distinguish an expert whose certificate went bad from a
                // user who was never an expert.
                let had_expert_cert = registry
                    .certificates()
                    .any(|c| c.holder_id == expert_id && c.holder_category == Role::Expert);
                if had_expert_cert {
                    let cert = registry
                        .certificates()
                        .filter(|c| c.holder_id == expert_id)
                        .max_by_key(|c| c.cert_id)
                        .expect("found above");
                    return Err(WorkflowError::InvalidCertificate {
                        cert_id: cert.cert_id,
                        validity: registry.validity_of(cert.cert_id, now),
                    });
                }
                return Err(WorkflowError::NotAnExpert(expert_id));
            }
        }
        let deadline = now + window.unwrap_or(self.config.examination_window_ms);
        let doc = self.documents.get_mut(doc_id).expect("checked");
        doc.transition_log.push(tx);
        doc.status = Status::OnExamination;
        doc.assigned_expert_id = Some(expert_id);
        doc.deadline = Some(deadline);
        Ok(doc)
    }

    /// The assigned expert's verdict, strictly before the deadline. An
    /// approval may carry the expert's second-key authorization.
    pub fn decide(
        &mut self,
        registry: &CertRegistry,
        now: Millis,
        doc_id: &str,
        verdict: Verdict,
        proof: &TransitionProof,
        authorization: Option<&AppendAuthorization>,
    ) -> Result<&Document, WorkflowError> {
        let doc = self.doc(doc_id)?;
        match doc.status {
            Status::OnExamination => {}
            Status::Expired => {
                return Err(WorkflowError::DeadlinePassed {
                    doc_id: doc_id.to_string(),
                })
            }
            _ => return Err(Self::wrong_status(doc, "decide on")),
        }
        let (tx, cert) = self.accept(
            registry,
            now,
            doc_id,
            &doc.content_digest,
            verdict.status(),
            proof,
            "decide on",
        )?;
        let expert_id = cert.holder_id;
        if doc.assigned_expert_id != Some(expert_id) {
            return Err(WorkflowError::NotAssignedExpert {
                doc_id: doc_id.to_string(),
            });
        }
        let deadline = doc.deadline.expect("set on examination");
        if now >= deadline || proof.timestamp >= deadline {
            return Err(WorkflowError::DeadlinePassed {
                doc_id: doc_id.to_string(),
            });
        }
        self.check_time(Some(doc), proof.timestamp, now)?;

        let mut pinned = None;
        let mut auth_sig = None;
        if let (Verdict::Approved, Some(auth)) = (verdict, authorization) {
            let key = match (&auth.public_key, self.append_keys.get(&expert_id)) {
                (Some(offered), Some(known)) if offered != known => {
                    return Err(WorkflowError::AppendKeyMismatch(expert_id))
                }
                (Some(offered), None) => {
                    pinned = Some(offered.clone());
                    Some(offered)
                }
                (_, known) => known,
            };
            if let Some(sig) = &auth.signature {
                let key = key.ok_or(WorkflowError::MissingAppendAuthorization {
                    doc_id: doc_id.to_string(),
                })?;
                if !verify(
                    key,
                    &append_authorization_message(doc_id, &doc.content_digest),
                    sig,
                ) {
                    return Err(WorkflowError::BadSignature);
                }
                auth_sig = Some(sig.clone());
            }
        }
        if let Some(key) = pinned {
            self.append_keys.insert(expert_id, key);
        }
        let doc = self.documents.get_mut(doc_id).expect("checked");
        doc.transition_log.push(tx);
        doc.status = verdict.status();
        if auth_sig.is_some() {
            doc.append_authorization = auth_sig;
        }
        Ok(doc)
    }

    /// Moves every overdue examination to Expired, signed by `admin`.
    pub fn expire_documents(
        &mut self,
        registry: &CertRegistry,
        now: Millis,
        admin: &Identity,
    ) -> Result<Vec<String>, WorkflowError> {
        let overdue: Vec<String> = self
            .documents
            .values()
            .filter(|d| d.status == Status::OnExamination && d.deadline.is_some_and(|t| t <= now))
            .map(|d| d.doc_id.clone())
            .collect();
        if overdue.is_empty() {
            return Ok(overdue);
        }
        authorize(registry, now, admin.cert_id, Role::Administrator, "expire")?;
        for doc_id in &overdue {
            let doc = self.documents.get_mut(doc_id).expect("listed");
            let ts = now.max(doc.last_timestamp());
            let proof =
                TransitionProof::sign(admin, doc_id, Status::Expired, ts, &doc.content_digest);
            doc.transition_log.push(IntermediateTransaction {
                doc_id: doc_id.clone(),
                new_status: Status::Expired,
                timestamp: ts,
                signer_cert_id: proof.signer_cert_id,
                signature: proof.signature,
            });
            doc.status = Status::Expired;
        }
        Ok(overdue)
    }

    /// Assembles the archival record for an approved document, hands it to
    /// `commit` and marks the document Added once the row is written. If
    /// `commit` fails the document keeps its status.
    pub fn archive<F>(
        &mut self,
        registry: &CertRegistry,
        now: Millis,
        doc_id: &str,
        proof: &TransitionProof,
        authorization: Option<&SignatureValue>,
        commit: F,
    ) -> Result<(&Document, LedgerRow), WorkflowError>
    where
        F: FnOnce(&FinalTransaction) -> Result<LedgerRow, GuardError>,
    {
        let doc = self.doc(doc_id)?;
        if doc.status != Status::Approved {
            return Err(Self::wrong_status(doc, "archive"));
        }
        self.check_time(Some(doc), proof.timestamp, now)?;
        let (tx, _) = self.accept(
            registry,
            now,
            doc_id,
            &doc.content_digest,
            Status::Added,
            proof,
            "archive",
        )?;

        let expert_id = doc
            .assigned_expert_id
            .expect("approved documents were assigned");
        let missing = || WorkflowError::MissingAppendAuthorization {
            doc_id: doc_id.to_string(),
        };
        let key = self.append_keys.get(&expert_id).ok_or_else(missing)?;
        let auth = authorization
            .or(doc.append_authorization.as_ref())
            .ok_or_else(missing)?;
        if !verify(
            key,
            &append_authorization_message(doc_id, &doc.content_digest),
            auth,
        ) {
            return Err(missing());
        }

        let created = doc.transition(Status::Created).expect("first transition");
        let approved = doc.transition(Status::Approved).expect("approved");
        let final_tx = FinalTransaction {
            doc_id: doc_id.to_string(),
            tx_timestamp: tx.timestamp,
            doc_created_at: created.timestamp,
            metadata: doc.metadata.clone(),
            creator: created.endorsement(),
            examined_at: approved.timestamp,
            examiner: approved.endorsement(),
            archiver: tx.endorsement(),
        };
        let auth = auth.clone();
        let row = commit(&final_tx)?;
        let doc = self.documents.get_mut(doc_id).expect("checked");
        doc.transition_log.push(tx);
        doc.status = Status::Added;
        doc.ledger_index = Some(row.index);
        doc.append_authorization = Some(auth);
        Ok((doc, row))
    }
}
