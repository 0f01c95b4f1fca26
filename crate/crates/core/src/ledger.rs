//! The main hash chain: timestamped, signed rows linked by digests, the
//! archival record they carry, chain verification, and the line-oriented
//! ledger file.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::{Clock, Millis};
use crate::codec::{DecodeError, Decoder, Encoder};
use crate::crypto::{hash, verify, Digest, PublicKey, SignatureValue, DIGEST_LEN, ZERO_DIGEST};
use crate::identity::{CertId, Identity};

/// Metadata keys every archived document must carry.
pub const REQUIRED_METADATA: [&str; 4] = ["title", "author", "organization", "content_digest"];

#[derive(Debug, Error)]
pub enum LedgerError {
    #[error("chain already has a genesis row")]
    ChainAlreadyInitialized,
    #[error("chain has no genesis row")]
    UninitializedChain,
    #[error("clock went backwards: previous row at {previous}, now {now}")]
    NonMonotonicClock { previous: Millis, now: Millis },
    #[error("invalid transaction: {0}")]
    InvalidTransaction(String),
    #[error("payload of {0} bytes exceeds the 4 GiB field limit")]
    OversizePayload(usize),
    #[error("chain is empty")]
    EmptyChain,
    #[error("row does not extend the chain: {0}")]
    BrokenLink(String),
    #[error("ledger file line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("ledger file: {0}")]
    Io(#[from] io::Error),
}

/// Document lifecycle status. The byte codes are part of the signed
/// transition encoding and must never change.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Status {
    Created,
    OnExamination,
    Approved,
    Rejected,
    Expired,
    Added,
}

impl Status {
    pub const ALL: [Status; 6] = [
        Status::Created,
        Status::OnExamination,
        Status::Approved,
        Status::Rejected,
        Status::Expired,
        Status::Added,
    ];

    pub fn code(self) -> u8 {
        match self {
            Status::Created => 1,
            Status::OnExamination => 2,
            Status::Approved => 3,
            Status::Rejected => 4,
            Status::Expired => 5,
            Status::Added => 6,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.code() == code)
    }

    pub fn name(self) -> &'static str {
        match self {
            Status::Created => "Created",
            Status::OnExamination => "OnExamination",
            Status::Approved => "Approved",
            Status::Rejected => "Rejected",
            Status::Expired => "Expired",
            Status::Added => "Added",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL
            .into_iter()
            .find(|st| st.name().eq_ignore_ascii_case(s))
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, Status::Rejected | Status::Expired | Status::Added)
    }
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Bytes signed for a status change: `doc_id ‖ status ‖ timestamp ‖ content digest`.
pub fn transition_message(
    doc_id: &str,
    status: Status,
    timestamp: Millis,
    content_digest: &Digest,
) -> Vec<u8> {
    Encoder::new()
        .str(doc_id)
        .u8(status.code())
        .u64(timestamp)
        .digest(content_digest)
        .finish()
}

/// A signature together with the certificate that made it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Endorsement {
    pub cert_id: CertId,
    pub signature: SignatureValue,
}

/// The archival record committed when a document is added to the archive.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FinalTransaction {
    pub doc_id: String,
    pub tx_timestamp: Millis,
    pub doc_created_at: Millis,
    pub metadata: BTreeMap<String, String>,
    pub creator: Endorsement,
    pub examined_at: Millis,
    pub examiner: Endorsement,
    pub archiver: Endorsement,
}

impl FinalTransaction {
    pub fn content_digest(&self) -> Option<Digest> {
        self.metadata
            .get("content_digest")
            .and_then(|h| Digest::from_hex(h).ok())
    }

    /// Field-level checks that need no keys.
    pub fn validate(&self) -> Result<(), String> {
        if self.doc_id.is_empty() {
            return Err("empty doc_id".into());
        }
        if !(self.doc_created_at <= self.examined_at && self.examined_at <= self.tx_timestamp) {
            return Err(format!(
                "timestamps out of order: created {} examined {} archived {}",
                self.doc_created_at, self.examined_at, self.tx_timestamp
            ));
        }
        for key in REQUIRED_METADATA {
            if !self.metadata.contains_key(key) {
                return Err(format!("missing metadata key {key:?}"));
            }
        }
        if self.content_digest().is_none() {
            return Err("content_digest is not a 64-byte hex digest".into());
        }
        Ok(())
    }

    /// The three (endorsement, signed message) pairs.
    pub fn endorsed_messages(&self) -> Option<[(&Endorsement, Vec<u8>); 3]> {
        let digest = self.content_digest()?;
        Some([
            (
                &self.creator,
                transition_message(&self.doc_id, Status::Created, self.doc_created_at, &digest),
            ),
            (
                &self.examiner,
                transition_message(&self.doc_id, Status::Approved, self.examined_at, &digest),
            ),
            (
                &self.archiver,
                transition_message(&self.doc_id, Status::Added, self.tx_timestamp, &digest),
            ),
        ])
    }

    fn encode_into(&self, e: &mut Encoder) {
        e.str(&self.doc_id)
            .u64(self.tx_timestamp)
            .u64(self.doc_created_at)
            .u32(self.metadata.len() as u32);
        for (k, v) in &self.metadata {
            e.str(k).str(v);
        }
        for (endorsement, ts) in [
            (&self.creator, None),
            (&self.examiner, Some(self.examined_at)),
            (&self.archiver, None),
        ] {
            if let Some(ts) = ts {
                e.u64(ts);
            }
            e.u64(endorsement.cert_id).signature(&endorsement.signature);
        }
    }

    fn decode_from(d: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        let doc_id = d.string()?;
        let tx_timestamp = d.u64()?;
        let doc_created_at = d.u64()?;
        let count = d.u32()?;
        let mut metadata = BTreeMap::new();
        let mut last: Option<String> = None;
        for _ in 0..count {
            let k = d.string()?;
            let v = d.string()?;
            // Keys must be strictly ascending so each map has one encoding.
            if last.as_ref().is_some_and(|prev| prev >= &k) {
                return Err(DecodeError::Invalid("metadata keys not sorted".into()));
            }
            last = Some(k.clone());
            metadata.insert(k, v);
        }
        let endorsement = |d: &mut Decoder<'_>| -> Result<Endorsement, DecodeError> {
            Ok(Endorsement {
                cert_id: d.u64()?,
                signature: d.signature()?,
            })
        };
        let creator = endorsement(d)?;
        let examined_at = d.u64()?;
        let examiner = endorsement(d)?;
        let archiver = endorsement(d)?;
        Ok(Self {
            doc_id,
            tx_timestamp,
            doc_created_at,
            metadata,
            creator,
            examined_at,
            examiner,
            archiver,
        })
    }
}

/// What a row carries. The tag byte leads the encoding.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Payload {
    Genesis { chain_title: String },
    FinalTransaction(FinalTransaction),
    CertificateHash { cert_hash: Digest },
}

const TAG_GENESIS: u8 = 0;
const TAG_FINAL: u8 = 1;
const TAG_CERT: u8 = 2;

impl Payload {
    pub fn encode(&self) -> Vec<u8> {
        let mut e = Encoder::new();
        match self {
            Payload::Genesis { chain_title } => {
                e.u8(TAG_GENESIS).str(chain_title);
            }
            Payload::FinalTransaction(tx) => {
                e.u8(TAG_FINAL);
                tx.encode_into(&mut e);
            }
            Payload::CertificateHash { cert_hash } => {
                e.u8(TAG_CERT).digest(cert_hash);
            }
        }
        e.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut d = Decoder::new(bytes);
        let payload = match d.u8()? {
            TAG_GENESIS => Payload::Genesis {
                chain_title: d.string()?,
            },
            TAG_FINAL => Payload::FinalTransaction(FinalTransaction::decode_from(&mut d)?),
            TAG_CERT => Payload::CertificateHash {
                cert_hash: d.digest()?,
            },
            tag => return Err(DecodeError::UnknownTag(tag)),
        };
        d.finish()?;
        Ok(payload)
    }

    pub fn is_genesis(&self) -> bool {
        matches!(self, Payload::Genesis { .. })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerRow {
    pub index: u64,
    pub timestamp: Millis,
    #[serde(with = "hex_bytes")]
    pub payload: Vec<u8>,
    pub payload_signature: SignatureValue,
    pub signer_cert_id: CertId,
    pub prev_hash: Digest,
    pub row_hash: Digest,
}

mod hex_bytes {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        hex::decode(s).map_err(serde::de::Error::custom)
    }
}

/// `timestamp(8) ‖ len(4) ‖ payload ‖ len(4) ‖ signature ‖ prev_hash(64)`, all big-endian.
pub fn canonical_row_bytes(
    timestamp: Millis,
    payload: &[u8],
    payload_signature: &[u8],
    prev_hash: &Digest,
) -> Result<Vec<u8>, LedgerError> {
    for field in [payload, payload_signature] {
        if u32::try_from(field.len()).is_err() {
            return Err(LedgerError::OversizePayload(field.len()));
        }
    }
    let mut out = Vec::with_capacity(8 + 4 + payload.len() + 4 + payload_signature.len() + 64);
    out.extend_from_slice(&timestamp.to_be_bytes());
    out.extend_from_slice(&(payload.len() as u32).to_be_bytes());
    out.extend_from_slice(payload);
    out.extend_from_slice(&(payload_signature.len() as u32).to_be_bytes());
    out.extend_from_slice(payload_signature);
    out.extend_from_slice(prev_hash.as_bytes());
    Ok(out)
}

/// Inverse of [`canonical_row_bytes`].
pub fn decode_row_bytes(bytes: &[u8]) -> Result<(Millis, Vec<u8>, Vec<u8>, Digest), DecodeError> {
    let mut d = Decoder::new(bytes);
    let ts = d.u64()?;
    let payload = d.bytes()?.to_vec();
    let sig = d.bytes()?.to_vec();
    let prev = d.digest()?;
    d.finish()?;
    Ok((ts, payload, sig, prev))
}

impl LedgerRow {
    /// Builds a row at `index` and computes its hash.
    pub fn build(
        index: u64,
        timestamp: Millis,
        payload: Vec<u8>,
        payload_signature: SignatureValue,
        signer_cert_id: CertId,
        prev_hash: Digest,
    ) -> Result<Self, LedgerError> {
        let row_hash = hash(&canonical_row_bytes(
            timestamp,
            &payload,
            payload_signature.as_bytes(),
            &prev_hash,
        )?);
        Ok(Self {
            index,
            timestamp,
            payload,
            payload_signature,
            signer_cert_id,
            prev_hash,
            row_hash,
        })
    }

    pub fn canonical_bytes(&self) -> Result<Vec<u8>, LedgerError> {
        canonical_row_bytes(
            self.timestamp,
            &self.payload,
            self.payload_signature.as_bytes(),
            &self.prev_hash,
        )
    }

    pub fn computed_hash(&self) -> Option<Digest> {
        self.canonical_bytes().ok().map(|b| hash(&b))
    }

    pub fn decode_payload(&self) -> Result<Payload, DecodeError> {
        Payload::decode(&self.payload)
    }

    /// One tab-separated line, without the newline.
    pub fn to_line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.index,
            self.timestamp,
            hex::encode(&self.payload),
            self.payload_signature.to_hex(),
            self.signer_cert_id,
            self.prev_hash.to_hex(),
            self.row_hash.to_hex()
        )
    }

    pub fn parse_line(line: &str) -> Result<Self, String> {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 7 {
            return Err(format!(
                "expected 7 tab-separated fields, found {}",
                fields.len()
            ));
        }
        let num = |s: &str, what: &str| s.parse::<u64>().map_err(|e| format!("{what}: {e}"));
        Ok(Self {
            index: num(fields[0], "index")?,
            timestamp: num(fields[1], "timestamp")?,
            payload: hex::decode(fields[2]).map_err(|e| format!("payload: {e}"))?,
            payload_signature: SignatureValue::from_hex(fields[3])
                .map_err(|e| format!("signature: {e}"))?,
            signer_cert_id: num(fields[4], "signer")?,
            prev_hash: Digest::from_hex(fields[5]).map_err(|e| format!("prev_hash: {e}"))?,
            row_hash: Digest::from_hex(fields[6]).map_err(|e| format!("row_hash: {e}"))?,
        })
    }
}

/// Maps certificate numbers to the keys that verify their signatures.
pub trait KeyResolver {
    fn public_key(&self, cert_id: CertId) -> Option<PublicKey>;

    /// Whether `cert_id` may sign a chain's genesis row.
    fn may_sign_genesis(&self, _cert_id: CertId) -> bool {
        true
    }
}

impl KeyResolver for BTreeMap<CertId, PublicKey> {
    fn public_key(&self, cert_id: CertId) -> Option<PublicKey> {
        self.get(&cert_id).cloned()
    }
}

impl<R: KeyResolver + ?Sized> KeyResolver for &R {
    fn public_key(&self, cert_id: CertId) -> Option<PublicKey> {
        (**self).public_key(cert_id)
    }

    fn may_sign_genesis(&self, cert_id: CertId) -> bool {
        (**self).may_sign_genesis(cert_id)
    }
}

/// Remembers signatures that already verified, keyed by the exact
/// `(public key, signature, message)` bytes, and row encodings whose hash
/// already matched. Repeat verification of an unchanged chain then costs
/// hash-set lookups instead of curve arithmetic and Streebog.
#[derive(Default)]
pub struct SignatureCache {
    seen: Mutex<HashSet<Vec<u8>>>,
    rows: Mutex<HashSet<Vec<u8>>>,
}

impl SignatureCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn verify(&self, key: &PublicKey, message: &[u8], sig: &SignatureValue) -> bool {
        let mut entry = Vec::with_capacity(128 + sig.len() + message.len());
        entry.extend_from_slice(&key.to_bytes());
        entry.extend_from_slice(&(sig.len() as u32).to_be_bytes());
        entry.extend_from_slice(sig.as_bytes());
        entry.extend_from_slice(message);
        if self.seen.lock().expect("cache lock").contains(&entry) {
            return true;
        }
        let ok = verify(key, message, sig);
        if ok {
            self.seen.lock().expect("cache lock").insert(entry);
        }
        ok
    }

    /// Whether `bytes` hash to `claimed`. Only matches are remembered.
    pub fn row_hash_matches(&self, bytes: &[u8], claimed: &Digest) -> bool {
        let mut entry = Vec::with_capacity(DIGEST_LEN + bytes.len());
        entry.extend_from_slice(claimed.as_bytes());
        entry.extend_from_slice(bytes);
        if self.rows.lock().expect("cache lock").contains(&entry) {
            return true;
        }
        let ok = hash(bytes) == *claimed;
        if ok {
            self.rows.lock().expect("cache lock").insert(entry);
        }
        ok
    }

    /// Number of remembered signatures.
    pub fn len(&self) -> usize {
        self.seen.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Why a row failed verification.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    IndexMismatch { expected: u64, found: u64 },
    PrevHashMismatch,
    TimestampRegression { previous: Millis, found: Millis },
    RowHashMismatch,
    OversizeField,
    MalformedPayload(String),
    GenesisMisplaced,
    GenesisSigner(CertId),
    UnknownSigner(CertId),
    BadSignature,
    InvalidTransaction(String),
    BadEndorsement { role: &'static str, cert_id: CertId },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::IndexMismatch { expected, found } => {
                write!(f, "index {found} where {expected} was expected")
            }
            Violation::PrevHashMismatch => f.write_str("prev_hash does not match the previous row"),
            Violation::TimestampRegression { previous, found } => {
                write!(f, "timestamp {found} precedes previous row's {previous}")
            }
            Violation::RowHashMismatch => f.write_str("row_hash does not match row contents"),
            Violation::OversizeField => f.write_str("field exceeds the encodable length"),
            Violation::MalformedPayload(e) => write!(f, "payload does not decode: {e}"),
            Violation::GenesisMisplaced => {
                f.write_str("genesis payload outside row 0 or missing at row 0")
            }
            Violation::GenesisSigner(c) => write!(f, "certificate {c} may not sign a genesis row"),
            Violation::UnknownSigner(c) => write!(f, "no public key for certificate {c}"),
            Violation::BadSignature => f.write_str("payload signature does not verify"),
            Violation::InvalidTransaction(e) => write!(f, "invalid transaction: {e}"),
            Violation::BadEndorsement { role, cert_id } => {
                write!(
                    f,
                    "{role} signature by certificate {cert_id} does not verify"
                )
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VerificationReport {
    pub valid: bool,
    /// Rows examined, including the failing one.
    pub rows: usize,
    pub first_bad_index: Option<u64>,
    pub reason: Option<Violation>,
}

impl VerificationReport {
    fn ok(rows: usize) -> Self {
        Self {
            valid: true,
            rows,
            first_bad_index: None,
            reason: None,
        }
    }

    fn bad(position: usize, reason: Violation) -> Self {
        Self {
            valid: false,
            rows: position + 1,
            first_bad_index: Some(position as u64),
            reason: Some(reason),
        }
    }
}

impl fmt::Display for VerificationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (&self.first_bad_index, &self.reason) {
            (Some(i), Some(r)) => write!(f, "invalid at row {i}: {r}"),
            _ => write!(f, "valid, {} rows", self.rows),
        }
    }
}

fn check_signature(
    cache: Option<&SignatureCache>,
    key: &PublicKey,
    msg: &[u8],
    sig: &SignatureValue,
) -> bool {
    match cache {
        Some(c) => c.verify(key, msg, sig),
        None => verify(key, msg, sig),
    }
}

/// Checks of a single row that do not look at its neighbours.
fn check_row_contents<R: KeyResolver>(
    row: &LedgerRow,
    position: usize,
    resolver: &R,
    cache: Option<&SignatureCache>,
) -> Result<(), Violation> {
    let bytes = row
        .canonical_bytes()
        .map_err(|_| Violation::OversizeField)?;
    let hash_ok = match cache {
        Some(c) => c.row_hash_matches(&bytes, &row.row_hash),
        None => hash(&bytes) == row.row_hash,
    };
    if !hash_ok {
        return Err(Violation::RowHashMismatch);
    }
    let payload = row
        .decode_payload()
        .map_err(|e| Violation::MalformedPayload(e.to_string()))?;
    if payload.is_genesis() != (position == 0) {
        return Err(Violation::GenesisMisplaced);
    }
    if position == 0 && !resolver.may_sign_genesis(row.signer_cert_id) {
        return Err(Violation::GenesisSigner(row.signer_cert_id));
    }
    let key = resolver
        .public_key(row.signer_cert_id)
        .ok_or(Violation::UnknownSigner(row.signer_cert_id))?;
    if !check_signature(cache, &key, &row.payload, &row.payload_signature) {
        return Err(Violation::BadSignature);
    }
    if let Payload::FinalTransaction(tx) = payload {
        tx.validate().map_err(Violation::InvalidTransaction)?;
        if tx.tx_timestamp > row.timestamp {
            return Err(Violation::InvalidTransaction(
                "transaction stamped after its row".into(),
            ));
        }
        let endorsed = tx.endorsed_messages().expect("validated digest");
        for ((endorsement, msg), role) in endorsed.iter().zip(["creator", "examiner", "archiver"]) {
            let ok = resolver
                .public_key(endorsement.cert_id)
                .is_some_and(|k| check_signature(cache, &k, msg, &endorsement.signature));
            if !ok {
                return Err(Violation::BadEndorsement {
                    role,
                    cert_id: endorsement.cert_id,
                });
            }
        }
    }
    Ok(())
}

/// Walks the chain from row 0 and stops at the first violation.
pub fn verify_chain<R: KeyResolver>(rows: &[LedgerRow], resolver: &R) -> VerificationReport {
    verify_chain_with(rows, resolver, None)
}

pub fn verify_chain_with<R: KeyResolver>(
    rows: &[LedgerRow],
    resolver: &R,
    cache: Option<&SignatureCache>,
) -> VerificationReport {
    let mut prev_hash = ZERO_DIGEST;
    let mut prev_ts = 0;
    for (position, row) in rows.iter().enumerate() {
        if row.index != position as u64 {
            return VerificationReport::bad(
                position,
                Violation::IndexMismatch {
                    expected: position as u64,
                    found: row.index,
                },
            );
        }
        if row.prev_hash != prev_hash {
            return VerificationReport::bad(position, Violation::PrevHashMismatch);
        }
        if row.timestamp < prev_ts {
            return VerificationReport::bad(
                position,
                Violation::TimestampRegression {
                    previous: prev_ts,
                    found: row.timestamp,
                },
            );
        }
        if let Err(v) = check_row_contents(row, position, resolver, cache) {
            return VerificationReport::bad(position, v);
        }
        prev_hash = row.row_hash;
        prev_ts = row.timestamp;
    }
    VerificationReport::ok(rows.len())
}

/// Constant-work check of the last row against its predecessor.
pub fn verify_head<R: KeyResolver>(rows: &[LedgerRow], resolver: &R) -> Result<bool, LedgerError> {
    let (tail, position) = match rows.last() {
        Some(t) => (t, rows.len() - 1),
        None => return Err(LedgerError::EmptyChain),
    };
    let (prev_hash, prev_ts) = match position {
        0 => (ZERO_DIGEST, 0),
        _ => (rows[position - 1].row_hash, rows[position - 1].timestamp),
    };
    Ok(tail.index == position as u64
        && tail.prev_hash == prev_hash
        && tail.timestamp >= prev_ts
        && check_row_contents(tail, position, resolver, None).is_ok())
}

/// An in-memory chain. Rows are only ever pushed.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Chain {
    rows: Vec<LedgerRow>,
}

impl Chain {
    pub fn new() -> Self {
        Self::default()
    }

    /// Wraps rows as-is; call [`verify_chain`] before trusting them.
    pub fn from_rows(rows: Vec<LedgerRow>) -> Self {
        Self { rows }
    }

    pub fn rows(&self) -> &[LedgerRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn head(&self) -> Option<&LedgerRow> {
        self.rows.last()
    }

    pub fn rows_from(&self, from: usize) -> &[LedgerRow] {
        &self.rows[from.min(self.rows.len())..]
    }

    fn next_row(
        &self,
        payload: &Payload,
        signer: &Identity,
        clock: &dyn Clock,
    ) -> Result<LedgerRow, LedgerError> {
        let now = clock.now_ms();
        let (prev_hash, index) = match self.rows.last() {
            Some(last) => {
                if now < last.timestamp {
                    return Err(LedgerError::NonMonotonicClock {
                        previous: last.timestamp,
                        now,
                    });
                }
                (last.row_hash, last.index + 1)
            }
            None => (ZERO_DIGEST, 0),
        };
        let bytes = payload.encode();
        if u32::try_from(bytes.len()).is_err() {
            return Err(LedgerError::OversizePayload(bytes.len()));
        }
        let sig = signer.sign(&bytes);
        LedgerRow::build(index, now, bytes, sig, signer.cert_id, prev_hash)
    }

    /// Row 0 of a fresh chain, not yet pushed.
    pub fn prepare_genesis(
        &self,
        chain_title: &str,
        admin: &Identity,
        clock: &dyn Clock,
    ) -> Result<LedgerRow, LedgerError> {
        if !self.is_empty() {
            return Err(LedgerError::ChainAlreadyInitialized);
        }
        let payload = Payload::Genesis {
            chain_title: chain_title.to_string(),
        };
        self.next_row(&payload, admin, clock)
    }

    /// The next row for a non-genesis payload, not yet pushed.
    pub fn prepare(
        &self,
        payload: &Payload,
        admin: &Identity,
        clock: &dyn Clock,
    ) -> Result<LedgerRow, LedgerError> {
        if self.is_empty() {
            return Err(LedgerError::UninitializedChain);
        }
        match payload {
            Payload::Genesis { .. } => Err(LedgerError::ChainAlreadyInitialized),
            Payload::FinalTransaction(tx) => {
                tx.validate().map_err(LedgerError::InvalidTransaction)?;
                let row = self.next_row(payload, admin, clock)?;
                if tx.tx_timestamp > row.timestamp {
                    return Err(LedgerError::InvalidTransaction(format!(
                        "tx_timestamp {} is later than the row timestamp {}",
                        tx.tx_timestamp, row.timestamp
                    )));
                }
                Ok(row)
            }
            Payload::CertificateHash { .. } => self.next_row(payload, admin, clock),
        }
    }

    /// Pushes a row after checking it extends the current head.
    pub fn push(&mut self, row: LedgerRow) -> Result<(), LedgerError> {
        let (expected_prev, expected_index, prev_ts) = match self.rows.last() {
            Some(last) => (last.row_hash, last.index + 1, last.timestamp),
            None => (ZERO_DIGEST, 0, 0),
        };
        if row.index != expected_index {
            return Err(LedgerError::BrokenLink(format!(
                "index {} where {expected_index} was expected",
                row.index
            )));
        }
        if row.prev_hash != expected_prev {
            return Err(LedgerError::BrokenLink("prev_hash mismatch".into()));
        }
        if row.timestamp < prev_ts {
            return Err(LedgerError::NonMonotonicClock {
                previous: prev_ts,
                now: row.timestamp,
            });
        }
        if row.computed_hash() != Some(row.row_hash) {
            return Err(LedgerError::BrokenLink("row_hash mismatch".into()));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn genesis(
        &mut self,
        chain_title: &str,
        admin: &Identity,
        clock: &dyn Clock,
    ) -> Result<LedgerRow, LedgerError> {
        let row = self.prepare_genesis(chain_title, admin, clock)?;
        self.push(row.clone())?;
        Ok(row)
    }

    pub fn append(
        &mut self,
        tx: &FinalTransaction,
        admin: &Identity,
        clock: &dyn Clock,
    ) -> Result<LedgerRow, LedgerError> {
        self.append_payload(&Payload::FinalTransaction(tx.clone()), admin, clock)
    }

    pub fn append_payload(
        &mut self,
        payload: &Payload,
        admin: &Identity,
        clock: &dyn Clock,
    ) -> Result<LedgerRow, LedgerError> {
        let row = self.prepare(payload, admin, clock)?;
        self.push(row.clone())?;
        Ok(row)
    }
}

/// Reads every row of a ledger file; a missing file is an empty chain.
pub fn read_ledger_file(path: &Path) -> Result<Vec<LedgerRow>, LedgerError> {
    let file = match fs::File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e.into()),
    };
    let mut rows = Vec::new();
    for (n, line) in io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let row = LedgerRow::parse_line(&line).map_err(|message| LedgerError::Parse {
            line: n + 1,
            message,
        })?;
        rows.push(row);
    }
    Ok(rows)
}

/// Writes rows as a complete ledger file.
pub fn write_ledger_file(path: &Path, rows: &[LedgerRow]) -> Result<(), LedgerError> {
    let mut out = String::new();
    for row in rows {
        out.push_str(&row.to_line());
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Appends one row line to a ledger file, creating it if needed.
pub fn append_ledger_line(path: &Path, row: &LedgerRow) -> io::Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)?;
    f.write_all(format!("{}\n", row.to_line()).as_bytes())?;
    f.sync_data()
}

/// A chain mirrored to an append-only file. The file is opened in append
/// mode for every write and never truncated or rewritten.
#[derive(Debug)]
pub struct LedgerStore {
    path: PathBuf,
    chain: Chain,
}

impl LedgerStore {
    pub fn open(path: impl Into<PathBuf>) -> Result<Self, LedgerError> {
        let path = path.into();
        let chain = Chain::from_rows(read_ledger_file(&path)?);
        Ok(Self { path, chain })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn chain(&self) -> &Chain {
        &self.chain
    }

    /// Re-reads the file, discarding the in-memory copy.
    pub fn reload(&mut self) -> Result<(), LedgerError> {
        self.chain = Chain::from_rows(read_ledger_file(&self.path)?);
        Ok(())
    }

    pub fn append_row(&mut self, row: LedgerRow) -> Result<(), LedgerError> {
        self.chain.push(row.clone())?;
        if let Err(e) = append_ledger_line(&self.path, &row) {
            self.chain.rows.pop();
            return Err(e.into());
        }
        Ok(())
    }
}
