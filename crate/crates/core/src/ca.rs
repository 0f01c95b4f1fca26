//! Certification authority: accounts and roles, certificate issuance into the
//! all-certificates chain, revocation into the revoked chain, and validity
//! lookups against both.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::{Clock, Millis, DAY_MS, HOUR_MS};
use crate::crypto::{hash, CurveId, Digest, KeyPair, PublicKey, SchemeId, DEFAULT_CURVE};
use crate::identity::{CertId, Identity, IdentityError};
use crate::ledger::{
    append_ledger_line, read_ledger_file, verify_chain_with, write_ledger_file, Chain, KeyResolver,
    LedgerError, LedgerRow, Payload, SignatureCache,
};

pub const PASSWORD_ITERATIONS: usize = 10_000;
pub const MIN_PASSWORD_LEN: usize = 8;
pub const SALT_LEN: usize = 16;
pub const DEFAULT_CERT_LIFETIME_MS: Millis = 365 * DAY_MS;
pub const SESSION_TTL_MS: Millis = 12 * HOUR_MS;

pub const ALL_CHAIN_TITLE: &str = "All certificates";
pub const REVOKED_CHAIN_TITLE: &str = "Revoked certificates";

#[derive(Debug, Error)]
pub enum CaError {
    #[error("username {0:?} is already registered")]
    DuplicateUsername(String),
    #[error("password must be at least {MIN_PASSWORD_LEN} characters")]
    WeakPassword,
    #[error("invalid profile: {0}")]
    InvalidProfile(String),
    #[error("wrong username or password")]
    BadCredentials,
    #[error("unauthorized")]
    Unauthorized,
    #[error("forbidden: {0}")]
    Forbidden(String),
    #[error("unknown user {0}")]
    UnknownUser(u64),
    #[error("unknown certificate {0}")]
    UnknownCertificate(String),
    #[error("account has the UnconfirmedUser role and cannot hold a certificate")]
    UnconfirmedHolder,
    #[error("no private key is waiting for pickup")]
    NoPendingKey,
    #[error("malformed certificate: {0}")]
    MalformedCertificate(String),
    #[error("{chain} chain failed verification: {detail}")]
    ChainVerificationFailed { chain: ChainKind, detail: String },
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error(transparent)]
    Identity(#[from] IdentityError),
    #[error("ca store: {0}")]
    Io(#[from] io::Error),
    #[error("ca store: {0}")]
    Json(#[from] serde_json::Error),
}

impl CaError {
    /// Stable name for error replies and exit reporting.
    pub fn code(&self) -> &'static str {
        match self {
            CaError::DuplicateUsername(_) => "DuplicateUsername",
            CaError::WeakPassword => "WeakPassword",
            CaError::InvalidProfile(_) => "InvalidProfile",
            CaError::BadCredentials => "BadCredentials",
            CaError::Unauthorized => "Unauthorized",
            CaError::Forbidden(_) => "Forbidden",
            CaError::UnknownUser(_) => "UnknownUser",
            CaError::UnknownCertificate(_) => "UnknownCertificate",
            CaError::UnconfirmedHolder => "UnconfirmedHolder",
            CaError::NoPendingKey => "NoPendingKey",
            CaError::MalformedCertificate(_) => "MalformedCertificate",
            CaError::ChainVerificationFailed { .. } => "ChainVerificationFailed",
            CaError::Ledger(_) | CaError::Identity(_) | CaError::Io(_) | CaError::Json(_) => {
                "StoreError"
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Role {
    UnconfirmedUser,
    User,
    Expert,
    Administrator,
    CAAdministrator,
}

impl Role {
    pub const ALL: [Role; 5] = [
        Role::UnconfirmedUser,
        Role::User,
        Role::Expert,
        Role::Administrator,
        Role::CAAdministrator,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Role::UnconfirmedUser => "UnconfirmedUser",
            Role::User => "User",
            Role::Expert => "Expert",
            Role::Administrator => "Administrator",
            Role::CAAdministrator => "CAAdministrator",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        let folded: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_lowercase();
        Self::ALL
            .into_iter()
            .find(|r| r.name().to_ascii_lowercase() == folded)
            .or(match folded.as_str() {
                "unconfirmed" => Some(Role::UnconfirmedUser),
                "admin" => Some(Role::Administrator),
                "caadmin" => Some(Role::CAAdministrator),
                _ => None,
            })
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Profile {
    pub first_name: String,
    pub last_name: String,
    pub organization: String,
    pub email: String,
}

impl Profile {
    fn validate(&self) -> Result<(), CaError> {
        for (name, value) in [
            ("first_name", &self.first_name),
            ("last_name", &self.last_name),
            ("organization", &self.organization),
            ("email", &self.email),
        ] {
            if value.chars().any(|c| c.is_control()) {
                return Err(CaError::InvalidProfile(format!(
                    "{name} contains control characters"
                )));
            }
        }
        Ok(())
    }

    pub fn full_name(&self) -> String {
        format!("{} {}", self.first_name, self.last_name)
            .trim()
            .to_string()
    }
}

/// Iterated salted hash: `h0 = H(salt ‖ password)`, `h_i = H(salt ‖ h_{i-1})`.
pub fn hash_password(salt: &[u8], password: &str) -> Digest {
    let mut buf = Vec::with_capacity(salt.len() + password.len().max(64));
    buf.extend_from_slice(salt);
    buf.extend_from_slice(password.as_bytes());
    let mut h = hash(&buf);
    for _ in 1..PASSWORD_ITERATIONS {
        buf.truncate(salt.len());
        buf.extend_from_slice(h.as_bytes());
        h = hash(&buf);
    }
    h
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserAccount {
    pub user_id: u64,
    pub username: String,
    pub password_hash: Digest,
    pub salt: String,
    pub profile: Profile,
    pub role: Role,
    pub active_cert: Option<CertId>,
    /// Set when the holder's certificate expired and a new one is due.
    pub renewal_required: bool,
}

impl UserAccount {
    pub fn check_password(&self, password: &str) -> bool {
        match hex::decode(&self.salt) {
            Ok(salt) => hash_password(&salt, password) == self.password_hash,
            Err(_) => false,
        }
    }
}

/// Account view without credential material.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserSummary {
    pub user_id: u64,
    pub username: String,
    pub profile: Profile,
    pub role: Role,
    pub active_cert: Option<CertId>,
    pub renewal_required: bool,
}

impl From<&UserAccount> for UserSummary {
    fn from(a: &UserAccount) -> Self {
        Self {
            user_id: a.user_id,
            username: a.username.clone(),
            profile: a.profile.clone(),
            role: a.role,
            active_cert: a.active_cert,
            renewal_required: a.renewal_required,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Certificate {
    pub cert_id: CertId,
    pub holder_id: u64,
    pub holder_name: String,
    pub holder_email: String,
    pub holder_org: String,
    pub holder_category: Role,
    pub public_key: PublicKey,
    /// `None` never expires.
    pub expires_at: Option<Millis>,
    pub keygen_algorithm: String,
    pub ca_metadata: String,
}

const CERT_FIELDS: [&str; 10] = [
    "Certificate number",
    "Holder number",
    "Holder name",
    "Holder e-mail",
    "Holder organization",
    "Holder category",
    "Public key",
    "Valid until",
    "Key generation algorithm",
    "Issuer",
];

impl Certificate {
    /// Ten `Field: value` lines, each terminated by LF.
    pub fn to_text(&self) -> String {
        let values = [
            self.cert_id.to_string(),
            self.holder_id.to_string(),
            self.holder_name.clone(),
            self.holder_email.clone(),
            self.holder_org.clone(),
            self.holder_category.to_string(),
            self.public_key.to_hex(),
            match self.expires_at {
                Some(ms) => ms.to_string(),
                None => "never".into(),
            },
            self.keygen_algorithm.clone(),
            self.ca_metadata.clone(),
        ];
        let mut out = String::new();
        for (field, value) in CERT_FIELDS.iter().zip(values) {
            out.push_str(field);
            out.push_str(": ");
            out.push_str(&value);
            out.push('\n');
        }
        out
    }

    pub fn hash(&self) -> Digest {
        hash(self.to_text().as_bytes())
    }

    pub fn parse(text: &str) -> Result<Self, CaError> {
        let bad = |m: String| CaError::MalformedCertificate(m);
        if !text.ends_with('\n') {
            return Err(bad("missing final newline".into()));
        }
        let lines: Vec<&str> = text[..text.len() - 1].split('\n').collect();
        if lines.len() != CERT_FIELDS.len() {
            return Err(bad(format!("expected 10 lines, found {}", lines.len())));
        }
        let mut values = Vec::with_capacity(10);
        for (line, field) in lines.iter().zip(CERT_FIELDS) {
            let value = line
                .strip_prefix(field)
                .and_then(|rest| rest.strip_prefix(": "))
                .ok_or_else(|| bad(format!("expected field {field:?}")))?;
            values.push(value);
        }
        let num = |s: &str, f: &str| {
            s.parse::<u64>()
                .map_err(|_| bad(format!("{f} is not a number")))
        };
        let scheme = SchemeId::from_algorithm_name(values[8])
            .ok_or_else(|| bad(format!("unknown key algorithm {:?}", values[8])))?;
        let cert = Certificate {
            cert_id: num(values[0], "certificate number")?,
            holder_id: num(values[1], "holder number")?,
            holder_name: values[2].into(),
            holder_email: values[3].into(),
            holder_org: values[4].into(),
            holder_category: Role::parse(values[5])
                .ok_or_else(|| bad(format!("unknown category {:?}", values[5])))?,
            public_key: PublicKey::from_hex(scheme.curve(), values[6])
                .map_err(|e| bad(e.to_string()))?,
            expires_at: match values[7] {
                "never" => None,
                v => Some(num(v, "expiry")?),
            },
            keygen_algorithm: values[8].into(),
            ca_metadata: values[9].into(),
        };
        if cert.to_text() != text {
            return Err(bad("not in canonical form".into()));
        }
        Ok(cert)
    }

    pub fn expired_at(&self, now: Millis) -> bool {
        self.expires_at.is_some_and(|t| t <= now)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChainKind {
    All,
    Revoked,
}

impl ChainKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "all" => Some(ChainKind::All),
            "revoked" => Some(ChainKind::Revoked),
            _ => None,
        }
    }
}

impl fmt::Display for ChainKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ChainKind::All => "all",
            ChainKind::Revoked => "revoked",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Validity {
    Valid,
    Revoked,
    Unknown,
}

impl fmt::Display for Validity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Validity::Valid => "Valid",
            Validity::Revoked => "Revoked",
            Validity::Unknown => "Unknown",
        })
    }
}

/// New rows of one CA chain plus the certificate texts they refer to.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaUpdate {
    pub chain: ChainKind,
    pub from: usize,
    pub rows: Vec<LedgerRow>,
    pub certificates: Vec<String>,
}

/// Verifies CA chain rows: only the CA's own certificate signs them.
struct CaSigner<'a> {
    cert_id: CertId,
    key: &'a PublicKey,
}

impl KeyResolver for CaSigner<'_> {
    fn public_key(&self, cert_id: CertId) -> Option<PublicKey> {
        (cert_id == self.cert_id).then(|| self.key.clone())
    }
}

/// Both CA chains with their lookup indexes and the certificates they
/// reference. The CA owns one; every node keeps a replica.
pub struct CertRegistry {
    root: Certificate,
    all: Chain,
    revoked: Chain,
    all_index: HashMap<Digest, usize>,
    revoked_index: HashMap<Digest, usize>,
    certs: HashMap<Digest, Certificate>,
    by_id: BTreeMap<CertId, Digest>,
    cache: SignatureCache,
}

impl fmt::Debug for CertRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CertRegistry")
            .field("root", &self.root.cert_id)
            .field("all", &self.all.len())
            .field("revoked", &self.revoked.len())
            .finish()
    }
}

impl CertRegistry {
    /// Empty registry trusting `root` as the CA certificate.
    pub fn new(root: Certificate) -> Self {
        let mut reg = Self {
            root: root.clone(),
            all: Chain::new(),
            revoked: Chain::new(),
            all_index: HashMap::new(),
            revoked_index: HashMap::new(),
            certs: HashMap::new(),
            by_id: BTreeMap::new(),
            cache: SignatureCache::new(),
        };
        reg.insert_certificate(root);
        reg
    }

    pub fn root(&self) -> &Certificate {
        &self.root
    }

    pub fn chain(&self, kind: ChainKind) -> &Chain {
        match kind {
            ChainKind::All => &self.all,
            ChainKind::Revoked => &self.revoked,
        }
    }

    fn insert_certificate(&mut self, cert: Certificate) {
        let h = cert.hash();
        self.by_id.insert(cert.cert_id, h);
        self.certs.insert(h, cert);
    }

    pub fn certificate(&self, cert_id: CertId) -> Option<&Certificate> {
        self.by_id.get(&cert_id).and_then(|h| self.certs.get(h))
    }

    pub fn certificate_by_hash(&self, h: &Digest) -> Option<&Certificate> {
        self.certs.get(h)
    }

    pub fn certificates(&self) -> impl Iterator<Item = &Certificate> {
        self.by_id.values().filter_map(|h| self.certs.get(h))
    }

    pub fn is_revoked(&self, h: &Digest) -> bool {
        self.revoked_index.contains_key(h)
    }

    pub fn is_issued(&self, h: &Digest) -> bool {
        self.all_index.contains_key(h)
    }

    /// Revoked chain first, then the all-certificates chain with an
    /// unexpired certificate; anything else is unknown.
    pub fn check_validity(&self, cert_hash: &Digest, now: Millis) -> Validity {
        if self.revoked_index.contains_key(cert_hash) {
            return Validity::Revoked;
        }
        if self.all_index.contains_key(cert_hash) {
            if let Some(cert) = self.certs.get(cert_hash) {
                if !cert.expired_at(now) {
                    return Validity::Valid;
                }
            }
        }
        Validity::Unknown
    }

    pub fn validity_of(&self, cert_id: CertId, now: Millis) -> Validity {
        match self.by_id.get(&cert_id) {
            Some(h) => self.check_validity(h, now),
            None => Validity::Unknown,
        }
    }

    /// Certificate by number if it is currently valid.
    pub fn valid_certificate(
        &self,
        cert_id: CertId,
        now: Millis,
    ) -> Result<&Certificate, Validity> {
        match self.validity_of(cert_id, now) {
            Validity::Valid => Ok(self.certificate(cert_id).expect("indexed")),
            other => Err(other),
        }
    }

    /// The holder's valid certificate with the highest number.
    pub fn valid_certificate_for_holder(
        &self,
        holder_id: u64,
        now: Millis,
    ) -> Option<&Certificate> {
        self.certificates()
            .filter(|c| c.holder_id == holder_id)
            .filter(|c| self.check_validity(&c.hash(), now) == Validity::Valid)
            .max_by_key(|c| c.cert_id)
    }

    /// Certificates issued, not revoked and past their expiry.
    pub fn overdue(&self, now: Millis) -> Vec<&Certificate> {
        self.certificates()
            .filter(|c| c.cert_id != self.root.cert_id && c.expired_at(now))
            .filter(|c| {
                let h = c.hash();
                self.all_index.contains_key(&h) && !self.revoked_index.contains_key(&h)
            })
            .collect()
    }

    fn signer(&self) -> CaSigner<'_> {
        CaSigner {
            cert_id: self.root.cert_id,
            key: &self.root.public_key,
        }
    }

    fn reindex(&mut self, kind: ChainKind) {
        let (chain, index) = match kind {
            ChainKind::All => (&self.all, &mut self.all_index),
            ChainKind::Revoked => (&self.revoked, &mut self.revoked_index),
        };
        index.clear();
        for (i, row) in chain.rows().iter().enumerate() {
            if let Ok(Payload::CertificateHash { cert_hash }) = row.decode_payload() {
                index.insert(cert_hash, i);
            }
        }
    }

    /// Verifies both chains end to end.
    pub fn verify(&self) -> Result<(), CaError> {
        for kind in [ChainKind::All, ChainKind::Revoked] {
            let report =
                verify_chain_with(self.chain(kind).rows(), &self.signer(), Some(&self.cache));
            if !report.valid {
                return Err(CaError::ChainVerificationFailed {
                    chain: kind,
                    detail: report.to_string(),
                });
            }
        }
        Ok(())
    }

    /// Applies an update atomically: the extended chain must verify from
    /// row 0 and every certificate row must have its text. On error the
    /// registry is unchanged.
    pub fn apply(&mut self, update: &CaUpdate) -> Result<usize, CaError> {
        let fail = |detail: String| CaError::ChainVerificationFailed {
            chain: update.chain,
            detail,
        };
        let current = self.chain(update.chain);
        if update.from > current.len() {
            return Err(fail(format!(
                "update starts at row {} but replica has {}",
                update.from,
                current.len()
            )));
        }
        let mut rows = current.rows()[..update.from].to_vec();
        // Rows we already hold must match what the CA sends.
        let overlap = current.len() - update.from;
        for (mine, theirs) in current.rows()[update.from..].iter().zip(&update.rows) {
            if mine != theirs {
                return Err(fail(format!(
                    "row {} differs from the local replica",
                    mine.index
                )));
            }
        }
        if update.rows.len() < overlap {
            return Ok(0);
        }
        rows.extend(update.rows.iter().cloned());
        let report = verify_chain_with(&rows, &self.signer(), Some(&self.cache));
        if !report.valid {
            return Err(fail(report.to_string()));
        }

        let mut texts = HashMap::new();
        for text in &update.certificates {
            let cert = Certificate::parse(text)?;
            texts.insert(cert.hash(), cert);
        }
        let mut new_certs = Vec::new();
        for row in &rows[current.len()..] {
            if let Payload::CertificateHash { cert_hash } =
                row.decode_payload().map_err(|e| fail(e.to_string()))?
            {
                if self.certs.contains_key(&cert_hash) {
                    continue;
                }
                match texts.get(&cert_hash) {
                    Some(c) => new_certs.push(c.clone()),
                    None => {
                        return Err(fail(format!(
                            "row {} references a certificate that was not supplied",
                            row.index
                        )))
                    }
                }
            }
        }

        let added = rows.len() - current.len();
        match update.chain {
            ChainKind::All => self.all = Chain::from_rows(rows),
            ChainKind::Revoked => self.revoked = Chain::from_rows(rows),
        }
        for c in new_certs {
            self.insert_certificate(c);
        }
        self.reindex(update.chain);
        Ok(added)
    }

    /// Writes the registry as plain files: `root.crt`, `all.tsv`,
    /// `revoked.tsv` and `certs/<number>.crt`. The CA store uses the same
    /// layout, so either directory can be audited offline.
    pub fn save_dir(&self, dir: &Path) -> Result<(), CaError> {
        fs::create_dir_all(dir.join("certs"))?;
        fs::write(dir.join("root.crt"), self.root.to_text())?;
        for cert in self.certificates() {
            let path = dir.join("certs").join(format!("{}.crt", cert.cert_id));
            if !path.exists() {
                fs::write(path, cert.to_text())?;
            }
        }
        for kind in [ChainKind::All, ChainKind::Revoked] {
            let tmp = dir.join(format!("{kind}.tsv.tmp"));
            write_ledger_file(&tmp, self.chain(kind).rows())?;
            fs::rename(tmp, dir.join(format!("{kind}.tsv")))?;
        }
        Ok(())
    }

    /// Reads a directory written by `save_dir` (or a CA store) and verifies
    /// both chains against `root`, or against `root.crt` when `root` is
    /// `None`.
    pub fn load_dir(dir: &Path, root: Option<Certificate>) -> Result<Self, CaError> {
        let root = match root {
            Some(r) => r,
            None => Certificate::parse(&fs::read_to_string(dir.join("root.crt"))?)?,
        };
        let mut texts = Vec::new();
        if let Ok(entries) = fs::read_dir(dir.join("certs")) {
            for entry in entries {
                let path = entry?.path();
                if path.extension().is_some_and(|e| e == "crt") {
                    texts.push(fs::read_to_string(path)?);
                }
            }
        }
        texts.sort();
        let mut reg = Self::new(root);
        for kind in [ChainKind::All, ChainKind::Revoked] {
            let path = dir.join(format!("{kind}.tsv"));
            let rows = if path.exists() {
                read_ledger_file(&path)?
            } else {
                Vec::new()
            };
            reg.apply(&CaUpdate {
                chain: kind,
                from: 0,
                rows,
                certificates: texts.clone(),
            })?;
        }
        Ok(reg)
    }

    /// Rows from `from` onward with the certificate texts they cite.
    pub fn update_from(&self, kind: ChainKind, from: usize) -> CaUpdate {
        let rows = self.chain(kind).rows_from(from).to_vec();
        let certificates = rows
            .iter()
            .filter_map(|r| match r.decode_payload() {
                Ok(Payload::CertificateHash { cert_hash }) => {
                    self.certs.get(&cert_hash).map(|c| c.to_text())
                }
                _ => None,
            })
            .collect();
        CaUpdate {
            chain: kind,
            from: from.min(self.chain(kind).len()),
            rows,
            certificates,
        }
    }
}

impl KeyResolver for CertRegistry {
    fn public_key(&self, cert_id: CertId) -> Option<PublicKey> {
        self.certificate(cert_id).map(|c| c.public_key.clone())
    }

    fn may_sign_genesis(&self, cert_id: CertId) -> bool {
        self.certificate(cert_id).is_some_and(|c| {
            matches!(
                c.holder_category,
                Role::Administrator | Role::CAAdministrator
            )
        })
    }
}

/// Receives every CA chain update. Implementations must return quickly.
pub trait CaSubscriber: Send + Sync {
    fn notify(&self, update: &CaUpdate);
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CaConfig {
    pub cert_lifetime_ms: Millis,
    pub curve: CurveId,
    pub issuer: String,
}

impl Default for CaConfig {
    fn default() -> Self {
        Self {
            cert_lifetime_ms: DEFAULT_CERT_LIFETIME_MS,
            curve: DEFAULT_CURVE,
            issuer: "ARCHAIN Certification Authority".into(),
        }
    }
}

/// A newly issued certificate and its key pair. The private key leaves the
/// CA through this value only.
#[derive(Clone, Debug)]
pub struct IssuedCertificate {
    pub certificate: Certificate,
    pub keypair: KeyPair,
}

/// One-time key pickup result.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClaimedKey {
    pub cert_id: CertId,
    pub curve: CurveId,
    pub private_key: String,
    pub certificate: String,
}

impl ClaimedKey {
    pub fn into_identity(self) -> Result<Identity, CaError> {
        let bytes = hex::decode(&self.private_key)
            .map_err(|e| CaError::MalformedCertificate(e.to_string()))?;
        let private = crate::crypto::PrivateKey::from_bytes(self.curve, &bytes)
            .map_err(|e| CaError::MalformedCertificate(e.to_string()))?;
        let mut id = Identity::new(self.cert_id, KeyPair::from_private(private));
        id.certificate = Some(self.certificate);
        Ok(id)
    }
}

struct Session {
    user_id: u64,
    expires_at: Millis,
}

#[derive(Serialize, Deserialize)]
struct AccountsFile {
    next_user_id: u64,
    next_cert_id: CertId,
    config: CaConfig,
    accounts: Vec<UserAccount>,
}

/// The certification authority service state. All mutations go through
/// `&mut self`; wrap it in a lock to serialize writers.
pub struct CertificateAuthority {
    config: CaConfig,
    registry: CertRegistry,
    accounts: BTreeMap<u64, UserAccount>,
    next_user_id: u64,
    next_cert_id: CertId,
    ca_identity: Identity,
    sessions: HashMap<String, Session>,
    pending_keys: HashMap<u64, IssuedCertificate>,
    store: Option<PathBuf>,
    subscribers: Vec<Arc<dyn CaSubscriber>>,
    clock: Arc<dyn Clock>,
}

impl fmt::Debug for CertificateAuthority {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CertificateAuthority")
            .field("accounts", &self.accounts.len())
            .field("registry", &self.registry)
            .finish()
    }
}

fn random_hex(len: usize) -> String {
    let mut buf = vec![0u8; len];
    rand::rngs::OsRng.fill_bytes(&mut buf);
    hex::encode(buf)
}

impl CertificateAuthority {
    /// Creates a CA with its administrator account (user 1) and its own
    /// never-expiring certificate (number 1). With `store`, state is written
    /// under that directory, which must not already hold a CA.
    pub fn bootstrap(
        config: CaConfig,
        admin_username: &str,
        admin_password: &str,
        admin_profile: Profile,
        store: Option<&Path>,
        clock: Arc<dyn Clock>,
    ) -> Result<Self, CaError> {
        if admin_password.chars().count() < MIN_PASSWORD_LEN {
            return Err(CaError::WeakPassword);
        }
        admin_profile.validate()?;
        if let Some(dir) = store {
            if dir.join("accounts.json").exists() {
                return Err(CaError::Forbidden(format!(
                    "{} already holds a CA",
                    dir.display()
                )));
            }
            fs::create_dir_all(dir.join("certs"))?;
        }
        let keypair = KeyPair::generate(config.curve);
        let root = Certificate {
            cert_id: 1,
            holder_id: 1,
            holder_name: admin_profile.full_name(),
            holder_email: admin_profile.email.clone(),
            holder_org: admin_profile.organization.clone(),
            holder_category: Role::CAAdministrator,
            public_key: keypair.public_key().clone(),
            expires_at: None,
            keygen_algorithm: SchemeId::for_curve(config.curve).algorithm_name().into(),
            ca_metadata: config.issuer.clone(),
        };
        let salt = random_hex(SALT_LEN);
        let admin = UserAccount {
            user_id: 1,
            username: admin_username.to_string(),
            password_hash: hash_password(&hex::decode(&salt).expect("hex"), admin_password),
            salt,
            profile: admin_profile,
            role: Role::CAAdministrator,
            active_cert: Some(1),
            renewal_required: false,
        };
        let mut ca = Self {
            config,
            registry: CertRegistry::new(root.clone()),
            accounts: BTreeMap::from([(1, admin)]),
            next_user_id: 2,
            next_cert_id: 2,
            ca_identity: Identity::new(1, keypair),
            sessions: HashMap::new(),
            pending_keys: HashMap::new(),
            store: store.map(Path::to_path_buf),
            subscribers: Vec::new(),
            clock,
        };
        if let Some(dir) = &ca.store {
            ca.ca_identity.save(&dir.join("ca_identity.json"))?;
            fs::write(dir.join("root.crt"), root.to_text())?;
        }
        ca.append(
            ChainKind::All,
            Payload::Genesis {
                chain_title: ALL_CHAIN_TITLE.into(),
            },
            None,
        )?;
        ca.append(
            ChainKind::Revoked,
            Payload::Genesis {
                chain_title: REVOKED_CHAIN_TITLE.into(),
            },
            None,
        )?;
        ca.append(
            ChainKind::All,
            Payload::CertificateHash {
                cert_hash: root.hash(),
            },
            Some(&root),
        )?;
        ca.save_accounts()?;
        Ok(ca)
    }

    /// Loads a CA previously created with a store directory.
    pub fn open(dir: &Path, clock: Arc<dyn Clock>) -> Result<Self, CaError> {
        let file: AccountsFile = serde_json::from_slice(&fs::read(dir.join("accounts.json"))?)?;
        let ca_identity = Identity::load(&dir.join("ca_identity.json"))?;
        let mut certs = HashMap::new();
        for entry in fs::read_dir(dir.join("certs"))? {
            let text = fs::read_to_string(entry?.path())?;
            let cert = Certificate::parse(&text)?;
            certs.insert(cert.hash(), cert);
        }
        let root = certs
            .values()
            .find(|c| c.cert_id == ca_identity.cert_id)
            .cloned()
            .ok_or_else(|| CaError::UnknownCertificate("CA root certificate".into()))?;
        if &root.public_key != ca_identity.public_key() {
            return Err(CaError::MalformedCertificate(
                "CA key does not match the root certificate".into(),
            ));
        }
        let mut registry = CertRegistry::new(root);
        let mut all_certs: Vec<String> = certs.values().map(Certificate::to_text).collect();
        all_certs.sort();
        for kind in [ChainKind::All, ChainKind::Revoked] {
            let rows = read_ledger_file(&dir.join(format!("{kind}.tsv")))?;
            registry.apply(&CaUpdate {
                chain: kind,
                from: 0,
                rows,
                certificates: all_certs.clone(),
            })?;
        }
        Ok(Self {
            config: file.config,
            registry,
            accounts: file.accounts.into_iter().map(|a| (a.user_id, a)).collect(),
            next_user_id: file.next_user_id,
            next_cert_id: file.next_cert_id,
            ca_identity,
            sessions: HashMap::new(),
            pending_keys: HashMap::new(),
            store: Some(dir.to_path_buf()),
            subscribers: Vec::new(),
            clock,
        })
    }

    pub fn config(&self) -> &CaConfig {
        &self.config
    }

    pub fn registry(&self) -> &CertRegistry {
        &self.registry
    }

    pub fn root_certificate(&self) -> &Certificate {
        self.registry.root()
    }

    pub fn now(&self) -> Millis {
        self.clock.now_ms()
    }

    pub fn subscribe(&mut self, sub: Arc<dyn CaSubscriber>) {
        self.subscribers.push(sub);
    }

    fn save_accounts(&self) -> Result<(), CaError> {
        let Some(dir) = &self.store else {
            return Ok(());
        };
        let file = AccountsFile {
            next_user_id: self.next_user_id,
            next_cert_id: self.next_cert_id,
            config: self.config.clone(),
            accounts: self.accounts.values().cloned().collect(),
        };
        let tmp = dir.join("accounts.json.tmp");
        fs::write(&tmp, serde_json::to_vec_pretty(&file)?)?;
        fs::rename(tmp, dir.join("accounts.json"))?;
        Ok(())
    }

    /// Signs and appends one row, persists it and notifies subscribers.
    fn append(
        &mut self,
        kind: ChainKind,
        payload: Payload,
        cert: Option<&Certificate>,
    ) -> Result<LedgerRow, CaError> {
        let chain = self.registry.chain(kind);
        let row = match &payload {
            Payload::Genesis { chain_title } => {
                chain.prepare_genesis(chain_title, &self.ca_identity, self.clock.as_ref())?
            }
            _ => chain.prepare(&payload, &self.ca_identity, self.clock.as_ref())?,
        };
        if let Some(dir) = &self.store {
            if let Some(c) = cert {
                let path = dir.join("certs").join(format!("{}.crt", c.cert_id));
                if !path.exists() {
                    fs::write(path, c.to_text())?;
                }
            }
            append_ledger_line(&dir.join(format!("{kind}.tsv")), &row)?;
        }
        let update = CaUpdate {
            chain: kind,
            from: row.index as usize,
            rows: vec![row.clone()],
            certificates: cert.map(|c| vec![c.to_text()]).unwrap_or_default(),
        };
        self.registry.apply(&update)?;
        for sub in &self.subscribers {
            sub.notify(&update);
        }
        Ok(row)
    }

    pub fn register_user(
        &mut self,
        username: &str,
        password: &str,
        profile: Profile,
    ) -> Result<UserAccount, CaError> {
        let username = username.trim();
        if username.is_empty()
            || username
                .chars()
                .any(|c| c.is_control() || c.is_whitespace())
        {
            return Err(CaError::InvalidProfile(
                "username must be a single word".into(),
            ));
        }
        if self.accounts.values().any(|a| a.username == username) {
            return Err(CaError::DuplicateUsername(username.into()));
        }
        if password.chars().count() < MIN_PASSWORD_LEN {
            return Err(CaError::WeakPassword);
        }
        profile.validate()?;
        let salt = random_hex(SALT_LEN);
        let account = UserAccount {
            user_id: self.next_user_id,
            username: username.into(),
            password_hash: hash_password(&hex::decode(&salt).expect("hex"), password),
            salt,
            profile,
            role: Role::UnconfirmedUser,
            active_cert: None,
            renewal_required: false,
        };
        self.next_user_id += 1;
        self.accounts.insert(account.user_id, account.clone());
        self.save_accounts()?;
        Ok(account)
    }

    pub fn authenticate(&self, username: &str, password: &str) -> Option<&UserAccount> {
        self.accounts
            .values()
            .find(|a| a.username == username)
            .filter(|a| a.check_password(password))
    }

    /// Returns a bearer token for the session.
    pub fn login(&mut self, username: &str, password: &str) -> Result<String, CaError> {
        let user_id = self
            .authenticate(username, password)
            .ok_or(CaError::BadCredentials)?
            .user_id;
        let token = random_hex(32);
        let now = self.now();
        self.sessions.retain(|_, s| s.expires_at > now);
        self.sessions.insert(
            token.clone(),
            Session {
                user_id,
                expires_at: now + SESSION_TTL_MS,
            },
        );
        Ok(token)
    }

    pub fn session_user(&self, token: &str) -> Result<&UserAccount, CaError> {
        let now = self.now();
        let session = self
            .sessions
            .get(token)
            .filter(|s| s.expires_at > now)
            .ok_or(CaError::Unauthorized)?;
        self.accounts
            .get(&session.user_id)
            .ok_or(CaError::Unauthorized)
    }

    fn require_ca_admin(&self, token: &str) -> Result<(), CaError> {
        match self.session_user(token)?.role {
            Role::CAAdministrator => Ok(()),
            _ => Err(CaError::Unauthorized),
        }
    }

    pub fn account(&self, user_id: u64) -> Option<&UserAccount> {
        self.accounts.get(&user_id)
    }

    pub fn list_users(&self, token: &str) -> Result<Vec<UserSummary>, CaError> {
        self.require_ca_admin(token)?;
        Ok(self.accounts.values().map(UserSummary::from).collect())
    }

    /// Changes a role. Any confirmed role gets a freshly issued certificate,
    /// whose key pair is held for one-time pickup by the holder; demotion to
    /// UnconfirmedUser revokes the active certificate.
    pub fn assign_role(
        &mut self,
        token: &str,
        user_id: u64,
        role: Role,
    ) -> Result<Option<Certificate>, CaError> {
        self.require_ca_admin(token)?;
        if !self.accounts.contains_key(&user_id) {
            return Err(CaError::UnknownUser(user_id));
        }
        if user_id == self.registry.root().holder_id {
            return Err(CaError::Forbidden(
                "the CA administrator's own role is fixed".into(),
            ));
        }
        self.accounts.get_mut(&user_id).expect("checked").role = role;
        let issued = if role == Role::UnconfirmedUser {
            let old = self.accounts[&user_id].active_cert;
            if let Some(cert_id) = old {
                self.revoke(cert_id)?;
            }
            let acc = self.accounts.get_mut(&user_id).expect("checked");
            acc.active_cert = None;
            acc.renewal_required = false;
            self.pending_keys.remove(&user_id);
            None
        } else {
            let issued = self.issue_certificate(user_id)?;
            let cert = issued.certificate.clone();
            self.pending_keys.insert(user_id, issued);
            Some(cert)
        };
        self.save_accounts()?;
        Ok(issued)
    }

    /// Generates a key pair and certificate from the holder's profile,
    /// revoking any certificate the holder already had.
    pub fn issue_certificate(&mut self, user_id: u64) -> Result<IssuedCertificate, CaError> {
        let account = self
            .accounts
            .get(&user_id)
            .ok_or(CaError::UnknownUser(user_id))?;
        if account.role == Role::UnconfirmedUser {
            return Err(CaError::UnconfirmedHolder);
        }
        let previous = account.active_cert;
        let keypair = KeyPair::generate(self.config.curve);
        let certificate = Certificate {
            cert_id: self.next_cert_id,
            holder_id: user_id,
            holder_name: account.profile.full_name(),
            holder_email: account.profile.email.clone(),
            holder_org: account.profile.organization.clone(),
            holder_category: account.role,
            public_key: keypair.public_key().clone(),
            expires_at: Some(self.now() + self.config.cert_lifetime_ms),
            keygen_algorithm: SchemeId::for_curve(self.config.curve)
                .algorithm_name()
                .into(),
            ca_metadata: self.config.issuer.clone(),
        };
        self.next_cert_id += 1;
        if let Some(old) = previous {
            self.revoke(old)?;
        }
        self.append(
            ChainKind::All,
            Payload::CertificateHash {
                cert_hash: certificate.hash(),
            },
            Some(&certificate),
        )?;
        let acc = self.accounts.get_mut(&user_id).expect("checked");
        acc.active_cert = Some(certificate.cert_id);
        acc.renewal_required = false;
        self.save_accounts()?;
        Ok(IssuedCertificate {
            certificate,
            keypair,
        })
    }

    /// Appends a certificate to the revoked chain unless it is already there.
    pub fn revoke(&mut self, cert_id: CertId) -> Result<bool, CaError> {
        if cert_id == self.registry.root().cert_id {
            return Err(CaError::Forbidden(
                "the CA certificate cannot be revoked".into(),
            ));
        }
        let cert = self
            .registry
            .certificate(cert_id)
            .cloned()
            .ok_or_else(|| CaError::UnknownCertificate(cert_id.to_string()))?;
        let h = cert.hash();
        if self.registry.is_revoked(&h) {
            return Ok(false);
        }
        self.append(
            ChainKind::Revoked,
            Payload::CertificateHash { cert_hash: h },
            Some(&cert),
        )?;
        for acc in self.accounts.values_mut() {
            if acc.active_cert == Some(cert_id) {
                acc.active_cert = None;
            }
        }
        Ok(true)
    }

    /// Hands the holder their private key once.
    pub fn claim_key(&mut self, token: &str) -> Result<ClaimedKey, CaError> {
        let user_id = self.session_user(token)?.user_id;
        let issued = self
            .pending_keys
            .remove(&user_id)
            .ok_or(CaError::NoPendingKey)?;
        Ok(ClaimedKey {
            cert_id: issued.certificate.cert_id,
            curve: issued.keypair.curve_id(),
            private_key: hex::encode(issued.keypair.private_key().to_bytes()),
            certificate: issued.certificate.to_text(),
        })
    }

    /// Issues a replacement for an expired certificate, on the holder's request.
    pub fn renew(&mut self, token: &str) -> Result<Certificate, CaError> {
        let acc = self.session_user(token)?;
        let user_id = acc.user_id;
        if !acc.renewal_required {
            return Err(CaError::Forbidden("no renewal is due".into()));
        }
        let issued = self.issue_certificate(user_id)?;
        let cert = issued.certificate.clone();
        self.pending_keys.insert(user_id, issued);
        Ok(cert)
    }

    pub fn check_validity(&self, cert_hash: &Digest, now: Millis) -> Validity {
        self.registry.check_validity(cert_hash, now)
    }

    /// Validity lookup that also revokes an expired certificate it finds.
    pub fn check_validity_and_expire(&mut self, cert_hash: &Digest) -> Result<Validity, CaError> {
        let now = self.now();
        let v = self.registry.check_validity(cert_hash, now);
        if v == Validity::Unknown
            && self.registry.is_issued(cert_hash)
            && self
                .registry
                .certificate_by_hash(cert_hash)
                .is_some_and(|c| c.expired_at(now))
        {
            self.check_expiry(now)?;
            return Ok(self.registry.check_validity(cert_hash, now));
        }
        Ok(v)
    }

    /// Revokes every overdue certificate; returns their numbers.
    pub fn check_expiry(&mut self, now: Millis) -> Result<Vec<CertId>, CaError> {
        let overdue: Vec<(CertId, u64)> = self
            .registry
            .overdue(now)
            .into_iter()
            .map(|c| (c.cert_id, c.holder_id))
            .collect();
        for &(cert_id, holder) in &overdue {
            self.revoke(cert_id)?;
            if let Some(acc) = self.accounts.get_mut(&holder) {
                if acc.role != Role::UnconfirmedUser && acc.active_cert.is_none() {
                    acc.renewal_required = true;
                }
            }
        }
        if !overdue.is_empty() {
            self.save_accounts()?;
        }
        Ok(overdue.into_iter().map(|(c, _)| c).collect())
    }

    pub fn chain_update(&self, kind: ChainKind, from: usize) -> CaUpdate {
        self.registry.update_from(kind, from)
    }

    pub fn certificate_text(&self, cert_id: CertId) -> Option<String> {
        self.registry.certificate(cert_id).map(Certificate::to_text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::ManualClock;

    fn profile(name: &str) -> Profile {
        Profile {
            first_name: name.into(),
            last_name: "Tester".into(),
            organization: "Archive".into(),
            email: format!("{name}@example.org"),
        }
    }

    fn ca(clock: Arc<ManualClock>) -> CertificateAuthority {
        CertificateAuthority::bootstrap(
            CaConfig::default(),
            "root",
            "rootpassword",
            profile("Root"),
            None,
            clock,
        )
        .unwrap()
    }

    #[test]
    fn role_names_parse() {
        for r in Role::ALL {
            assert_eq!(Role::parse(r.name()), Some(r));
        }
        assert_eq!(Role::parse("ca-admin"), Some(Role::CAAdministrator));
        assert_eq!(Role::parse("expert"), Some(Role::Expert));
        assert_eq!(Role::parse("nobody"), None);
    }

    #[test]
    fn password_hash_depends_on_salt_and_password() {
        let a = hash_password(&[0; 16], "password1");
        assert_eq!(a, hash_password(&[0; 16], "password1"));
        assert_ne!(a, hash_password(&[1; 16], "password1"));
        assert_ne!(a, hash_password(&[0; 16], "password2"));
    }

    #[test]
    fn registration_and_login() {
        let clock = Arc::new(ManualClock::new(1_000));
        let mut ca = ca(clock);
        let acc = ca
            .register_user("alice", "correct horse", profile("Alice"))
            .unwrap();
        assert_eq!(acc.role, Role::UnconfirmedUser);
        assert!(acc.active_cert.is_none());
        assert!(!acc.salt.contains("correct"));
        assert!(matches!(
            ca.register_user("alice", "another pass", profile("A")),
            Err(CaError::DuplicateUsername(_))
        ));
        assert!(matches!(
            ca.register_user("bob", "short", profile("Bob")),
            Err(CaError::WeakPassword)
        ));
        assert!(ca.authenticate("alice", "correct horse").is_some());
        assert!(ca.authenticate("alice", "wrong horse").is_none());
        assert!(matches!(
            ca.login("alice", "nope"),
            Err(CaError::BadCredentials)
        ));
    }

    #[test]
    fn certificate_text_roundtrip() {
        let clock = Arc::new(ManualClock::new(1_000));
        let ca = ca(clock);
        let root = ca.root_certificate();
        let text = root.to_text();
        assert_eq!(text.lines().count(), 10);
        assert!(text.contains("Valid until: never\n"));
        assert_eq!(&Certificate::parse(&text).unwrap(), root);
        assert!(Certificate::parse(&text.replace("Issuer", "Issued by")).is_err());
        assert!(Certificate::parse(&text[..text.len() - 1]).is_err());
    }

    #[test]
    fn role_assignment_issues_and_revokes() {
        let clock = Arc::new(ManualClock::new(1_000));
        let mut ca = ca(clock.clone());
        let admin = ca.login("root", "rootpassword").unwrap();
        let user = ca
            .register_user("eve", "password123", profile("Eve"))
            .unwrap();
        let user_token = ca.login("eve", "password123").unwrap();
        assert!(matches!(
            ca.assign_role(&user_token, user.user_id, Role::Expert),
            Err(CaError::Unauthorized)
        ));
        let all_before = ca.registry().chain(ChainKind::All).len();
        let cert = ca
            .assign_role(&admin, user.user_id, Role::Expert)
            .unwrap()
            .unwrap();
        assert_eq!(ca.registry().chain(ChainKind::All).len(), all_before + 1);
        assert_eq!(cert.holder_category, Role::Expert);
        assert_eq!(
            ca.check_validity(&cert.hash(), clock.now_ms()),
            Validity::Valid
        );

        let claimed = ca.claim_key(&user_token).unwrap();
        let id = claimed.into_identity().unwrap();
        assert_eq!(id.public_key(), &cert.public_key);
        assert!(matches!(
            ca.claim_key(&user_token),
            Err(CaError::NoPendingKey)
        ));

        let second = ca
            .assign_role(&admin, user.user_id, Role::User)
            .unwrap()
            .unwrap();
        assert_eq!(
            ca.check_validity(&cert.hash(), clock.now_ms()),
            Validity::Revoked
        );
        assert_eq!(
            ca.check_validity(&second.hash(), clock.now_ms()),
            Validity::Valid
        );

        ca.assign_role(&admin, user.user_id, Role::UnconfirmedUser)
            .unwrap();
        assert_eq!(
            ca.check_validity(&second.hash(), clock.now_ms()),
            Validity::Revoked
        );
        assert!(ca.account(user.user_id).unwrap().active_cert.is_none());
        ca.registry().verify().unwrap();
    }

    #[test]
    fn expiry_sweep_is_idempotent_and_spares_the_root() {
        let clock = Arc::new(ManualClock::new(1_000));
        let mut ca = ca(clock.clone());
        let admin = ca.login("root", "rootpassword").unwrap();
        let u = ca.register_user("u1", "password123", profile("U")).unwrap();
        let cert = ca
            .assign_role(&admin, u.user_id, Role::User)
            .unwrap()
            .unwrap();
        assert!(ca.check_expiry(clock.now_ms()).unwrap().is_empty());
        clock.advance(DEFAULT_CERT_LIFETIME_MS);
        assert_eq!(
            ca.check_validity(&cert.hash(), clock.now_ms()),
            Validity::Unknown
        );
        assert_eq!(ca.check_expiry(clock.now_ms()).unwrap(), vec![cert.cert_id]);
        assert!(ca.check_expiry(clock.now_ms()).unwrap().is_empty());
        assert!(ca.account(u.user_id).unwrap().renewal_required);
        assert_eq!(
            ca.check_validity(&ca.root_certificate().hash(), clock.now_ms()),
            Validity::Valid
        );
    }

    #[test]
    fn replica_follows_updates_and_rejects_tampering() {
        let clock = Arc::new(ManualClock::new(1_000));
        let mut ca = ca(clock);
        let admin = ca.login("root", "rootpassword").unwrap();
        for i in 0..3 {
            let u = ca
                .register_user(&format!("u{i}"), "password123", profile("U"))
                .unwrap();
            ca.assign_role(&admin, u.user_id, Role::User).unwrap();
        }
        let mut replica = CertRegistry::new(ca.root_certificate().clone());
        let mut update = ca.chain_update(ChainKind::All, 0);
        update.rows[2].payload[5] ^= 1;
        assert!(matches!(
            replica.apply(&update),
            Err(CaError::ChainVerificationFailed { .. })
        ));
        assert_eq!(replica.chain(ChainKind::All).len(), 0);
        let added = replica.apply(&ca.chain_update(ChainKind::All, 0)).unwrap();
        assert_eq!(added, ca.registry().chain(ChainKind::All).len());
        assert_eq!(
            replica.apply(&ca.chain_update(ChainKind::All, 2)).unwrap(),
            0
        );
        replica.verify().unwrap();
    }
}
