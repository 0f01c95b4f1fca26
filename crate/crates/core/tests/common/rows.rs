//! Signed test chains of final transactions and byte-level access to
//! every persisted row field.

use std::collections::BTreeMap;

use archain_core::clock::{Clock, ManualClock};
use archain_core::crypto::{hash, PublicKey, SignatureValue};
use archain_core::identity::{CertId, Identity};
use archain_core::ledger::{
    transition_message, Chain, Endorsement, FinalTransaction, LedgerRow, Status,
};

pub struct Parties {
    pub admin: Identity,
    pub user: Identity,
    pub expert: Identity,
}

impl Parties {
    pub fn new() -> Self {
        Self {
            admin: Identity::new(1, super::keypair(1)),
            user: Identity::new(2, super::keypair(2)),
            expert: Identity::new(3, super::keypair(3)),
        }
    }

    pub fn keys(&self) -> BTreeMap<CertId, PublicKey> {
        [&self.admin, &self.user, &self.expert]
            .into_iter()
            .map(|i| (i.cert_id, i.public_key().clone()))
            .collect()
    }

    pub fn tx(&self, doc: &str, created: u64) -> FinalTransaction {
        let digest = hash(doc.as_bytes());
        let mut metadata = super::metadata(doc);
        metadata.insert("content_digest".into(), digest.to_hex());
        let endorse = |who: &Identity, status, ts| Endorsement {
            cert_id: who.cert_id,
            signature: who.sign(&transition_message(doc, status, ts, &digest)),
        };
        FinalTransaction {
            doc_id: doc.into(),
            tx_timestamp: created + 20,
            doc_created_at: created,
            metadata,
            creator: endorse(&self.user, Status::Created, created),
            examined_at: created + 10,
            examiner: endorse(&self.expert, Status::Approved, created + 10),
            archiver: endorse(&self.admin, Status::Added, created + 20),
        }
    }

    pub fn chain(&self, rows: usize) -> Chain {
        let clock = ManualClock::new(super::T0);
        let mut chain = Chain::new();
        chain.genesis("Test archive", &self.admin, &clock).unwrap();
        for i in 1..rows {
            let created = clock.now_ms();
            clock.advance(50);
            chain
                .append(&self.tx(&format!("doc-{i}"), created), &self.admin, &clock)
                .unwrap();
        }
        chain
    }
}

/// Every persisted field of a row as bytes, with a setter for each.
pub fn field_bytes(row: &LedgerRow) -> Vec<(&'static str, Vec<u8>)> {
    vec![
        ("index", row.index.to_be_bytes().to_vec()),
        ("timestamp", row.timestamp.to_be_bytes().to_vec()),
        ("payload", row.payload.clone()),
        (
            "payload_signature",
            row.payload_signature.as_bytes().to_vec(),
        ),
        ("signer_cert_id", row.signer_cert_id.to_be_bytes().to_vec()),
        ("prev_hash", row.prev_hash.as_bytes().to_vec()),
        ("row_hash", row.row_hash.as_bytes().to_vec()),
    ]
}

pub fn with_field(row: &LedgerRow, field: &str, bytes: Vec<u8>) -> LedgerRow {
    let mut r = row.clone();
    let u64_of = |b: &[u8]| u64::from_be_bytes(b.try_into().unwrap());
    match field {
        "index" => r.index = u64_of(&bytes),
        "timestamp" => r.timestamp = u64_of(&bytes),
        "payload" => r.payload = bytes,
        "payload_signature" => r.payload_signature = SignatureValue::from_bytes(bytes),
        "signer_cert_id" => r.signer_cert_id = u64_of(&bytes),
        "prev_hash" => r.prev_hash = archain_core::crypto::Digest::from_slice(&bytes).unwrap(),
        "row_hash" => r.row_hash = archain_core::crypto::Digest::from_slice(&bytes).unwrap(),
        _ => unreachable!(),
    }
    r
}
