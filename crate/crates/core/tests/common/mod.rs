#![allow(dead_code)]

pub mod fuzz;
pub mod oracle;
pub mod rows;

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use archain_core::ca::{CaConfig, CertificateAuthority, ChainKind, Profile, Role};
use archain_core::clock::{Clock, ManualClock, Millis};
use archain_core::crypto::{hash, CurveId, Digest, KeyPair};
use archain_core::identity::Identity;
use archain_core::ledger::Status;
use archain_core::node::{Node, NodeConfig};
use archain_core::workflow::TransitionProof;

pub const T0: Millis = 1_700_000_000_000;

pub fn profile(name: &str) -> Profile {
    Profile {
        first_name: name.into(),
        last_name: "Example".into(),
        organization: "State Archive".into(),
        email: format!("{}@archive.example", name.to_lowercase()),
    }
}

/// Deterministic key pair from a small seed.
pub fn keypair(seed: u64) -> KeyPair {
    let mut entropy = [0u8; 64];
    entropy[..8].copy_from_slice(&seed.to_be_bytes());
    entropy[8] = 0x5a;
    KeyPair::from_entropy(CurveId::Tc26A, &entropy).unwrap()
}

#[derive(Clone)]
pub struct Member {
    pub user_id: u64,
    pub username: String,
    pub identity: Identity,
}

/// A CA on a manual clock plus a helper to enroll members in a role.
pub struct World {
    pub clock: Arc<ManualClock>,
    pub ca: CertificateAuthority,
    pub admin_token: String,
    next_name: u32,
}

impl World {
    pub fn new() -> Self {
        Self::with_config(CaConfig::default(), None)
    }

    pub fn with_config(config: CaConfig, store: Option<&Path>) -> Self {
        let clock = Arc::new(ManualClock::new(T0));
        let ca = CertificateAuthority::bootstrap(
            config,
            "ca-admin",
            "ca-admin-password",
            profile("Root"),
            store,
            clock.clone(),
        )
        .unwrap();
        let mut world = Self {
            clock,
            ca,
            admin_token: String::new(),
            next_name: 0,
        };
        world.admin_token = world.ca.login("ca-admin", "ca-admin-password").unwrap();
        world
    }

    pub fn now(&self) -> Millis {
        self.clock.now_ms()
    }

    /// Moves the clock and logs the CA administrator in again, since
    /// sessions lapse after a few hours.
    pub fn advance(&mut self, ms: Millis) {
        self.clock.advance(ms);
        self.admin_token = self.ca.login("ca-admin", "ca-admin-password").unwrap();
    }

    /// Registers an account, grants `role` and claims the issued key.
    pub fn enroll(&mut self, role: Role) -> Member {
        self.next_name += 1;
        let username = format!("{}{}", role.name().to_lowercase(), self.next_name);
        let acc = self
            .ca
            .register_user(&username, "long enough password", profile(&username))
            .unwrap();
        self.ca
            .assign_role(&self.admin_token, acc.user_id, role)
            .unwrap();
        let token = self.ca.login(&username, "long enough password").unwrap();
        let mut identity = self.ca.claim_key(&token).unwrap().into_identity().unwrap();
        if role == Role::Expert {
            identity.append_key = Some(keypair(1000 + acc.user_id));
        }
        Member {
            user_id: acc.user_id,
            username,
            identity,
        }
    }

    /// Revokes a member's current certificate.
    pub fn revoke(&mut self, member: &Member) {
        self.ca.revoke(member.identity.cert_id).unwrap();
    }

    /// Builds a node whose replica holds both CA chains in full.
    pub fn node(&self, dir: &Path, admin: &Member) -> Node {
        let mut node = Node::open(
            NodeConfig::new(dir),
            admin.identity.clone(),
            self.ca.root_certificate().clone(),
            self.clock.clone(),
        )
        .unwrap();
        self.sync(&mut node);
        node.ensure_genesis().unwrap();
        node
    }

    pub fn sync(&self, node: &mut Node) {
        for kind in [ChainKind::All, ChainKind::Revoked] {
            let from = node.registry().chain(kind).len();
            let (res, _) = node.apply_ca_update(&self.ca.chain_update(kind, from));
            res.unwrap();
        }
    }
}

pub fn metadata(title: &str) -> BTreeMap<String, String> {
    BTreeMap::from([
        ("title".to_string(), title.to_string()),
        ("author".to_string(), "A. Author".to_string()),
        ("organization".to_string(), "State Archive".to_string()),
    ])
}

pub fn proof(
    member: &Member,
    doc_id: &str,
    status: Status,
    ts: Millis,
    digest: &Digest,
) -> TransitionProof {
    TransitionProof::sign(&member.identity, doc_id, status, ts, digest)
}

pub fn content(i: u64) -> (Vec<u8>, Digest) {
    let bytes = format!("document body number {i}\n").into_bytes();
    let d = hash(&bytes);
    (bytes, d)
}
