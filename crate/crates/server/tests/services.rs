use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use archain_core::ca::{
    CaConfig, CaUpdate, CertificateAuthority, ChainKind, Profile, Role, Validity,
};
use archain_core::clock::SystemClock;
use archain_core::crypto::{KeyPair, DEFAULT_CURVE};
use archain_core::identity::Identity;
use archain_core::ledger::{read_ledger_file, Payload, Status};
use archain_core::node::{requests, Envelope, MsgType, NodeConfig};
use archain_core::workflow::{Document, Verdict};
use archain_server::ca_api::{self, CaState, LoginResponse, RoleResponse, ValidityResponse};
use archain_server::node_api::{NodeServerConfig, NodeService, ServiceError};
use archain_server::peer::Participant;
use archain_server::ErrorReply;
use axum::routing::get;
use axum::{Json, Router};
use serde_json::json;

const SYNC_TOKEN: &str = "node-sync-token";
const WAIT: Duration = Duration::from_secs(20);

async fn listen(router: Router) -> SocketAddr {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, router).await.unwrap() });
    addr
}

fn profile(name: &str) -> Profile {
    Profile {
        first_name: name.into(),
        last_name: "Example".into(),
        organization: "City Archive".into(),
        email: format!("{name}@archive.example"),
    }
}

fn metadata(title: &str) -> BTreeMap<String, String> {
    BTreeMap::from([
        ("title".into(), title.into()),
        ("author".into(), "B. Writer".into()),
        ("organization".into(), "City Archive".into()),
    ])
}

struct Ca {
    state: CaState,
    url: String,
    admin_token: String,
    _dir: tempfile::TempDir,
}

impl Ca {
    async fn start() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let ca = CertificateAuthority::bootstrap(
            CaConfig::default(),
            "root",
            "root-password",
            profile("root"),
            Some(dir.path()),
            Arc::new(SystemClock),
        )
        .unwrap();
        let state = CaState::new(ca, SYNC_TOKEN);
        let admin_token = state.lock().login("root", "root-password").unwrap();
        let addr = listen(ca_api::router(state.clone())).await;
        Self {
            state,
            url: format!("http://{addr}"),
            admin_token,
            _dir: dir,
        }
    }

    /// Registers, assigns and claims in-process.
    fn enroll(&self, name: &str, role: Role) -> (u64, Identity) {
        let mut ca = self.state.lock();
        let acc = ca
            .register_user(name, "password-123", profile(name))
            .unwrap();
        ca.assign_role(&self.admin_token, acc.user_id, role)
            .unwrap();
        let token = ca.login(name, "password-123").unwrap();
        let mut id = ca.claim_key(&token).unwrap().into_identity().unwrap();
        if role == Role::Expert {
            id.append_key = Some(KeyPair::generate(DEFAULT_CURVE));
        }
        (acc.user_id, id)
    }
}

struct Deployment {
    ca: Ca,
    node: NodeService,
    url: String,
    ws: String,
    admin: Identity,
    user: Identity,
    expert: (u64, Identity),
    _dir: tempfile::TempDir,
}

impl Deployment {
    async fn start() -> Self {
        let ca = Ca::start().await;
        let (_, admin) = ca.enroll("admin", Role::Administrator);
        let (_, user) = ca.enroll("user", Role::User);
        let expert = ca.enroll("expert", Role::Expert);
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = NodeServerConfig::new(NodeConfig::new(dir.path()));
        cfg.ca_url = Some(ca.url.clone());
        cfg.ca_token = SYNC_TOKEN.into();
        let node = NodeService::open(&cfg, admin.clone()).await.unwrap();
        assert_eq!(
            node.lock().chain().len(),
            1,
            "genesis written after the first sync"
        );
        let addr = listen(node.router()).await;
        Self {
            ca,
            node,
            url: format!("http://{addr}"),
            ws: format!("ws://{addr}/ws"),
            admin,
            user,
            expert,
            _dir: dir,
        }
    }

    fn root(&self) -> archain_core::ca::Certificate {
        self.ca.state.lock().root_certificate().clone()
    }

    async fn post(&self, path: &str, env: &Envelope) -> (u16, Envelope) {
        let resp = reqwest::Client::new()
            .post(format!("{}{path}", self.url))
            .json(env)
            .send()
            .await
            .unwrap();
        (resp.status().as_u16(), resp.json().await.unwrap())
    }

    async fn document(&self, id: &str) -> Document {
        reqwest::get(format!("{}/documents/{id}", self.url))
            .await
            .unwrap()
            .json()
            .await
            .unwrap()
    }

    /// Drives one document to Added over HTTP.
    async fn archive_one(&self, id: &str) {
        let now = now();
        let env = requests::submit(&self.user, now, id, metadata(id), id.as_bytes());
        assert_eq!(self.post("/documents", &env).await.0, 201);
        let d = self.document(id).await.content_digest;
        let env = requests::assign(&self.admin, now, id, &d, self.expert.0, None);
        assert_eq!(
            self.post(&format!("/documents/{id}/assign"), &env).await.0,
            200
        );
        let env = requests::decide(&self.expert.1, now, id, &d, Verdict::Approved);
        assert_eq!(
            self.post(&format!("/documents/{id}/decision"), &env)
                .await
                .0,
            200
        );
        let env = requests::archive(&self.admin, now, id, &d, None);
        let (code, reply) = self.post(&format!("/documents/{id}/archive"), &env).await;
        assert_eq!(code, 200, "{:?}", reply.error_info());
    }
}

fn now() -> u64 {
    use archain_core::clock::Clock;
    SystemClock.now_ms()
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn ca_http_api() {
    let ca = Ca::start().await;
    let http = reqwest::Client::new();
    let url = |p: &str| format!("{}{p}", ca.url);

    let resp = http
        .post(url("/register"))
        .json(
            &json!({ "username": "dana", "password": "password-123", "profile": profile("dana") }),
        )
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status(), 201);
    let dup = http
        .post(url("/register"))
        .json(&json!({ "username": "dana", "password": "password-123" }))
        .send()
        .await
        .unwrap();
    assert_eq!(dup.status(), 409);
    assert_eq!(
        dup.json::<ErrorReply>().await.unwrap().code,
        "DuplicateUsername"
    );

    let bad = http
        .post(url("/login"))
        .json(&json!({ "username": "dana", "password": "nope-nope" }))
        .send()
        .await
        .unwrap();
    assert_eq!(bad.status(), 401);
    let login: LoginResponse = http
        .post(url("/login"))
        .json(&json!({ "username": "dana", "password": "password-123" }))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert_eq!(login.role, Role::UnconfirmedUser);

    // Users cannot list or assign; the CA administrator can.
    let r = http
        .get(url("/users"))
        .bearer_auth(&login.token)
        .send()
        .await
        .unwrap();
    assert_eq!(r.status(), 401);
    let r = http.get(url("/users")).send().await.unwrap();
    assert_eq!(r.status(), 401);
    let users: Vec<serde_json::Value> = http
        .get(url("/users"))
        .bearer_auth(&ca.admin_token)
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert_eq!(users.len(), 2);

    let role: RoleResponse = http
        .post(url(&format!("/users/{}/role", login.user_id)))
        .bearer_auth(&ca.admin_token)
        .json(&json!({ "role": "Expert" }))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    let cert_text = role.certificate.unwrap();
    let cert = archain_core::ca::Certificate::parse(&cert_text).unwrap();

    let claim = http
        .post(url("/keys/claim"))
        .bearer_auth(&login.token)
        .send()
        .await
        .unwrap();
    assert_eq!(claim.status(), 200);
    let claimed: archain_core::ca::ClaimedKey = claim.json().await.unwrap();
    let id = claimed.into_identity().unwrap();
    assert_eq!(id.public_key(), &cert.public_key);
    let again = http
        .post(url("/keys/claim"))
        .bearer_auth(&login.token)
        .send()
        .await
        .unwrap();
    assert_eq!(
        again.json::<ErrorReply>().await.unwrap().code,
        "NoPendingKey"
    );

    let v: ValidityResponse = reqwest::get(url(&format!("/certificates/{}/validity", cert.hash())))
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert_eq!(v.validity, Validity::Valid);
    let text = reqwest::get(url(&format!("/certificates/{}/download", cert.cert_id)))
        .await
        .unwrap()
        .text()
        .await
        .unwrap();
    assert_eq!(text, cert_text);

    // Demotion revokes.
    http.post(url(&format!("/users/{}/role", login.user_id)))
        .bearer_auth(&ca.admin_token)
        .json(&json!({ "role": "UnconfirmedUser" }))
        .send()
        .await
        .unwrap();
    let v: ValidityResponse = reqwest::get(url(&format!("/certificates/{}/validity", cert.hash())))
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert_eq!(v.validity, Validity::Revoked);

    // Chains need a bearer token: the sync token or any session.
    assert_eq!(
        http.get(url("/chains/all")).send().await.unwrap().status(),
        401
    );
    let wrong = http
        .get(url("/chains/all"))
        .bearer_auth("guess")
        .send()
        .await
        .unwrap();
    assert_eq!(wrong.status(), 401);
    let update: CaUpdate = http
        .get(url("/chains/revoked?from=0"))
        .bearer_auth(SYNC_TOKEN)
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert_eq!(update.rows.len(), 2);
    let root_text = reqwest::get(url("/ca/certificate"))
        .await
        .unwrap()
        .text()
        .await
        .unwrap();
    let mut reg = archain_core::ca::CertRegistry::new(
        archain_core::ca::Certificate::parse(&root_text).unwrap(),
    );
    reg.apply(&update).unwrap();
    assert!(reg.is_revoked(&cert.hash()));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn node_syncs_from_the_ca() {
    let ca = Ca::start().await;
    let (_, admin) = ca.enroll("admin", Role::Administrator);
    for i in 0..7 {
        ca.enroll(&format!("member{i}"), Role::User);
    }
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = NodeServerConfig::new(NodeConfig::new(dir.path()));
    cfg.ca_url = Some(ca.url.clone());

    cfg.ca_token = "wrong".into();
    let node = NodeService::open(&cfg, admin.clone()).await.unwrap();
    match node.sync_ca().await {
        Err(ServiceError::Ca(e)) => assert_eq!(e.code(), "Unauthorized"),
        other => panic!("{other:?}"),
    }
    assert!(node.lock().chain().is_empty());
    drop(node);

    cfg.ca_token = SYNC_TOKEN.into();
    let node = NodeService::open(&cfg, admin).await.unwrap();
    let ca_len = ca.state.lock().registry().chain(ChainKind::All).len();
    assert_eq!(ca_len, 10);
    assert_eq!(node.lock().registry().chain(ChainKind::All).len(), ca_len);
    node.lock().registry().verify().unwrap();
    assert_eq!(node.sync_ca().await.unwrap(), 0);

    // The replica is written in the CA store layout and reloads on its own.
    let offline = archain_core::ca::CertRegistry::load_dir(&cfg.node.ca_dir(), None).unwrap();
    assert_eq!(offline.chain(ChainKind::All).len(), ca_len);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn mutated_ca_response_raises_an_alarm() {
    let ca = Ca::start().await;
    let (_, admin) = ca.enroll("admin", Role::Administrator);
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = NodeServerConfig::new(NodeConfig::new(dir.path()));
    cfg.ca_url = Some(ca.url.clone());
    cfg.ca_token = SYNC_TOKEN.into();
    let node = NodeService::open(&cfg, admin.clone()).await.unwrap();
    let before = node.lock().registry().chain(ChainKind::All).rows().to_vec();
    drop(node);

    ca.enroll("late", Role::User);
    let mut update = ca.state.lock().chain_update(ChainKind::All, before.len());
    update.rows[0].payload = Payload::CertificateHash {
        cert_hash: archain_core::crypto::hash(b"not a certificate"),
    }
    .encode();
    let root = ca.state.lock().root_certificate().to_text();
    let all_rows = before.len();
    let evil = Router::new()
        .route("/ca/certificate", get(move || async move { root }))
        .route(
            "/chains/{kind}",
            get(
                move |axum::extract::Path(kind): axum::extract::Path<String>| {
                    let update = update.clone();
                    async move {
                        match kind.as_str() {
                            "all" => Json(update),
                            _ => Json(CaUpdate {
                                chain: ChainKind::Revoked,
                                from: 1,
                                rows: vec![],
                                certificates: vec![],
                            }),
                        }
                    }
                },
            ),
        );
    let evil_addr = listen(evil).await;
    cfg.ca_url = Some(format!("http://{evil_addr}"));
    let node = NodeService::open(&cfg, admin).await.unwrap();
    let mut hub = node.subscribe();
    match node.sync_ca().await {
        Err(ServiceError::Node(e)) => assert_eq!(e.code(), "ChainVerificationFailed"),
        other => panic!("{other:?}"),
    }
    assert_eq!(
        node.lock().registry().chain(ChainKind::All).rows(),
        &before[..all_rows]
    );
    let alarm = hub.recv().await.unwrap();
    assert_eq!(alarm.kind(), Some(MsgType::Alarm));
    let alarms: Vec<serde_json::Value> = {
        let addr = listen(node.router()).await;
        reqwest::get(format!("http://{addr}/alarms"))
            .await
            .unwrap()
            .json()
            .await
            .unwrap()
    };
    assert!(!alarms.is_empty());
    assert_eq!(alarms.last().unwrap()["source"], "ca_sync");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn three_participants_follow_every_commit() {
    let d = Deployment::start().await;
    let mut peers = Vec::new();
    for _ in 0..3 {
        peers.push(
            Participant::connect(&d.ws, d.user.clone(), d.root())
                .await
                .unwrap(),
        );
    }
    for p in &mut peers {
        p.wait_until(WAIT, |r| r.chain().len() == 1).await.unwrap();
        assert_eq!(p.session().role, Role::User);
    }
    d.archive_one("deed-1").await;
    d.archive_one("deed-2").await;
    let ledger = read_ledger_file(&d.node.lock().config().ledger_path()).unwrap();
    assert_eq!(ledger.len(), 3);
    for p in &mut peers {
        p.wait_until(WAIT, |r| {
            r.chain().len() == 3
                && r.document("deed-2")
                    .is_some_and(|doc| doc.status == Status::Added)
        })
        .await
        .unwrap();
        assert_eq!(p.replica().chain().rows(), &ledger[..]);
        assert!(p.rejected().is_empty(), "{:?}", p.rejected());
        assert!(p.replica().suspicious().is_empty());
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn reconnecting_participant_catches_up() {
    let d = Deployment::start().await;
    let mut p = Participant::connect(&d.ws, d.user.clone(), d.root())
        .await
        .unwrap();
    d.archive_one("a").await;
    p.wait_until(WAIT, |r| r.chain().len() == 2).await.unwrap();
    let held = p.replica().chain().len();
    p.close().await;

    for i in 0..5 {
        d.archive_one(&format!("b{i}")).await;
    }
    let ledger = read_ledger_file(&d.node.lock().config().ledger_path()).unwrap();
    assert_eq!(ledger.len(), held + 5);

    // A fresh session starts from row 0; the replica re-verifies it all.
    let mut p = Participant::connect(&d.ws, d.expert.1.clone(), d.root())
        .await
        .unwrap();
    p.wait_until(WAIT, |r| r.chain().len() == ledger.len())
        .await
        .unwrap();
    assert_eq!(p.replica().chain().rows(), &ledger[..]);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn websocket_requests_and_refusals() {
    let d = Deployment::start().await;
    let mut user = Participant::connect(&d.ws, d.user.clone(), d.root())
        .await
        .unwrap();
    let env = requests::submit(&d.user, now(), "w1", metadata("w1"), b"over the socket");
    let reply = user
        .request(&env, MsgType::StatusUpdate, WAIT)
        .await
        .unwrap();
    assert!(reply.error_info().is_none(), "{:?}", reply.error_info());

    // Signed by someone other than the session holder.
    let digest = archain_core::crypto::hash(b"over the socket");
    let forged = requests::assign(&d.admin, now(), "w1", &digest, d.expert.0, None);
    let reply = user
        .request(&forged, MsgType::StatusUpdate, WAIT)
        .await
        .unwrap();
    assert_eq!(reply.error_info().unwrap().code, "AuthFailed");

    let mut tampered = requests::decide(&d.user, now(), "w1", &digest, Verdict::Approved);
    tampered.body["verdict"] = json!("Rejected");
    let reply = user
        .request(&tampered, MsgType::StatusUpdate, WAIT)
        .await
        .unwrap();
    assert_eq!(reply.error_info().unwrap().code, "BadSignature");

    // The session survives refusals.
    let ok = requests::chain_rows(&d.user, now(), 0);
    let reply = user.request(&ok, MsgType::ChainRows, WAIT).await.unwrap();
    assert!(reply.error_info().is_none());

    // A revoked certificate cannot open a session.
    {
        let mut ca = d.ca.state.lock();
        ca.revoke(d.expert.1.cert_id).unwrap();
    }
    d.node.sync_ca().await.unwrap();
    match Participant::connect(&d.ws, d.expert.1.clone(), d.root()).await {
        Err(archain_server::peer::PeerError::Refused(e)) => {
            assert_eq!(e.code, "RevokedCertificate")
        }
        Err(e) => panic!("{e}"),
        Ok(_) => panic!("revoked certificate accepted"),
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn http_errors_carry_error_envelopes() {
    let d = Deployment::start().await;
    let env = requests::submit(&d.user, now(), "h1", metadata("h1"), b"bytes");
    assert_eq!(d.post("/documents", &env).await.0, 201);
    let digest = d.document("h1").await.content_digest;
    let assign = requests::assign(&d.admin, now(), "h1", &digest, d.expert.0, None);

    let (code, reply) = d.post("/documents/other/assign", &assign).await;
    assert_eq!(
        (code, reply.error_info().unwrap().code.as_str()),
        (400, "Malformed")
    );
    let (code, _) = d.post("/documents/h1/decision", &assign).await;
    assert_eq!(code, 400);
    assert_eq!(d.post("/documents/h1/assign", &assign).await.0, 200);

    let by_user = requests::decide(&d.user, now(), "h1", &digest, Verdict::Approved);
    let (code, reply) = d.post("/documents/h1/decision", &by_user).await;
    assert_eq!(
        (code, reply.error_info().unwrap().code.as_str()),
        (403, "WrongRole")
    );

    let archive = requests::archive(&d.admin, now(), "h1", &digest, None);
    let (code, reply) = d.post("/documents/h1/archive", &archive).await;
    assert_eq!(
        (code, reply.error_info().unwrap().code.as_str()),
        (409, "WrongStatus")
    );

    let blob = reqwest::get(format!("{}/blobs/{digest}", d.url))
        .await
        .unwrap();
    assert_eq!(blob.bytes().await.unwrap().as_ref(), b"bytes");
    let missing = archain_core::crypto::hash(b"absent");
    let r = reqwest::get(format!("{}/blobs/{missing}", d.url))
        .await
        .unwrap();
    assert_eq!(r.status(), 404);

    let listed: Vec<Document> = reqwest::get(format!("{}/documents?status=Approved", d.url))
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert!(listed.is_empty());
    let listed: Vec<Document> = reqwest::get(format!("{}/documents?status=OnExamination", d.url))
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert_eq!(listed.len(), 1);
    let r = reqwest::get(format!("{}/documents?status=Lost", d.url))
        .await
        .unwrap();
    assert_eq!(r.status(), 400);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn ca_push_reaches_the_node_without_polling() {
    let d = Deployment::start().await;
    d.ca.state.notify_nodes(vec![d.url.clone()]);
    let before = d.node.lock().registry().chain(ChainKind::All).len();
    let (_, newcomer) = d.ca.enroll("newcomer", Role::User);
    let deadline = tokio::time::Instant::now() + WAIT;
    while d
        .node
        .lock()
        .registry()
        .certificate(newcomer.cert_id)
        .is_none()
    {
        assert!(tokio::time::Instant::now() < deadline, "push never arrived");
        tokio::time::sleep(Duration::from_millis(50)).await;
    }
    assert!(d.node.lock().registry().chain(ChainKind::All).len() > before);
}
