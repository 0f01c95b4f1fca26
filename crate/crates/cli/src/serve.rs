//! `ca init`, `ca serve` and `node serve`.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use archain_core::ca::{CaConfig, CaError, CertificateAuthority, Profile};
use archain_core::clock::{SystemClock, DAY_MS, HOUR_MS};
use archain_core::crypto::CurveId;
use archain_core::node::NodeConfig;
use archain_server::ca_api::{self, CaState};
use archain_server::node_api::{self, NodeServerConfig, NodeService, ServiceError};
use rand::RngCore;
use tokio::net::TcpListener;

use crate::args::{CaInitArgs, CaServeArgs, NodeServeArgs, ProfileArgs};
use crate::config::Settings;
use crate::error::{CliError, CliResult};
use crate::files::{load_identity, write_private};
use crate::output::Out;

const DEFAULT_CA_LISTEN: &str = "127.0.0.1:8090";
const DEFAULT_NODE_LISTEN: &str = "127.0.0.1:8080";
const DEFAULT_SWEEP_SECS: u64 = 60;

pub fn ca_error(e: CaError) -> CliError {
    CliError::failed(e.code(), e)
}

pub fn profile(p: ProfileArgs) -> Profile {
    Profile {
        first_name: p.first_name,
        last_name: p.last_name,
        organization: p.organization,
        email: p.email,
    }
}

fn runtime() -> CliResult<tokio::runtime::Runtime> {
    Ok(tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()?)
}

fn require_dir(flag: Option<PathBuf>, file: &Option<PathBuf>, what: &str) -> CliResult<PathBuf> {
    flag.or_else(|| file.clone())
        .ok_or_else(|| CliError::usage(format!("{what} directory required (--dir)")))
}

pub fn ca_init(s: &Settings, a: CaInitArgs, out: &Out) -> CliResult {
    let dir = require_dir(a.dir, &s.file.ca_server.dir, "CA")?;
    let curve = CurveId::from_name(&a.curve)
        .ok_or_else(|| CliError::usage(format!("unknown curve {:?}", a.curve)))?;
    let mut config = CaConfig {
        curve,
        ..CaConfig::default()
    };
    if let Some(days) = a.cert_lifetime_days {
        config.cert_lifetime_ms = days * DAY_MS;
    }
    let ca = CertificateAuthority::bootstrap(
        config,
        &a.admin_user,
        &a.admin_password,
        profile(a.profile),
        Some(&dir),
        Arc::new(SystemClock),
    )
    .map_err(ca_error)?;
    let token = a.sync_token.unwrap_or_else(|| {
        let mut buf = [0u8; 24];
        rand::rngs::OsRng.fill_bytes(&mut buf);
        hex::encode(buf)
    });
    write_private(&dir.join("sync_token"), token.as_bytes())?;
    let root = ca.root_certificate();
    out.record(
        format!(
            "CA initialized in {}\nroot certificate {} hash {}\nnode sync token in {}",
            dir.display(),
            root.cert_id,
            root.hash(),
            dir.join("sync_token").display()
        ),
        &[
            ("dir", dir.display().to_string()),
            ("root_cert_id", root.cert_id.to_string()),
            ("root_hash", root.hash().to_string()),
        ],
    );
    Ok(())
}

fn read_token(path: &Path) -> Option<String> {
    std::fs::read_to_string(path)
        .ok()
        .map(|t| t.trim().to_string())
}

async fn bind(addr: &str, out: &Out) -> CliResult<TcpListener> {
    let listener = TcpListener::bind(addr)
        .await
        .map_err(|e| CliError::failed("BindFailed", format!("{addr}: {e}")))?;
    let url = format!("http://{}", listener.local_addr()?);
    out.record(format!("listening on {url}"), &[("listening", url.clone())]);
    Ok(listener)
}

pub fn ca_serve(s: &Settings, a: CaServeArgs, out: &Out) -> CliResult {
    let section = &s.file.ca_server;
    let dir = require_dir(a.dir, &section.dir, "CA")?;
    let listen = a
        .listen
        .or_else(|| section.listen.clone())
        .unwrap_or_else(|| DEFAULT_CA_LISTEN.into());
    let token = a
        .sync_token
        .or_else(|| section.sync_token.clone())
        .or_else(|| read_token(&dir.join("sync_token")))
        .ok_or_else(|| {
            CliError::usage("no sync token; pass --sync-token or run `ca init` first")
        })?;
    let notify = if a.notify.is_empty() {
        section.notify.clone()
    } else {
        a.notify
    };
    let sweep = a
        .expiry_sweep_secs
        .or(section.expiry_sweep_secs)
        .unwrap_or(DEFAULT_SWEEP_SECS);
    let ca = CertificateAuthority::open(&dir, Arc::new(SystemClock)).map_err(ca_error)?;
    runtime()?.block_on(async move {
        let state = CaState::new(ca, token);
        if !notify.is_empty() {
            state.notify_nodes(notify);
        }
        state.spawn_expiry_sweep(Duration::from_secs(sweep.max(1)));
        let listener = bind(&listen, out).await?;
        ca_api::serve(state, listener).await?;
        Ok(())
    })
}

pub fn service_error(e: ServiceError) -> CliError {
    match e {
        ServiceError::Node(n) => CliError::failed(n.code(), n),
        ServiceError::Ca(c) => CliError::failed(c.code().to_string(), c),
        ServiceError::NoCa => {
            CliError::usage("the node needs a CA URL (--ca) or a CA certificate (--ca-root)")
        }
        ServiceError::Certificate(m) => CliError::failed("MalformedCertificate", m),
        ServiceError::Io(e) => e.into(),
    }
}

pub fn node_serve(s: &Settings, a: NodeServeArgs, out: &Out) -> CliResult {
    let section = &s.file.node_server;
    let dir = require_dir(a.dir, &section.dir, "node data")?;
    let identity = load_identity(s.identity_path()?)?;
    let mut node = NodeConfig::new(dir);
    node.guard_dir = a.guard_dir.or_else(|| section.guard_dir.clone());
    if let Some(n) = a.sign_len.or(section.sign_len) {
        node.guard.sign_len = n;
    }
    if let Some(n) = a.name_len.or(section.name_len) {
        node.guard.name_len = n;
    }
    if let Some(h) = a.examination_hours.or(section.examination_hours) {
        node.workflow.examination_window_ms = h * HOUR_MS;
    }
    let mut cfg = NodeServerConfig::new(node);
    cfg.ca_url = s.ca.clone();
    cfg.ca_token = a
        .ca_token
        .or_else(|| section.ca_token.clone())
        .unwrap_or_default();
    if cfg.ca_url.is_some() && cfg.ca_token.is_empty() {
        return Err(CliError::usage(
            "--ca-token is required to read the CA chains",
        ));
    }
    cfg.ca_root = a.ca_root.or_else(|| section.ca_root.clone());
    if let Some(p) = a.poll_secs.or(section.poll_secs) {
        cfg.poll_interval = Duration::from_secs(p.max(1));
    }
    if let Some(t) = a.tick_secs.or(section.tick_secs) {
        cfg.tick_interval = Duration::from_secs(t.max(1));
    }
    let listen = a
        .listen
        .or_else(|| section.listen.clone())
        .unwrap_or_else(|| DEFAULT_NODE_LISTEN.into());
    runtime()?.block_on(async move {
        let service = NodeService::open(&cfg, identity)
            .await
            .map_err(service_error)?;
        service.spawn_background(cfg.poll_interval, cfg.tick_interval);
        let listener = bind(&listen, out).await?;
        node_api::serve(service, listener).await?;
        Ok(())
    })
}
