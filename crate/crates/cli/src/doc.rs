//! Document workflow commands. Every mutation is a request signed with the
//! local identity and posted to the node.

use std::collections::BTreeMap;

use archain_core::clock::{format_ms, Clock, SystemClock, HOUR_MS};
use archain_core::crypto::{hash, SignatureValue};
use archain_core::identity::Identity;
use archain_core::ledger::Status;
use archain_core::node::{requests, Envelope};
use archain_core::workflow::{Document, Verdict};

use crate::args::{DocCmd, SubmitArgs};
use crate::config::Settings;
use crate::error::{CliError, CliResult};
use crate::files::load_identity;
use crate::http::Http;
use crate::output::{opt, Out};

pub fn doc_record(out: &Out, d: &Document) {
    let title = d.metadata.get("title").cloned().unwrap_or_default();
    let mut text = format!("{:<24} {:<14} {}", d.doc_id, d.status.name(), title);
    if let Some(e) = d.assigned_expert_id {
        text.push_str(&format!("  expert {e}"));
    }
    if let (Some(deadline), Status::OnExamination) = (d.deadline, d.status) {
        text.push_str(&format!("  due {}", format_ms(deadline)));
    }
    if let Some(i) = d.ledger_index {
        text.push_str(&format!("  ledger row {i}"));
    }
    out.record(
        text,
        &[
            ("doc_id", d.doc_id.clone()),
            ("status", d.status.name().into()),
            ("title", title),
            ("creator_id", d.creator_id.to_string()),
            ("expert_id", opt(d.assigned_expert_id)),
            ("deadline", opt(d.deadline)),
            ("ledger_index", opt(d.ledger_index)),
            ("content_digest", d.content_digest.to_hex()),
        ],
    );
}

fn parse_meta(pairs: &[String]) -> CliResult<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for p in pairs {
        let (k, v) = p
            .split_once('=')
            .ok_or_else(|| CliError::usage(format!("--meta expects KEY=VALUE, got {p:?}")))?;
        out.insert(k.trim().to_string(), v.to_string());
    }
    Ok(out)
}

struct Client<'a> {
    base: &'a str,
    http: &'a Http,
}

impl Client<'_> {
    fn document(&self, id: &str) -> CliResult<Document> {
        self.http
            .get_json(&format!("{}/documents/{id}", self.base), None)
    }

    fn post(&self, path: &str, env: &Envelope) -> CliResult<Document> {
        let reply = self
            .http
            .post_envelope(&format!("{}{path}", self.base), env)?;
        Ok(serde_json::from_value(reply.body)?)
    }
}

fn identity(s: &Settings) -> CliResult<Identity> {
    load_identity(s.identity_path()?)
}

fn now() -> u64 {
    SystemClock.now_ms()
}

pub fn run(s: &Settings, cmd: DocCmd, http: &Http, out: &Out) -> CliResult {
    let c = Client {
        base: s.node_url()?,
        http,
    };
    let doc = match cmd {
        DocCmd::Submit(a) => submit(s, a, &c)?,
        DocCmd::List { status } => {
            let url = match status {
                Some(st) => {
                    let st = Status::parse(&st)
                        .ok_or_else(|| CliError::usage(format!("unknown status {st:?}")))?;
                    format!("{}/documents?status={}", c.base, st.name())
                }
                None => format!("{}/documents", c.base),
            };
            let docs: Vec<Document> = http.get_json(&url, None)?;
            for d in &docs {
                doc_record(out, d);
            }
            return Ok(());
        }
        DocCmd::Show { id } => {
            let d = c.document(&id)?;
            doc_record(out, &d);
            out.block(&d.audit_text());
            return Ok(());
        }
        DocCmd::Assign {
            id,
            expert,
            window_hours,
        } => {
            let me = identity(s)?;
            let d = c.document(&id)?;
            let env = requests::assign(
                &me,
                now(),
                &id,
                &d.content_digest,
                expert,
                window_hours.map(|h| h * HOUR_MS),
            );
            c.post(&format!("/documents/{id}/assign"), &env)?
        }
        DocCmd::Approve { id } => decide(s, &c, &id, Verdict::Approved)?,
        DocCmd::Reject { id } => decide(s, &c, &id, Verdict::Rejected)?,
        DocCmd::Archive { id, authorization } => {
            let me = identity(s)?;
            let d = c.document(&id)?;
            let auth = authorization
                .as_deref()
                .map(SignatureValue::from_hex)
                .transpose()
                .map_err(|e| CliError::usage(format!("--authorization: {e}")))?;
            let env = requests::archive(&me, now(), &id, &d.content_digest, auth);
            c.post(&format!("/documents/{id}/archive"), &env)?
        }
    };
    doc_record(out, &doc);
    Ok(())
}

fn submit(s: &Settings, a: SubmitArgs, c: &Client) -> CliResult<Document> {
    let me = identity(s)?;
    let content = std::fs::read(&a.file)
        .map_err(|e| CliError::failed("IoError", format!("{}: {e}", a.file.display())))?;
    let doc_id =
        a.id.unwrap_or_else(|| format!("doc-{}", &hash(&content).to_hex()[..16]));
    let mut metadata = parse_meta(&a.meta)?;
    metadata.insert("title".into(), a.title);
    metadata.insert("author".into(), a.author);
    metadata.insert("organization".into(), a.organization);
    if let Some(name) = a.file.file_name().and_then(|n| n.to_str()) {
        metadata
            .entry("file_name".into())
            .or_insert_with(|| name.to_string());
    }
    let env = requests::submit(&me, now(), &doc_id, metadata, &content);
    c.post("/documents", &env)
}

fn decide(s: &Settings, c: &Client, id: &str, verdict: Verdict) -> CliResult<Document> {
    let me = identity(s)?;
    let d = c.document(id)?;
    let env = requests::decide(&me, now(), id, &d.content_digest, verdict);
    c.post(&format!("/documents/{id}/decision"), &env)
}
