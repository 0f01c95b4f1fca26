//! Ledger, guard and certificate inspection. `chain verify` and
//! `guard check` run entirely offline.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use archain_core::ca::{CaUpdate, CertRegistry, Certificate, ChainKind, Validity};
use archain_core::clock::{format_ms, SystemClock};
use archain_core::guard::{CheckOutcome, Guard, GuardConfig, GuardError};
use archain_core::ledger::{read_ledger_file, verify_chain, LedgerError, LedgerRow, Payload};
use archain_core::node::{ChainRowsBody, Envelope};
use archain_server::ca_api::ValidityResponse;
use archain_server::node_api::NodeStatus;

use crate::args::{CertCmd, ChainCmd, GuardCmd, VerifyArgs};
use crate::config::Settings;
use crate::error::{CliError, CliResult};
use crate::http::Http;
use crate::output::{opt, Out};
use crate::serve::ca_error;

fn sibling(path: &Path, name: &str) -> PathBuf {
    path.parent()
        .map(|d| d.join(name))
        .unwrap_or_else(|| PathBuf::from(name))
}

fn read_certificate(path: &Path) -> CliResult<Certificate> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::failed("IoError", format!("{}: {e}", path.display())))?;
    Certificate::parse(&text).map_err(ca_error)
}

fn registry_error(e: archain_core::ca::CaError) -> CliError {
    match e {
        archain_core::ca::CaError::ChainVerificationFailed { .. } => {
            CliError::alarm("ChainVerificationFailed", e)
        }
        other => ca_error(other),
    }
}

pub fn chain(s: &Settings, cmd: ChainCmd, http: &Http, out: &Out) -> CliResult {
    match cmd {
        ChainCmd::Verify(a) => verify(a, out),
        ChainCmd::Show { ledger, from } => {
            let rows = match ledger {
                Some(path) => read_ledger_file(&path)
                    .map_err(|e| CliError::failed("LedgerError", e))?
                    .into_iter()
                    .skip(from)
                    .collect(),
                None => {
                    let env: Envelope =
                        http.get_json(&format!("{}/chain?from={from}", s.node_url()?), None)?;
                    serde_json::from_value::<ChainRowsBody>(env.body)?.rows
                }
            };
            for row in &rows {
                row_record(out, row);
            }
            Ok(())
        }
        ChainCmd::Export { out: dest, ca_out } => {
            let text = http.get_text(&format!("{}/ledger", s.node_url()?), None)?;
            std::fs::write(&dest, &text)?;
            let rows = text.lines().filter(|l| !l.trim().is_empty()).count();
            let mut fields = vec![
                ("ledger", dest.display().to_string()),
                ("rows", rows.to_string()),
            ];
            let mut msg = format!("{rows} rows written to {}", dest.display());
            if let Some(dir) = ca_out {
                let registry = fetch_registry(s, http)?;
                registry.save_dir(&dir).map_err(ca_error)?;
                msg.push_str(&format!("\nCA chains written to {}", dir.display()));
                fields.push(("ca_dir", dir.display().to_string()));
            }
            out.record(msg, &fields);
            Ok(())
        }
    }
}

/// Rebuilds the CA chains from the CA itself; each update is verified as
/// it is applied.
fn fetch_registry(s: &Settings, http: &Http) -> CliResult<CertRegistry> {
    let base = s.ca_url()?;
    let token = s.token()?;
    let root = Certificate::parse(&http.get_text(&format!("{base}/ca/certificate"), None)?)
        .map_err(ca_error)?;
    let mut registry = CertRegistry::new(root);
    for kind in [ChainKind::All, ChainKind::Revoked] {
        let update: CaUpdate =
            http.get_json(&format!("{base}/chains/{kind}?from=0"), Some(token))?;
        registry.apply(&update).map_err(registry_error)?;
    }
    Ok(registry)
}

fn row_record(out: &Out, row: &LedgerRow) {
    let (kind, summary) = match row.decode_payload() {
        Ok(Payload::Genesis { chain_title }) => ("genesis", chain_title),
        Ok(Payload::FinalTransaction(tx)) => {
            let title = tx.metadata.get("title").cloned().unwrap_or_default();
            ("document", format!("{} {title}", tx.doc_id))
        }
        Ok(Payload::CertificateHash { cert_hash }) => ("certificate", cert_hash.to_hex()),
        Err(e) => ("undecodable", e.to_string()),
    };
    out.record(
        format!(
            "{:>5}  {}  signer {:<4} {:<11} {}",
            row.index,
            format_ms(row.timestamp),
            row.signer_cert_id,
            kind,
            summary
        ),
        &[
            ("index", row.index.to_string()),
            ("timestamp", row.timestamp.to_string()),
            ("signer", row.signer_cert_id.to_string()),
            ("kind", kind.into()),
            ("summary", summary.clone()),
            ("row_hash", row.row_hash.to_hex()),
        ],
    );
}

fn verify(a: VerifyArgs, out: &Out) -> CliResult {
    let rows = match read_ledger_file(&a.ledger) {
        Ok(rows) => rows,
        Err(LedgerError::Parse { line, message }) => {
            let index = line.saturating_sub(1);
            out.record(
                format!("invalid at row {index}: unreadable line: {message}"),
                &[
                    ("valid", "false".into()),
                    ("rows", line.to_string()),
                    ("first_bad_index", index.to_string()),
                    ("reason", format!("unreadable line: {message}")),
                ],
            );
            return Err(CliError::alarm(
                "ChainVerificationFailed",
                format!("ledger line {line} is unreadable"),
            ));
        }
        Err(e) => return Err(CliError::failed("LedgerError", e)),
    };
    let ca_dir = a.ca_dir.unwrap_or_else(|| sibling(&a.ledger, "ca"));
    let root = a.ca_root.as_deref().map(read_certificate).transpose()?;
    let registry = CertRegistry::load_dir(&ca_dir, root).map_err(registry_error)?;
    let report = verify_chain(&rows, &registry);
    out.record(
        report.to_string(),
        &[
            ("valid", report.valid.to_string()),
            ("rows", report.rows.to_string()),
            ("first_bad_index", opt(report.first_bad_index)),
            ("reason", opt(report.reason.as_ref())),
        ],
    );
    if report.valid {
        Ok(())
    } else {
        Err(CliError::alarm("ChainVerificationFailed", report))
    }
}

fn guard_error(e: GuardError) -> CliError {
    match e {
        GuardError::Alarm(a) => CliError::alarm("Alarm", a.reason),
        GuardError::MissingSecretFile => CliError::alarm("MissingSecretFile", e),
        GuardError::BadParameters(m) => CliError::usage(m),
        other => CliError::failed("GuardError", other),
    }
}

fn open_guard(dir: &Path, alarm_log: PathBuf, config: GuardConfig) -> CliResult<Guard> {
    if !dir.is_dir() {
        return Err(CliError::failed(
            "IoError",
            format!("guard directory {} does not exist", dir.display()),
        ));
    }
    Guard::new(dir, alarm_log, config, Arc::new(SystemClock)).map_err(guard_error)
}

pub fn guard(cmd: GuardCmd, out: &Out) -> CliResult {
    match cmd {
        GuardCmd::Check {
            ledger,
            guard_dir,
            alarm_log,
            sign_len,
            name_len,
        } => {
            let mut config = GuardConfig::default();
            if let Some(n) = sign_len {
                config.sign_len = n;
            }
            if let Some(n) = name_len {
                config.name_len = n;
            }
            let log = alarm_log.unwrap_or_else(|| sibling(&ledger, "alarms.log"));
            let guard = open_guard(&guard_dir, log, config)?;
            match guard.check(&ledger).map_err(guard_error)? {
                CheckOutcome::Intact(sig) => out.record(
                    format!("intact; signature {}", sig.to_hex()),
                    &[("status", "intact".into()), ("signature", sig.to_hex())],
                ),
                CheckOutcome::Uninitialized => out.record(
                    "uninitialized: empty ledger and no secret file",
                    &[("status", "uninitialized".into())],
                ),
            }
            Ok(())
        }
        GuardCmd::Export {
            guard_dir,
            out: dest,
        } => {
            let guard = open_guard(
                &guard_dir,
                sibling(&guard_dir, "alarms.log"),
                GuardConfig::default(),
            )?;
            std::fs::create_dir_all(&dest)?;
            let path = guard.export(&dest).map_err(guard_error)?;
            out.record(
                format!("secret file copied to {}", path.display()),
                &[("file", path.display().to_string())],
            );
            Ok(())
        }
        GuardCmd::Import { guard_dir, file } => {
            let guard = open_guard(
                &guard_dir,
                sibling(&guard_dir, "alarms.log"),
                GuardConfig::default(),
            )?;
            let sig = guard.import(&file).map_err(guard_error)?;
            out.record(
                format!("secret file installed; signature {}", sig.to_hex()),
                &[("status", "imported".into()), ("signature", sig.to_hex())],
            );
            Ok(())
        }
    }
}

fn cert_record(out: &Out, c: &Certificate) {
    out.record(
        format!(
            "certificate {}  holder {} ({})  {}  expires {}  hash {}",
            c.cert_id,
            c.holder_id,
            c.holder_name,
            c.holder_category.name(),
            c.expires_at
                .map(format_ms)
                .unwrap_or_else(|| "never".into()),
            c.hash()
        ),
        &[
            ("cert_id", c.cert_id.to_string()),
            ("holder_id", c.holder_id.to_string()),
            ("holder_name", c.holder_name.clone()),
            ("category", c.holder_category.name().into()),
            ("expires_at", opt(c.expires_at)),
            ("hash", c.hash().to_hex()),
        ],
    );
}

fn download(s: &Settings, http: &Http, id: u64) -> CliResult<Certificate> {
    let text = http.get_text(&format!("{}/certificates/{id}/download", s.ca_url()?), None)?;
    Certificate::parse(&text).map_err(ca_error)
}

pub fn cert(s: &Settings, cmd: CertCmd, http: &Http, out: &Out) -> CliResult {
    match cmd {
        CertCmd::Show { id, file } => {
            let c = match (id, file) {
                (_, Some(path)) => read_certificate(&path)?,
                (Some(id), None) => download(s, http, id)?,
                (None, None) => return Err(CliError::usage("give a certificate number or --file")),
            };
            cert_record(out, &c);
            out.block(&c.to_text());
            Ok(())
        }
        CertCmd::Validate { file, hash, id } => {
            let h = match (file, hash, id) {
                (Some(path), _, _) => read_certificate(&path)?.hash().to_hex(),
                (None, Some(h), _) => h,
                (None, None, Some(id)) => download(s, http, id)?.hash().to_hex(),
                (None, None, None) => return Err(CliError::usage("give --file, --hash or --id")),
            };
            let resp: ValidityResponse =
                http.get_json(&format!("{}/certificates/{h}/validity", s.ca_url()?), None)?;
            out.record(
                format!("{} {}", resp.cert_hash, resp.validity),
                &[
                    ("hash", resp.cert_hash.to_hex()),
                    ("validity", resp.validity.to_string()),
                ],
            );
            match resp.validity {
                Validity::Valid => Ok(()),
                v => Err(CliError::failed(
                    "CertificateNotValid",
                    format!("certificate is {v}"),
                )),
            }
        }
    }
}

pub fn node_status(s: &Settings, http: &Http, out: &Out) -> CliResult {
    let st: NodeStatus = http.get_json(&format!("{}/status", s.node_url()?), None)?;
    out.record(
        format!(
            "node certificate {}\nledger rows {}  head {}\ndocuments {}\nCA replica: {} issued rows, {} revoked rows\nalarms {}",
            st.cert_id,
            st.rows,
            opt(st.head_hash),
            st.documents,
            st.ca_all_rows,
            st.ca_revoked_rows,
            st.alarms
        ),
        &[
            ("cert_id", st.cert_id.to_string()),
            ("rows", st.rows.to_string()),
            ("head_hash", opt(st.head_hash)),
            ("documents", st.documents.to_string()),
            ("ca_all_rows", st.ca_all_rows.to_string()),
            ("ca_revoked_rows", st.ca_revoked_rows.to_string()),
            ("alarms", st.alarms.to_string()),
        ],
    );
    Ok(())
}
