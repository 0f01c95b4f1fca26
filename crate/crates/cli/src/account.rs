//! CA accounts, roles and the local identity file.

use archain_core::ca::{Certificate, ClaimedKey, Role, UserSummary};
use archain_core::crypto::KeyPair;
use archain_core::identity::Identity;
use archain_server::ca_api::{
    LoginRequest, LoginResponse, RegisterRequest, RoleRequest, RoleResponse,
};

use crate::args::{IdentityCmd, LoginArgs, RegisterArgs, RoleCmd};
use crate::config::Settings;
use crate::error::{CliError, CliResult};
use crate::files::{load_identity, save_identity, write_private};
use crate::http::Http;
use crate::output::{opt, Out};
use crate::serve::{ca_error, profile};

fn user_record(out: &Out, u: &UserSummary) {
    out.record(
        format!(
            "{:>4}  {:<20} {:<16} cert {:<6} {}{}",
            u.user_id,
            u.username,
            u.role.name(),
            opt(u.active_cert),
            u.profile.organization,
            if u.renewal_required {
                "  (renewal required)"
            } else {
                ""
            }
        ),
        &[
            ("user_id", u.user_id.to_string()),
            ("username", u.username.clone()),
            ("role", u.role.name().into()),
            ("active_cert", opt(u.active_cert)),
            ("organization", u.profile.organization.clone()),
            ("renewal_required", u.renewal_required.to_string()),
        ],
    );
}

pub fn register(s: &Settings, a: RegisterArgs, http: &Http, out: &Out) -> CliResult {
    let req = RegisterRequest {
        username: a.username,
        password: a.password,
        profile: profile(a.profile),
    };
    let user: UserSummary = http.post_json(&format!("{}/register", s.ca_url()?), &req, None)?;
    user_record(out, &user);
    Ok(())
}

pub fn login(s: &Settings, a: LoginArgs, http: &Http, out: &Out) -> CliResult {
    let req = LoginRequest {
        username: a.username,
        password: a.password,
    };
    let resp: LoginResponse = http.post_json(&format!("{}/login", s.ca_url()?), &req, None)?;
    if let Some(path) = &a.save {
        write_private(path, resp.token.as_bytes())?;
    }
    out.record(
        &resp.token,
        &[
            ("token", resp.token.clone()),
            ("user_id", resp.user_id.to_string()),
            ("role", resp.role.name().into()),
        ],
    );
    Ok(())
}

pub fn users(s: &Settings, http: &Http, out: &Out) -> CliResult {
    let list: Vec<UserSummary> =
        http.get_json(&format!("{}/users", s.ca_url()?), Some(s.token()?))?;
    for u in &list {
        user_record(out, u);
    }
    Ok(())
}

pub fn role(s: &Settings, cmd: RoleCmd, http: &Http, out: &Out) -> CliResult {
    let RoleCmd::Set { user_id, role } = cmd;
    if Role::parse(&role).is_none() {
        return Err(CliError::usage(format!("unknown role {role:?}")));
    }
    let resp: RoleResponse = http.post_json(
        &format!("{}/users/{user_id}/role", s.ca_url()?),
        &RoleRequest { role },
        Some(s.token()?),
    )?;
    let cert = resp
        .certificate
        .as_deref()
        .map(Certificate::parse)
        .transpose()
        .map_err(ca_error)?;
    let text = match &cert {
        Some(c) => format!(
            "user {} is now {}; certificate {} issued, key waiting for pickup",
            resp.user_id,
            resp.role.name(),
            c.cert_id
        ),
        None => format!("user {} is now {}", resp.user_id, resp.role.name()),
    };
    out.record(
        text,
        &[
            ("user_id", resp.user_id.to_string()),
            ("role", resp.role.name().into()),
            ("cert_id", opt(cert.as_ref().map(|c| c.cert_id))),
        ],
    );
    Ok(())
}

/// Turns a claimed key into an identity. Experts also hold an append key;
/// an existing one is kept because the node pins it on first use.
fn identity_from_claim(
    claim: ClaimedKey,
    previous: Option<&Identity>,
) -> CliResult<(Identity, Certificate)> {
    let cert = Certificate::parse(&claim.certificate).map_err(ca_error)?;
    let curve = claim.curve;
    let mut id = claim.into_identity().map_err(ca_error)?;
    if cert.holder_category == Role::Expert {
        id.append_key = previous
            .and_then(|p| p.append_key.clone())
            .or_else(|| Some(KeyPair::generate(curve)));
    }
    Ok((id, cert))
}

fn identity_record(out: &Out, id: &Identity, cert: Option<&Certificate>) {
    let role = cert.map(|c| c.holder_category.name()).unwrap_or("");
    let mut text = format!(
        "certificate {}  role {}  curve {}\npublic key {}",
        id.cert_id,
        if role.is_empty() { "?" } else { role },
        id.keypair.curve_id(),
        id.public_key().to_hex()
    );
    if let Some(k) = &id.append_key {
        text.push_str(&format!("\nappend key {}", k.public_key().to_hex()));
    }
    out.record(
        text,
        &[
            ("cert_id", id.cert_id.to_string()),
            ("role", role.into()),
            ("holder_id", opt(cert.map(|c| c.holder_id))),
            ("curve", id.keypair.curve_id().to_string()),
            ("public_key", id.public_key().to_hex()),
            (
                "append_key",
                opt(id.append_key.as_ref().map(|k| k.public_key().to_hex())),
            ),
        ],
    );
}

fn claim(
    s: &Settings,
    http: &Http,
    previous: Option<&Identity>,
) -> CliResult<(Identity, Certificate)> {
    let claim: ClaimedKey = http.post_json(
        &format!("{}/keys/claim", s.ca_url()?),
        &serde_json::json!({}),
        Some(s.token()?),
    )?;
    identity_from_claim(claim, previous)
}

pub fn identity(s: &Settings, cmd: IdentityCmd, http: &Http, out: &Out) -> CliResult {
    let path = s.identity_path()?;
    match cmd {
        IdentityCmd::Claim { force } => {
            let previous = if path.exists() {
                if !force {
                    return Err(CliError::failed(
                        "IdentityExists",
                        format!("{} exists; pass --force to replace it", path.display()),
                    ));
                }
                load_identity(path).ok()
            } else {
                None
            };
            let (id, cert) = claim(s, http, previous.as_ref())?;
            save_identity(&id, path)?;
            identity_record(out, &id, Some(&cert));
        }
        IdentityCmd::Renew => {
            let previous = load_identity(path)?;
            let _: serde_json::Value = http.post_json(
                &format!("{}/renew", s.ca_url()?),
                &serde_json::json!({}),
                Some(s.token()?),
            )?;
            let (id, cert) = claim(s, http, Some(&previous))?;
            save_identity(&id, path)?;
            identity_record(out, &id, Some(&cert));
        }
        IdentityCmd::Show => {
            let id = load_identity(path)?;
            let cert = id
                .certificate
                .as_deref()
                .and_then(|t| Certificate::parse(t).ok());
            identity_record(out, &id, cert.as_ref());
        }
    }
    Ok(())
}
