use std::time::Duration;

use archain_core::node::Envelope;
use archain_server::ErrorReply;
use reqwest::blocking::{Client, RequestBuilder, Response};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{CliError, CliResult};

/// Blocking client for both services. Error replies come back as
/// `CliError` carrying the service's error code.
pub struct Http {
    client: Client,
}

impl Http {
    pub fn new() -> CliResult<Self> {
        let client = Client::builder().timeout(Duration::from_secs(60)).build()?;
        Ok(Self { client })
    }

    fn send(&self, req: RequestBuilder, token: Option<&str>) -> CliResult<Response> {
        let req = match token {
            Some(t) => req.bearer_auth(t),
            None => req,
        };
        let resp = req.send()?;
        if resp.status().is_success() {
            return Ok(resp);
        }
        let status = resp.status();
        let text = resp.text().unwrap_or_default();
        Err(decode_error(status.as_u16(), &text))
    }

    pub fn get_json<T: DeserializeOwned>(&self, url: &str, token: Option<&str>) -> CliResult<T> {
        Ok(self.send(self.client.get(url), token)?.json()?)
    }

    pub fn get_text(&self, url: &str, token: Option<&str>) -> CliResult<String> {
        Ok(self.send(self.client.get(url), token)?.text()?)
    }

    pub fn post_json<B: Serialize, T: DeserializeOwned>(
        &self,
        url: &str,
        body: &B,
        token: Option<&str>,
    ) -> CliResult<T> {
        Ok(self.send(self.client.post(url).json(body), token)?.json()?)
    }

    /// Posts a signed request to the node and returns its reply envelope.
    pub fn post_envelope(&self, url: &str, env: &Envelope) -> CliResult<Envelope> {
        let reply: Envelope = self.send(self.client.post(url).json(env), None)?.json()?;
        match reply.error_info() {
            Some(e) => Err(CliError::failed(e.code, e.message)),
            None => Ok(reply),
        }
    }
}

fn decode_error(status: u16, text: &str) -> CliError {
    if let Ok(env) = serde_json::from_str::<Envelope>(text) {
        if let Some(e) = env.error_info() {
            return CliError::failed(e.code, e.message).with_detail(text.to_string());
        }
    }
    if let Ok(reply) = serde_json::from_str::<ErrorReply>(text) {
        return CliError::failed(reply.code, reply.message).with_detail(text.to_string());
    }
    CliError::failed("HttpError", format!("HTTP {status}: {}", text.trim()))
}
