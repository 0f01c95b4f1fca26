//! The node's side of the trusted channel to the CA.

use archain_core::ca::{CaUpdate, Certificate, ChainKind};
use thiserror::Error;

use crate::ErrorReply;

#[derive(Debug, Error)]
pub enum CaClientError {
    #[error("CA unreachable: {0}")]
    Http(#[from] reqwest::Error),
    #[error("CA refused ({status}): {} {}", .reply.code, .reply.message)]
    Refused { status: u16, reply: ErrorReply },
    #[error("CA sent an unreadable certificate: {0}")]
    Certificate(String),
}

impl CaClientError {
    pub fn code(&self) -> &str {
        match self {
            CaClientError::Http(_) => "CaUnreachable",
            CaClientError::Refused { reply, .. } => &reply.code,
            CaClientError::Certificate(_) => "MalformedCertificate",
        }
    }
}

#[derive(Clone, Debug)]
pub struct CaClient {
    base: String,
    token: String,
    http: reqwest::Client,
}

impl CaClient {
    pub fn new(base: impl Into<String>, token: impl Into<String>) -> Self {
        Self {
            base: base.into().trim_end_matches('/').to_string(),
            token: token.into(),
            http: reqwest::Client::new(),
        }
    }

    pub fn base(&self) -> &str {
        &self.base
    }

    async fn check(resp: reqwest::Response) -> Result<reqwest::Response, CaClientError> {
        if resp.status().is_success() {
            return Ok(resp);
        }
        let status = resp.status().as_u16();
        let reply = resp
            .json::<ErrorReply>()
            .await
            .unwrap_or_else(|e| ErrorReply {
                code: "HttpError".into(),
                message: e.to_string(),
            });
        Err(CaClientError::Refused { status, reply })
    }

    pub async fn root_certificate(&self) -> Result<Certificate, CaClientError> {
        let resp = self
            .http
            .get(format!("{}/ca/certificate", self.base))
            .send()
            .await?;
        let text = Self::check(resp).await?.text().await?;
        Certificate::parse(&text).map_err(|e| CaClientError::Certificate(e.to_string()))
    }

    pub async fn chain(&self, kind: ChainKind, from: usize) -> Result<CaUpdate, CaClientError> {
        let resp = self
            .http
            .get(format!("{}/chains/{kind}?from={from}", self.base))
            .bearer_auth(&self.token)
            .send()
            .await?;
        Ok(Self::check(resp).await?.json().await?)
    }
}
