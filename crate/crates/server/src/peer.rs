//! Participant side of the node's WebSocket channel: handshake, then a
//! replica that re-verifies everything the node sends.

use std::time::Duration;

use archain_core::ca::{Certificate, ChainKind};
use archain_core::clock::{Clock, SystemClock};
use archain_core::identity::Identity;
use archain_core::node::{requests, Envelope, ErrorBody, MsgType, NodeError, Replica, Session};
use futures::{SinkExt, StreamExt};
use thiserror::Error;
use tokio::net::TcpStream;
use tokio_tungstenite::tungstenite::Message;
use tokio_tungstenite::{connect_async, MaybeTlsStream, WebSocketStream};

#[derive(Debug, Error)]
pub enum PeerError {
    #[error("websocket: {0}")]
    Ws(#[from] tokio_tungstenite::tungstenite::Error),
    #[error("unreadable envelope: {0}")]
    Json(#[from] serde_json::Error),
    #[error("node refused: {} {}", .0.code, .0.message)]
    Refused(ErrorBody),
    #[error("unexpected {0} envelope during the handshake")]
    Protocol(String),
    #[error("connection closed")]
    Closed,
    #[error("timed out")]
    Timeout,
    #[error(transparent)]
    Node(#[from] NodeError),
}

pub struct Participant {
    identity: Identity,
    session: Session,
    replica: Replica,
    rejected: Vec<String>,
    ws: WebSocketStream<MaybeTlsStream<TcpStream>>,
}

fn now() -> u64 {
    SystemClock.now_ms()
}

impl Participant {
    /// Connects to `ws://host:port/ws`, answers the challenge and asks for
    /// the CA chains and the main chain from row 0.
    pub async fn connect(
        url: &str,
        identity: Identity,
        root: Certificate,
    ) -> Result<Self, PeerError> {
        let (mut ws, _) = connect_async(url).await?;
        let challenge = read_envelope(&mut ws).await?;
        if challenge.kind() != Some(MsgType::Challenge) {
            return Err(PeerError::Protocol(challenge.msg_type));
        }
        let nonce = challenge.body["nonce"]
            .as_str()
            .ok_or_else(|| PeerError::Protocol("challenge without nonce".into()))?
            .to_string();
        write_envelope(&mut ws, &requests::hello(&identity, now(), &nonce)).await?;
        let reply = read_envelope(&mut ws).await?;
        if let Some(e) = reply.error_info() {
            return Err(PeerError::Refused(e));
        }
        if reply.kind() != Some(MsgType::Hello) {
            return Err(PeerError::Protocol(reply.msg_type));
        }
        let session: Session = reply.body_as()?;
        let mut p = Self {
            identity,
            session,
            replica: Replica::new(root),
            rejected: Vec::new(),
            ws,
        };
        for kind in [ChainKind::All, ChainKind::Revoked] {
            let req = requests::ca_rows(&p.identity, now(), kind, 0);
            p.send(&req).await?;
        }
        p.catch_up().await?;
        Ok(p)
    }

    pub fn session(&self) -> &Session {
        &self.session
    }

    pub fn identity(&self) -> &Identity {
        &self.identity
    }

    pub fn replica(&self) -> &Replica {
        &self.replica
    }

    /// Envelopes the replica refused, with the reason.
    pub fn rejected(&self) -> &[String] {
        &self.rejected
    }

    pub async fn send(&mut self, env: &Envelope) -> Result<(), PeerError> {
        write_envelope(&mut self.ws, env).await
    }

    /// Requests every row after the replica's head.
    pub async fn catch_up(&mut self) -> Result<(), PeerError> {
        let req = requests::chain_rows(&self.identity, now(), self.replica.next_row());
        self.send(&req).await
    }

    /// Reads one envelope and feeds it to the replica. Refusals are kept in
    /// `rejected`, not returned, so one bad message does not end the session.
    pub async fn next(&mut self) -> Result<Envelope, PeerError> {
        let env = read_envelope(&mut self.ws).await?;
        if let Err(e) = self.replica.receive(&env, now()) {
            tracing::warn!(msg_type = %env.msg_type, error = %e, "envelope refused by replica");
            self.rejected.push(format!("{}: {e}", env.msg_type));
        }
        Ok(env)
    }

    /// Processes envelopes until `done` holds or `timeout` passes.
    pub async fn wait_until<F>(&mut self, timeout: Duration, mut done: F) -> Result<(), PeerError>
    where
        F: FnMut(&Replica) -> bool,
    {
        let deadline = tokio::time::Instant::now() + timeout;
        while !done(&self.replica) {
            match tokio::time::timeout_at(deadline, self.next()).await {
                Ok(r) => {
                    r?;
                }
                Err(_) => return Err(PeerError::Timeout),
            }
        }
        Ok(())
    }

    /// Sends a request and returns the first reply or error envelope of the
    /// given type, processing broadcasts on the way.
    pub async fn request(
        &mut self,
        env: &Envelope,
        reply_type: MsgType,
        timeout: Duration,
    ) -> Result<Envelope, PeerError> {
        self.send(env).await?;
        let deadline = tokio::time::Instant::now() + timeout;
        loop {
            let got = tokio::time::timeout_at(deadline, self.next())
                .await
                .map_err(|_| PeerError::Timeout)??;
            if got.kind() == Some(reply_type) || got.kind() == Some(MsgType::Error) {
                return Ok(got);
            }
        }
    }

    pub async fn close(mut self) {
        let _ = self.ws.close(None).await;
    }
}

async fn write_envelope(
    ws: &mut WebSocketStream<MaybeTlsStream<TcpStream>>,
    env: &Envelope,
) -> Result<(), PeerError> {
    ws.send(Message::text(serde_json::to_string(env)?)).await?;
    Ok(())
}

async fn read_envelope(
    ws: &mut WebSocketStream<MaybeTlsStream<TcpStream>>,
) -> Result<Envelope, PeerError> {
    loop {
        match ws.next().await {
            Some(Ok(Message::Text(t))) => return Ok(serde_json::from_str(t.as_str())?),
            Some(Ok(Message::Close(_))) | None => return Err(PeerError::Closed),
            Some(Ok(_)) => continue,
            Some(Err(e)) => return Err(e.into()),
        }
    }
}
