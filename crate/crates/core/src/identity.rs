//! A participant's signing identity: certificate number plus key pair, and
//! the on-disk identity file the CLI and node load at startup.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{sign, CryptoError, CurveId, KeyPair, PrivateKey, PublicKey, SignatureValue};

/// Unique certificate number issued by the CA.
pub type CertId = u64;

#[derive(Debug, Error)]
pub enum IdentityError {
    #[error("identity file: {0}")]
    Io(#[from] std::io::Error),
    #[error("identity file is not valid JSON: {0}")]
    Format(#[from] serde_json::Error),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
    #[error("stored public key does not match the private key")]
    KeyMismatch,
}

#[derive(Clone, Debug)]
pub struct Identity {
    pub cert_id: CertId,
    pub keypair: KeyPair,
    /// Separate key an expert uses to authorize ledger placement of the
    /// documents they approved.
    pub append_key: Option<KeyPair>,
    /// Canonical certificate text, when known.
    pub certificate: Option<String>,
}

impl Identity {
    pub fn new(cert_id: CertId, keypair: KeyPair) -> Self {
        Self {
            cert_id,
            keypair,
            append_key: None,
            certificate: None,
        }
    }

    pub fn public_key(&self) -> &PublicKey {
        self.keypair.public_key()
    }

    pub fn sign(&self, message: &[u8]) -> SignatureValue {
        sign(self.keypair.private_key(), message).expect("identity keys are validated on load")
    }

    pub fn load(path: &Path) -> Result<Self, IdentityError> {
        let file: IdentityFile = serde_json::from_slice(&fs::read(path)?)?;
        file.into_identity()
    }

    /// Writes the identity readable by the owner only.
    pub fn save(&self, path: &Path) -> Result<(), IdentityError> {
        let json = serde_json::to_vec_pretty(&IdentityFile::from_identity(self))?;
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir)?;
            }
        }
        let mut options = fs::OpenOptions::new();
        options.write(true).create(true).truncate(true);
        #[cfg(unix)]
        {
            use std::os::unix::fs::OpenOptionsExt;
            options.mode(0o600);
        }
        let mut f = options.open(path)?;
        f.write_all(&json)?;
        f.sync_all()?;
        #[cfg(unix)]
        {
            use std::os::unix::fs::PermissionsExt;
            fs::set_permissions(path, fs::Permissions::from_mode(0o600))?;
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct IdentityFile {
    cert_id: CertId,
    curve: CurveId,
    private_key: String,
    public_key: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    append_private_key: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    certificate: Option<String>,
}

impl IdentityFile {
    fn from_identity(id: &Identity) -> Self {
        Self {
            cert_id: id.cert_id,
            curve: id.keypair.curve_id(),
            private_key: hex::encode(id.keypair.private_key().to_bytes()),
            public_key: id.keypair.public_key().to_hex(),
            append_private_key: id
                .append_key
                .as_ref()
                .map(|k| hex::encode(k.private_key().to_bytes())),
            certificate: id.certificate.clone(),
        }
    }

    fn into_identity(self) -> Result<Identity, IdentityError> {
        let keypair = parse_private(self.curve, &self.private_key)?;
        if keypair.public_key().to_hex() != self.public_key.to_ascii_lowercase() {
            return Err(IdentityError::KeyMismatch);
        }
        let append_key = self
            .append_private_key
            .map(|h| parse_private(self.curve, &h))
            .transpose()?;
        Ok(Identity {
            cert_id: self.cert_id,
            keypair,
            append_key,
            certificate: self.certificate,
        })
    }
}

fn parse_private(curve: CurveId, hex_str: &str) -> Result<KeyPair, IdentityError> {
    let bytes = hex::decode(hex_str.trim()).map_err(|e| CryptoError::Malformed(e.to_string()))?;
    Ok(KeyPair::from_private(PrivateKey::from_bytes(
        curve, &bytes,
    )?))
}
