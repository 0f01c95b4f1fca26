//! Hashing and digital-signature primitives shared by every other module.

mod curve;
mod field;
mod signature;
mod streebog;
mod tables;

use std::fmt;
use std::io;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use curve::CurveId;
pub use signature::{
    sign, verify, KeyPair, PrivateKey, PublicKey, SchemeId, SignatureValue, MIN_ENTROPY_LEN,
    PRIVATE_KEY_LEN, PUBLIC_KEY_LEN,
};
pub use streebog::Streebog512;

pub const DIGEST_LEN: usize = 64;

/// Curve used when nothing else is configured.
pub const DEFAULT_CURVE: CurveId = CurveId::Tc26A;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CryptoError {
    #[error("insufficient entropy: got {got} bytes, need at least {need}")]
    InsufficientEntropy { got: usize, need: usize },
    #[error("invalid key: {0}")]
    InvalidKey(&'static str),
    #[error("malformed input: {0}")]
    Malformed(String),
}

/// 64-byte hash value.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Digest([u8; DIGEST_LEN]);

/// All-zero digest; the predecessor of every chain's first row.
pub const ZERO_DIGEST: Digest = Digest([0; DIGEST_LEN]);

impl Digest {
    pub const fn from_bytes(bytes: [u8; DIGEST_LEN]) -> Self {
        Self(bytes)
    }

    pub fn from_slice(bytes: &[u8]) -> Result<Self, CryptoError> {
        bytes.try_into().map(Self).map_err(|_| {
            CryptoError::Malformed(format!("digest must be 64 bytes, got {}", bytes.len()))
        })
    }

    pub fn from_hex(s: &str) -> Result<Self, CryptoError> {
        let bytes = hex::decode(s.trim()).map_err(|e| CryptoError::Malformed(e.to_string()))?;
        Self::from_slice(&bytes)
    }

    pub fn as_bytes(&self) -> &[u8; DIGEST_LEN] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn is_zero(&self) -> bool {
        self.0 == [0; DIGEST_LEN]
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({}..)", &self.to_hex()[..16])
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl Serialize for Digest {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for Digest {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Self::from_hex(&s).map_err(serde::de::Error::custom)
    }
}

pub fn hash(message: &[u8]) -> Digest {
    Digest(Streebog512::digest(message))
}

/// Streaming hasher; also usable as an [`io::Write`] sink.
#[derive(Clone, Default)]
pub struct Hasher(Streebog512);

impl Hasher {
    pub fn new() -> Self {
        Self(Streebog512::new())
    }

    pub fn update(&mut self, data: &[u8]) {
        self.0.update(data);
    }

    pub fn finalize(self) -> Digest {
        Digest(self.0.finalize())
    }
}

impl io::Write for Hasher {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        self.update(buf);
        Ok(buf.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        Ok(())
    }
}

/// Key pair with the default curve from caller-supplied entropy.
pub fn keygen(entropy: &[u8]) -> Result<KeyPair, CryptoError> {
    KeyPair::from_entropy(DEFAULT_CURVE, entropy)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_hex_roundtrip() {
        let d = hash(b"abc");
        assert_eq!(Digest::from_hex(&d.to_hex()).unwrap(), d);
        assert!(Digest::from_hex("00").is_err());
        assert!(ZERO_DIGEST.is_zero());
        let json = serde_json::to_string(&d).unwrap();
        assert_eq!(serde_json::from_str::<Digest>(&json).unwrap(), d);
    }

    #[test]
    fn streaming_matches_one_shot() {
        use std::io::Write;
        let mut h = Hasher::new();
        h.write_all(b"hello ").unwrap();
        h.write_all(b"world").unwrap();
        assert_eq!(h.finalize(), hash(b"hello world"));
    }

    #[test]
    fn keygen_requires_64_bytes() {
        assert!(keygen(&[1u8; 64]).is_ok());
        assert!(matches!(
            keygen(&[1u8; 10]),
            Err(CryptoError::InsufficientEntropy { got: 10, need: 64 })
        ));
    }
}
