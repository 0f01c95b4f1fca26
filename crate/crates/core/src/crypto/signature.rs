//! Elliptic-curve digital signatures following GOST R 34.10-2012 with
//! 512-bit keys, using a deterministic per-message nonce.

use std::fmt;

use rand::RngCore;
use serde::{Deserialize, Serialize};
use zeroize::Zeroize;

use super::curve::{Affine, CurveId};
use super::field::{self, Limbs};
use super::{hash, CryptoError, Hasher};

pub const PRIVATE_KEY_LEN: usize = 64;
pub const PUBLIC_KEY_LEN: usize = 128;
pub const MIN_ENTROPY_LEN: usize = 64;

/// Signature scheme identifier; the first byte of every encoded signature.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SchemeId {
    #[serde(rename = "gost3410-2012-512-a")]
    Gost512A,
    #[serde(rename = "gost3410-2012-512-b")]
    Gost512B,
}

impl SchemeId {
    pub fn for_curve(curve: CurveId) -> Self {
        match curve {
            CurveId::Tc26A => SchemeId::Gost512A,
            CurveId::Tc26B => SchemeId::Gost512B,
        }
    }

    pub fn curve(self) -> CurveId {
        match self {
            SchemeId::Gost512A => CurveId::Tc26A,
            SchemeId::Gost512B => CurveId::Tc26B,
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            SchemeId::Gost512A => 0x01,
            SchemeId::Gost512B => 0x02,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0x01 => Some(SchemeId::Gost512A),
            0x02 => Some(SchemeId::Gost512B),
            _ => None,
        }
    }

    /// Encoded signature length, tag byte included.
    pub fn signature_len(self) -> usize {
        1 + 2 * PRIVATE_KEY_LEN
    }

    /// Human-readable algorithm name, as written into certificates.
    pub fn algorithm_name(self) -> &'static str {
        match self {
            SchemeId::Gost512A => "GOST R 34.10-2012 512-bit (tc26-512-a)",
            SchemeId::Gost512B => "GOST R 34.10-2012 512-bit (tc26-512-b)",
        }
    }

    pub fn from_algorithm_name(name: &str) -> Option<Self> {
        [SchemeId::Gost512A, SchemeId::Gost512B]
            .into_iter()
            .find(|s| s.algorithm_name() == name)
    }
}

pub struct PrivateKey {
    curve: CurveId,
    scalar: Limbs,
}

impl Drop for PrivateKey {
    fn drop(&mut self) {
        self.scalar.zeroize();
    }
}

impl Clone for PrivateKey {
    fn clone(&self) -> Self {
        Self {
            curve: self.curve,
            scalar: self.scalar,
        }
    }
}

impl fmt::Debug for PrivateKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PrivateKey({}, ..)", self.curve)
    }
}

impl PrivateKey {
    /// Parses a 64-byte big-endian scalar; must lie in `[1, q)`.
    pub fn from_bytes(curve: CurveId, bytes: &[u8]) -> Result<Self, CryptoError> {
        let bytes: &[u8; PRIVATE_KEY_LEN] = bytes
            .try_into()
            .map_err(|_| CryptoError::InvalidKey("private key must be 64 bytes"))?;
        let scalar = field::from_be_bytes(bytes);
        let params = curve.params();
        if field::is_zero(&scalar) || !params.fq.is_valid(&scalar) {
            return Err(CryptoError::InvalidKey("private scalar out of range"));
        }
        Ok(Self { curve, scalar })
    }

    pub fn to_bytes(&self) -> [u8; PRIVATE_KEY_LEN] {
        field::to_be_bytes(&self.scalar)
    }

    pub fn curve(&self) -> CurveId {
        self.curve
    }

    pub fn public_key(&self) -> PublicKey {
        let c = self.curve.params();
        let point = c
            .to_affine(&c.mul_base(&self.scalar))
            .expect("nonzero scalar below the order");
        PublicKey {
            curve: self.curve,
            point,
        }
    }
}

/// Curve point `P = kQ`; encodes as `x ‖ y`, each 64 bytes big-endian.
#[derive(Clone, PartialEq, Eq)]
pub struct PublicKey {
    curve: CurveId,
    point: Affine,
}

impl fmt::Debug for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PublicKey({}, {}..)", self.curve, &self.to_hex()[..16])
    }
}

impl PublicKey {
    pub fn from_bytes(curve: CurveId, bytes: &[u8]) -> Result<Self, CryptoError> {
        if bytes.len() != PUBLIC_KEY_LEN {
            return Err(CryptoError::InvalidKey("public key must be 128 bytes"));
        }
        let x = field::from_be_bytes(bytes[..64].try_into().expect("64 bytes"));
        let y = field::from_be_bytes(bytes[64..].try_into().expect("64 bytes"));
        let point = Affine { x, y };
        if !curve.params().is_on_curve(&point) {
            return Err(CryptoError::InvalidKey("point is not on the curve"));
        }
        Ok(Self { curve, point })
    }

    pub fn from_hex(curve: CurveId, s: &str) -> Result<Self, CryptoError> {
        let bytes = hex::decode(s.trim()).map_err(|e| CryptoError::Malformed(e.to_string()))?;
        Self::from_bytes(curve, &bytes)
    }

    pub fn to_bytes(&self) -> [u8; PUBLIC_KEY_LEN] {
        let mut out = [0u8; PUBLIC_KEY_LEN];
        out[..64].copy_from_slice(&field::to_be_bytes(&self.point.x));
        out[64..].copy_from_slice(&field::to_be_bytes(&self.point.y));
        out
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.to_bytes())
    }

    pub fn curve(&self) -> CurveId {
        self.curve
    }

    pub fn scheme(&self) -> SchemeId {
        SchemeId::for_curve(self.curve)
    }
}

#[derive(Serialize, Deserialize)]
struct PublicKeyRepr {
    curve: CurveId,
    key: String,
}

impl Serialize for PublicKey {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        PublicKeyRepr {
            curve: self.curve,
            key: self.to_hex(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for PublicKey {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let r = PublicKeyRepr::deserialize(d)?;
        Self::from_hex(r.curve, &r.key).map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug)]
pub struct KeyPair {
    private: PrivateKey,
    public: PublicKey,
}

impl KeyPair {
    /// Derives a key pair from at least 64 bytes of caller-supplied entropy.
    pub fn from_entropy(curve: CurveId, entropy: &[u8]) -> Result<Self, CryptoError> {
        if entropy.len() < MIN_ENTROPY_LEN {
            return Err(CryptoError::InsufficientEntropy {
                got: entropy.len(),
                need: MIN_ENTROPY_LEN,
            });
        }
        let params = curve.params();
        let mut counter = 0u32;
        let scalar = loop {
            let k = wide_scalar(params, |h, half| {
                h.update(b"archain/keygen");
                h.update(entropy);
                h.update(&counter.to_be_bytes());
                h.update(&[half]);
            });
            if !field::is_zero(&k) {
                break k;
            }
            counter += 1;
        };
        let private = PrivateKey { curve, scalar };
        let public = private.public_key();
        Ok(Self { private, public })
    }

    /// Fresh key pair from the operating system RNG.
    pub fn generate(curve: CurveId) -> Self {
        let mut entropy = [0u8; MIN_ENTROPY_LEN];
        rand::rngs::OsRng.fill_bytes(&mut entropy);
        let pair = Self::from_entropy(curve, &entropy).expect("64 bytes of entropy");
        entropy.zeroize();
        pair
    }

    pub fn from_private(private: PrivateKey) -> Self {
        let public = private.public_key();
        Self { private, public }
    }

    pub fn private_key(&self) -> &PrivateKey {
        &self.private
    }

    pub fn public_key(&self) -> &PublicKey {
        &self.public
    }

    pub fn curve_id(&self) -> CurveId {
        self.private.curve
    }

    /// Recomputes `P = kQ` and runs a sign/verify roundtrip.
    pub fn self_test(&self) -> bool {
        if self.private.public_key() != self.public {
            return false;
        }
        let msg = b"archain key pair self-test";
        match sign(&self.private, msg) {
            Ok(sig) => verify(&self.public, msg, &sig),
            Err(_) => false,
        }
    }
}

/// Encoded signature: scheme tag byte followed by `r ‖ s` (64 bytes each,
/// big-endian). Arbitrary bytes are representable so that persisted values
/// survive parsing and fail only at verification.
#[derive(Clone, PartialEq, Eq, Hash, Default)]
pub struct SignatureValue(Vec<u8>);

impl fmt::Debug for SignatureValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let hex = hex::encode(&self.0);
        write!(f, "SignatureValue({}..)", &hex[..hex.len().min(16)])
    }
}

impl SignatureValue {
    pub fn from_bytes(bytes: Vec<u8>) -> Self {
        Self(bytes)
    }

    pub fn from_hex(s: &str) -> Result<Self, CryptoError> {
        hex::decode(s.trim())
            .map(Self)
            .map_err(|e| CryptoError::Malformed(e.to_string()))
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(&self.0)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn scheme(&self) -> Option<SchemeId> {
        self.0.first().copied().and_then(SchemeId::from_tag)
    }
}

impl Serialize for SignatureValue {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for SignatureValue {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Self::from_hex(&s).map_err(serde::de::Error::custom)
    }
}

/// Reduces 1024 bits of hash output modulo the group order.
fn wide_scalar(params: &super::curve::Curve, feed: impl Fn(&mut Hasher, u8)) -> Limbs {
    let mut halves = [[0u8; 64]; 2];
    for (half, out) in halves.iter_mut().enumerate() {
        let mut h = Hasher::new();
        feed(&mut h, half as u8);
        *out = *h.finalize().as_bytes();
    }
    let hi = field::from_le_bytes(&halves[0]);
    let lo = field::from_le_bytes(&halves[1]);
    params.fq.reduce_wide(&hi, &lo)
}

/// The message digest read as a little-endian integer, reduced mod q, with
/// zero replaced by one.
fn message_scalar(params: &super::curve::Curve, message: &[u8]) -> Limbs {
    let digest = hash(message);
    let e = params.fq.reduce(&field::from_le_bytes(digest.as_bytes()));
    if field::is_zero(&e) {
        field::ONE
    } else {
        e
    }
}

pub fn sign(key: &PrivateKey, message: &[u8]) -> Result<SignatureValue, CryptoError> {
    let params = key.curve.params();
    let fq = &params.fq;
    if field::is_zero(&key.scalar) || !fq.is_valid(&key.scalar) {
        return Err(CryptoError::InvalidKey("private scalar out of range"));
    }
    let e = message_scalar(params, message);
    let d_bytes = key.to_bytes();
    let e_m = fq.to_mont(&e);
    let d_m = fq.to_mont(&key.scalar);

    let mut counter = 0u32;
    loop {
        let k = wide_scalar(params, |h, half| {
            h.update(b"archain/nonce");
            h.update(&d_bytes);
            h.update(&field::to_be_bytes(&e));
            h.update(&counter.to_be_bytes());
            h.update(&[half]);
        });
        counter += 1;
        if field::is_zero(&k) {
            continue;
        }
        let c = match params.to_affine(&params.mul_base(&k)) {
            Some(c) => c,
            None => continue,
        };
        let r = fq.reduce(&c.x);
        if field::is_zero(&r) {
            continue;
        }
        let s_m = fq.add(
            &fq.mul(&fq.to_mont(&r), &d_m),
            &fq.mul(&fq.to_mont(&k), &e_m),
        );
        let s = fq.from_mont(&s_m);
        if field::is_zero(&s) {
            continue;
        }
        let scheme = SchemeId::for_curve(key.curve);
        let mut out = Vec::with_capacity(scheme.signature_len());
        out.push(scheme.tag());
        out.extend_from_slice(&field::to_be_bytes(&r));
        out.extend_from_slice(&field::to_be_bytes(&s));
        return Ok(SignatureValue(out));
    }
}

pub fn verify(key: &PublicKey, message: &[u8], sig: &SignatureValue) -> bool {
    let bytes = sig.as_bytes();
    let scheme = match sig.scheme() {
        Some(s) if s.curve() == key.curve && bytes.len() == s.signature_len() => s,
        _ => return false,
    };
    let params = scheme.curve().params();
    let fq = &params.fq;
    let r = field::from_be_bytes(bytes[1..65].try_into().expect("64 bytes"));
    let s = field::from_be_bytes(bytes[65..129].try_into().expect("64 bytes"));
    if field::is_zero(&r) || field::is_zero(&s) || !fq.is_valid(&r) || !fq.is_valid(&s) {
        return false;
    }
    let e = message_scalar(params, message);
    let v = fq.invert(&fq.to_mont(&e));
    let z1 = fq.from_mont(&fq.mul(&fq.to_mont(&s), &v));
    let z2 = fq.from_mont(&fq.neg(&fq.mul(&fq.to_mont(&r), &v)));
    let point = params.from_affine(&key.point);
    let c = params.mul_base_add(&z1, &z2, &point);
    match params.to_affine(&c) {
        Some(c) => fq.reduce(&c.x) == r,
        None => false,
    }
}
