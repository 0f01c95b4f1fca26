//! Length-prefixed big-endian binary encoding used for everything that gets
//! hashed or signed.

use thiserror::Error;

use crate::crypto::{Digest, SignatureValue, DIGEST_LEN};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DecodeError {
    #[error("unexpected end of input")]
    UnexpectedEnd,
    #[error("{0} trailing bytes")]
    TrailingBytes(usize),
    #[error("invalid UTF-8 string")]
    InvalidUtf8,
    #[error("unknown tag {0:#04x}")]
    UnknownTag(u8),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Default, Clone)]
pub struct Encoder {
    buf: Vec<u8>,
}

impl Encoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn u8(&mut self, v: u8) -> &mut Self {
        self.buf.push(v);
        self
    }

    pub fn u32(&mut self, v: u32) -> &mut Self {
        self.buf.extend_from_slice(&v.to_be_bytes());
        self
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_be_bytes());
        self
    }

    /// Raw bytes with no length prefix.
    pub fn raw(&mut self, bytes: &[u8]) -> &mut Self {
        self.buf.extend_from_slice(bytes);
        self
    }

    /// Panics above 4 GiB; callers that accept untrusted sizes check first.
    pub fn bytes(&mut self, bytes: &[u8]) -> &mut Self {
        let len = u32::try_from(bytes.len()).expect("field longer than u32::MAX");
        self.u32(len).raw(bytes)
    }

    pub fn str(&mut self, s: &str) -> &mut Self {
        self.bytes(s.as_bytes())
    }

    pub fn digest(&mut self, d: &Digest) -> &mut Self {
        self.raw(d.as_bytes())
    }

    pub fn signature(&mut self, s: &SignatureValue) -> &mut Self {
        self.bytes(s.as_bytes())
    }

    pub fn finish(&mut self) -> Vec<u8> {
        std::mem::take(&mut self.buf)
    }
}

pub struct Decoder<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Decoder<'a> {
    pub fn new(data: &'a [u8]) -> Self {
        Self { data, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], DecodeError> {
        let end = self.pos.checked_add(n).ok_or(DecodeError::UnexpectedEnd)?;
        let out = self
            .data
            .get(self.pos..end)
            .ok_or(DecodeError::UnexpectedEnd)?;
        self.pos = end;
        Ok(out)
    }

    pub fn u8(&mut self) -> Result<u8, DecodeError> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32, DecodeError> {
        Ok(u32::from_be_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    pub fn u64(&mut self) -> Result<u64, DecodeError> {
        Ok(u64::from_be_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    pub fn bytes(&mut self) -> Result<&'a [u8], DecodeError> {
        let len = self.u32()? as usize;
        self.take(len)
    }

    pub fn string(&mut self) -> Result<String, DecodeError> {
        let raw = self.bytes()?;
        String::from_utf8(raw.to_vec()).map_err(|_| DecodeError::InvalidUtf8)
    }

    pub fn digest(&mut self) -> Result<Digest, DecodeError> {
        let raw = self.take(DIGEST_LEN)?;
        Ok(Digest::from_bytes(raw.try_into().expect("64 bytes")))
    }

    pub fn signature(&mut self) -> Result<SignatureValue, DecodeError> {
        Ok(SignatureValue::from_bytes(self.bytes()?.to_vec()))
    }

    pub fn finish(self) -> Result<(), DecodeError> {
        match self.data.len() - self.pos {
            0 => Ok(()),
            n => Err(DecodeError::TrailingBytes(n)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_primitives() {
        let bytes = Encoder::new()
            .u8(7)
            .u32(0xdead_beef)
            .u64(42)
            .str("héllo")
            .bytes(&[])
            .finish();
        let mut d = Decoder::new(&bytes);
        assert_eq!(d.u8().unwrap(), 7);
        assert_eq!(d.u32().unwrap(), 0xdead_beef);
        assert_eq!(d.u64().unwrap(), 42);
        assert_eq!(d.string().unwrap(), "héllo");
        assert!(d.bytes().unwrap().is_empty());
        d.finish().unwrap();
    }

    #[test]
    fn truncated_and_trailing_input_is_rejected() {
        let bytes = Encoder::new().str("abc").finish();
        assert_eq!(
            Decoder::new(&bytes[..5]).string(),
            Err(DecodeError::UnexpectedEnd)
        );
        let mut longer = bytes.clone();
        longer.push(0);
        let mut d = Decoder::new(&longer);
        d.string().unwrap();
        assert_eq!(d.finish(), Err(DecodeError::TrailingBytes(1)));
    }

    #[test]
    fn huge_length_prefix_does_not_overflow() {
        let mut d = Decoder::new(&[0xff, 0xff, 0xff, 0xff, 1]);
        assert_eq!(d.bytes(), Err(DecodeError::UnexpectedEnd));
    }
}
