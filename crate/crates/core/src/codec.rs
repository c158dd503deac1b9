//! Byte-level helpers shared by the key, index and wire formats.
//!
//! All integers are big-endian. Variable-size big integers carry a 4-byte
//! length prefix followed by their minimal big-endian encoding.

use num_bigint::BigUint;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CodecError {
    #[error("truncated buffer: needed {needed} bytes, {remaining} remaining")]
    Truncated { needed: usize, remaining: usize },
    #[error("length prefix {len} exceeds remaining frame of {remaining} bytes")]
    LengthOverflow { len: usize, remaining: usize },
    #[error("invalid encoding: {0}")]
    Invalid(String),
}

pub fn put_u8(out: &mut Vec<u8>, v: u8) {
    out.push(v);
}

pub fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_be_bytes());
}

pub fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_be_bytes());
}

pub fn put_i64(out: &mut Vec<u8>, v: i64) {
    out.extend_from_slice(&v.to_be_bytes());
}

pub fn put_i128(out: &mut Vec<u8>, v: i128) {
    out.extend_from_slice(&v.to_be_bytes());
}

pub fn put_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_bits().to_be_bytes());
}

pub fn put_bytes(out: &mut Vec<u8>, bytes: &[u8]) {
    put_u32(out, bytes.len() as u32);
    out.extend_from_slice(bytes);
}

/// Length-prefixed minimal big-endian encoding (zero encodes as length 0).
pub fn put_biguint(out: &mut Vec<u8>, v: &BigUint) {
    if v.bits() == 0 {
        put_u32(out, 0);
    } else {
        put_bytes(out, &v.to_bytes_be());
    }
}

/// Fixed-width big-endian encoding, left-padded with zeros. Panics if the
/// value does not fit, which is an internal invariant violation.
pub fn put_biguint_fixed(out: &mut Vec<u8>, v: &BigUint, width: usize) {
    let bytes = if v.bits() == 0 { Vec::new() } else { v.to_bytes_be() };
    assert!(bytes.len() <= width, "value wider than fixed field");
    out.resize(out.len() + (width - bytes.len()), 0);
    out.extend_from_slice(&bytes);
}

pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn is_empty(&self) -> bool {
        self.remaining() == 0
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8], CodecError> {
        if n > self.remaining() {
            return Err(CodecError::Truncated {
                needed: n,
                remaining: self.remaining(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8, CodecError> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32, CodecError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64, CodecError> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn i64(&mut self) -> Result<i64, CodecError> {
        Ok(i64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn i128(&mut self) -> Result<i128, CodecError> {
        Ok(i128::from_be_bytes(self.take(16)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64, CodecError> {
        Ok(f64::from_bits(self.u64()?))
    }

    /// A `u32` element count, checked against the bytes left so that a
    /// corrupted count cannot trigger a huge allocation.
    pub fn count(&mut self, min_elem_bytes: usize) -> Result<usize, CodecError> {
        let n = self.u32()? as usize;
        let need = n.saturating_mul(min_elem_bytes.max(1));
        if need > self.remaining() {
            return Err(CodecError::LengthOverflow {
                len: need,
                remaining: self.remaining(),
            });
        }
        Ok(n)
    }

    pub fn bytes(&mut self) -> Result<&'a [u8], CodecError> {
        let len = self.u32()? as usize;
        if len > self.remaining() {
            return Err(CodecError::LengthOverflow {
                len,
                remaining: self.remaining(),
            });
        }
        self.take(len)
    }

    pub fn biguint(&mut self) -> Result<BigUint, CodecError> {
        Ok(BigUint::from_bytes_be(self.bytes()?))
    }

    pub fn biguint_fixed(&mut self, width: usize) -> Result<BigUint, CodecError> {
        Ok(BigUint::from_bytes_be(self.take(width)?))
    }

    pub fn expect_end(&self) -> Result<(), CodecError> {
        if self.is_empty() {
            Ok(())
        } else {
            Err(CodecError::Invalid(format!(
                "{} trailing bytes",
                self.remaining()
            )))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn biguint_roundtrip_and_zero() {
        let mut out = Vec::new();
        put_biguint(&mut out, &BigUint::from(0u8));
        put_biguint(&mut out, &BigUint::from(0x1234_5678u64));
        assert_eq!(&out[..4], &[0, 0, 0, 0]);
        let mut r = Reader::new(&out);
        assert_eq!(r.biguint().unwrap(), BigUint::from(0u8));
        assert_eq!(r.biguint().unwrap(), BigUint::from(0x1234_5678u64));
        r.expect_end().unwrap();
    }

    #[test]
    fn length_prefix_past_end_is_rejected() {
        let mut out = Vec::new();
        put_u32(&mut out, 100);
        out.extend_from_slice(&[1, 2, 3]);
        let err = Reader::new(&out).bytes().unwrap_err();
        assert!(matches!(err, CodecError::LengthOverflow { len: 100, .. }));
    }

    #[test]
    fn huge_count_rejected_before_allocation() {
        let mut out = Vec::new();
        put_u32(&mut out, u32::MAX);
        assert!(Reader::new(&out).count(16).is_err());
    }
}
