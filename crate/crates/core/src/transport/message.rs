//! Typed protocol messages and their frame encodings.
//!
//! Ciphertexts are written at the fixed width of `N^2` and plaintext values
//! as 16-byte integers, so a frame's length depends only on its counts.

use crate::codec::{self, Reader};
use crate::error::{Error, Result};
use crate::paillier::{Ciphertext, PublicKey};

use super::frame::Frame;

pub mod ty {
    pub const HELLO: u8 = 0x01;
    pub const SIC: u8 = 0x10;
    pub const MUL: u8 = 0x11;
    pub const RELU: u8 = 0x12;
    pub const SBP_IDS: u8 = 0x13;
    pub const SBP_MATCH: u8 = 0x14;
    pub const SPE_BOUNDS: u8 = 0x15;
    pub const SPE_FILTER: u8 = 0x16;
    pub const SLQ_MARK: u8 = 0x17;
    pub const RETURN: u8 = 0x18;
    pub const QUERY: u8 = 0x20;
    pub const RESULT_MASKS: u8 = 0x21;
    pub const COLLECT: u8 = 0x22;
    pub const CLOSE: u8 = 0x3F;
    pub const ERROR: u8 = 0x7F;
    /// Replies carry the request type with the high bit set.
    pub const REPLY: u8 = 0x80;
}

pub type Token = [u8; 16];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Dsp = 1,
    Client = 2,
}

impl Role {
    pub fn from_u8(v: u8) -> Result<Self> {
        match v {
            1 => Ok(Role::Dsp),
            2 => Ok(Role::Client),
            _ => Err(Error::Handshake(format!("unknown role {v}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MulGroup {
    pub x: Ciphertext,
    pub ys: Vec<Ciphertext>,
}

/// Messages sent to the DAP.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Request {
    Hello { role: Role, nonce: Token },
    /// Blinded, sign-flipped differences; reply is one encrypted sign bit each.
    Sic(Vec<Ciphertext>),
    /// Each group: a blinded multiplier and blinded multiplicands.
    Mul(Vec<MulGroup>),
    /// Multiplicatively blinded pre-activations.
    Relu(Vec<Ciphertext>),
    /// Blinded candidate ids at scale `2^shift`; reply is permuted.
    SbpIds { shift: u32, items: Vec<Ciphertext> },
    /// Perturbed query point and perturbed bucket slots, each `dims` wide.
    SbpMatch {
        dims: u32,
        query: Vec<Ciphertext>,
        points: Vec<Ciphertext>,
    },
    /// Blinded scan bounds at scale `2^shift`.
    SpeBounds { shift: u32, items: Vec<Ciphertext> },
    SpeFilter {
        dims: u32,
        slot_bits: u32,
        per_ct: u32,
        mbr_count: u32,
        bucket_slots: u32,
        theta: Vec<Ciphertext>,
        delta: Vec<Ciphertext>,
        buckets: Vec<Ciphertext>,
    },
    SlqMark {
        sigma: u32,
        per_ct: u32,
        count: u32,
        dims: u32,
        nu: Vec<Ciphertext>,
        points: Vec<Ciphertext>,
    },
    Return { token: Token, values: Vec<Ciphertext> },
    Collect { token: Token },
    Close,
}

/// Messages sent back by the DAP.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Response {
    Hello { nonce: Token },
    Bits(Vec<Ciphertext>),
    Products(Vec<Vec<Ciphertext>>),
    Activations(Vec<i128>),
    Ids(Vec<i128>),
    Found(bool),
    Bounds(Vec<i128>),
    /// One-hot selectors (each `width` long) and the matching slot blocks.
    Selected {
        width: u32,
        selectors: Vec<Ciphertext>,
        block: u32,
        items: Vec<Ciphertext>,
    },
    Ack,
    Collected(Vec<i128>),
    Error(String),
}

fn put_cts(out: &mut Vec<u8>, pk: &PublicKey, cts: &[Ciphertext]) {
    codec::put_u32(out, cts.len() as u32);
    for c in cts {
        pk.write_fixed(out, c);
    }
}

fn get_cts(r: &mut Reader<'_>, pk: &PublicKey) -> Result<Vec<Ciphertext>> {
    let n = r.count(pk.ciphertext_bytes())?;
    (0..n).map(|_| Ok(pk.read_fixed(r)?)).collect()
}

fn put_i128s(out: &mut Vec<u8>, vs: &[i128]) {
    codec::put_u32(out, vs.len() as u32);
    for v in vs {
        codec::put_i128(out, *v);
    }
}

fn get_i128s(r: &mut Reader<'_>) -> Result<Vec<i128>> {
    let n = r.count(16)?;
    (0..n).map(|_| Ok(r.i128()?)).collect()
}

fn get_token(r: &mut Reader<'_>) -> Result<Token> {
    Ok(r.take(16)?.try_into().unwrap())
}

fn check_multiple(what: &str, len: usize, unit: u32) -> Result<()> {
    if unit == 0 || len % unit as usize != 0 {
        return Err(Error::Format(format!(
            "{what}: {len} items not a multiple of {unit}"
        )));
    }
    Ok(())
}

impl Request {
    pub fn msg_type(&self) -> u8 {
        match self {
            Request::Hello { .. } => ty::HELLO,
            Request::Sic(_) => ty::SIC,
            Request::Mul(_) => ty::MUL,
            Request::Relu(_) => ty::RELU,
            Request::SbpIds { .. } => ty::SBP_IDS,
            Request::SbpMatch { .. } => ty::SBP_MATCH,
            Request::SpeBounds { .. } => ty::SPE_BOUNDS,
            Request::SpeFilter { .. } => ty::SPE_FILTER,
            Request::SlqMark { .. } => ty::SLQ_MARK,
            Request::Return { .. } => ty::RETURN,
            Request::Collect { .. } => ty::COLLECT,
            Request::Close => ty::CLOSE,
        }
    }

    pub fn ct_count(&self) -> usize {
        match self {
            Request::Hello { .. } | Request::Collect { .. } | Request::Close => 0,
            Request::Sic(v) | Request::Relu(v) => v.len(),
            Request::Mul(groups) => groups.iter().map(|g| 1 + g.ys.len()).sum(),
            Request::SbpIds { items, .. } | Request::SpeBounds { items, .. } => items.len(),
            Request::SbpMatch { query, points, .. } => query.len() + points.len(),
            Request::SpeFilter {
                theta,
                delta,
                buckets,
                ..
            } => theta.len() + delta.len() + buckets.len(),
            Request::SlqMark { nu, points, .. } => nu.len() + points.len(),
            Request::Return { values, .. } => values.len(),
        }
    }

    pub fn encode(&self, pk: &PublicKey) -> Frame {
        let mut p = Vec::new();
        match self {
            Request::Hello { role, nonce } => {
                codec::put_u8(&mut p, *role as u8);
                p.extend_from_slice(nonce);
            }
            Request::Sic(v) | Request::Relu(v) => put_cts(&mut p, pk, v),
            Request::Mul(groups) => {
                codec::put_u32(&mut p, groups.len() as u32);
                for g in groups {
                    pk.write_fixed(&mut p, &g.x);
                    put_cts(&mut p, pk, &g.ys);
                }
            }
            Request::SbpIds { shift, items } | Request::SpeBounds { shift, items } => {
                codec::put_u32(&mut p, *shift);
                put_cts(&mut p, pk, items);
            }
            Request::SbpMatch {
                dims,
                query,
                points,
            } => {
                codec::put_u32(&mut p, *dims);
                put_cts(&mut p, pk, query);
                put_cts(&mut p, pk, points);
            }
            Request::SpeFilter {
                dims,
                slot_bits,
                per_ct,
                mbr_count,
                bucket_slots,
                theta,
                delta,
                buckets,
            } => {
                for v in [dims, slot_bits, per_ct, mbr_count, bucket_slots] {
                    codec::put_u32(&mut p, *v);
                }
                put_cts(&mut p, pk, theta);
                put_cts(&mut p, pk, delta);
                put_cts(&mut p, pk, buckets);
            }
            Request::SlqMark {
                sigma,
                per_ct,
                count,
                dims,
                nu,
                points,
            } => {
                for v in [sigma, per_ct, count, dims] {
                    codec::put_u32(&mut p, *v);
                }
                put_cts(&mut p, pk, nu);
                put_cts(&mut p, pk, points);
            }
            Request::Return { token, values } => {
                p.extend_from_slice(token);
                put_cts(&mut p, pk, values);
            }
            Request::Collect { token } => p.extend_from_slice(token),
            Request::Close => {}
        }
        Frame::new(self.msg_type(), p)
    }

    pub fn decode(pk: &PublicKey, frame: &Frame) -> Result<Self> {
        let mut r = Reader::new(&frame.payload);
        let req = match frame.msg_type {
            ty::HELLO => Request::Hello {
                role: Role::from_u8(r.u8()?)?,
                nonce: get_token(&mut r)?,
            },
            ty::SIC => Request::Sic(get_cts(&mut r, pk)?),
            ty::RELU => Request::Relu(get_cts(&mut r, pk)?),
            ty::MUL => {
                let n = r.count(pk.ciphertext_bytes() + 4)?;
                let mut groups = Vec::with_capacity(n);
                for _ in 0..n {
                    let x = pk.read_fixed(&mut r)?;
                    groups.push(MulGroup {
                        x,
                        ys: get_cts(&mut r, pk)?,
                    });
                }
                Request::Mul(groups)
            }
            ty::SBP_IDS => Request::SbpIds {
                shift: r.u32()?,
                items: get_cts(&mut r, pk)?,
            },
            ty::SPE_BOUNDS => Request::SpeBounds {
                shift: r.u32()?,
                items: get_cts(&mut r, pk)?,
            },
            ty::SBP_MATCH => {
                let dims = r.u32()?;
                let query = get_cts(&mut r, pk)?;
                let points = get_cts(&mut r, pk)?;
                check_multiple("match points", points.len(), dims)?;
                if query.len() != dims as usize {
                    return Err(Error::DimensionMismatch {
                        expected: dims as usize,
                        got: query.len(),
                    });
                }
                Request::SbpMatch {
                    dims,
                    query,
                    points,
                }
            }
            ty::SPE_FILTER => {
                let dims = r.u32()?;
                let slot_bits = r.u32()?;
                let per_ct = r.u32()?;
                let mbr_count = r.u32()?;
                let bucket_slots = r.u32()?;
                let theta = get_cts(&mut r, pk)?;
                let delta = get_cts(&mut r, pk)?;
                let buckets = get_cts(&mut r, pk)?;
                check_multiple("bucket slots", buckets.len(), bucket_slots.max(1))?;
                if mbr_count as usize * bucket_slots as usize != buckets.len() {
                    return Err(Error::Format("bucket count disagrees with mbr count".into()));
                }
                if per_ct == 0 || slot_bits == 0 || dims == 0 {
                    return Err(Error::Format("zero packing parameter".into()));
                }
                Request::SpeFilter {
                    dims,
                    slot_bits,
                    per_ct,
                    mbr_count,
                    bucket_slots,
                    theta,
                    delta,
                    buckets,
                }
            }
            ty::SLQ_MARK => {
                let sigma = r.u32()?;
                let per_ct = r.u32()?;
                let count = r.u32()?;
                let dims = r.u32()?;
                let nu = get_cts(&mut r, pk)?;
                let points = get_cts(&mut r, pk)?;
                if sigma == 0 || per_ct == 0 {
                    return Err(Error::Format("zero packing parameter".into()));
                }
                if points.len() != count as usize * dims as usize {
                    return Err(Error::Format("mark points disagree with count".into()));
                }
                Request::SlqMark {
                    sigma,
                    per_ct,
                    count,
                    dims,
                    nu,
                    points,
                }
            }
            ty::RETURN => Request::Return {
                token: get_token(&mut r)?,
                values: get_cts(&mut r, pk)?,
            },
            ty::COLLECT => Request::Collect {
                token: get_token(&mut r)?,
            },
            ty::CLOSE => Request::Close,
            other => {
                return Err(Error::Format(format!("unknown request type 0x{other:02x}")));
            }
        };
        r.expect_end()?;
        Ok(req)
    }
}

impl Response {
    /// Frame type for a reply to request type `req`.
    pub fn msg_type(&self, req: u8) -> u8 {
        match self {
            Response::Error(_) => ty::ERROR,
            _ => req | ty::REPLY,
        }
    }

    pub fn ct_count(&self) -> usize {
        match self {
            Response::Bits(v) => v.len(),
            Response::Products(g) => g.iter().map(Vec::len).sum(),
            Response::Selected {
                selectors, items, ..
            } => selectors.len() + items.len(),
            _ => 0,
        }
    }

    pub fn encode(&self, pk: &PublicKey, req: u8) -> Frame {
        let mut p = Vec::new();
        match self {
            Response::Hello { nonce } => p.extend_from_slice(nonce),
            Response::Bits(v) => put_cts(&mut p, pk, v),
            Response::Products(groups) => {
                codec::put_u32(&mut p, groups.len() as u32);
                for g in groups {
                    put_cts(&mut p, pk, g);
                }
            }
            Response::Activations(v) | Response::Ids(v) | Response::Bounds(v) => {
                put_i128s(&mut p, v)
            }
            Response::Collected(v) => put_i128s(&mut p, v),
            Response::Found(s) => codec::put_u8(&mut p, *s as u8),
            Response::Selected {
                width,
                selectors,
                block,
                items,
            } => {
                codec::put_u32(&mut p, *width);
                put_cts(&mut p, pk, selectors);
                codec::put_u32(&mut p, *block);
                put_cts(&mut p, pk, items);
            }
            Response::Ack => {}
            Response::Error(msg) => codec::put_bytes(&mut p, msg.as_bytes()),
        }
        Frame::new(self.msg_type(req), p)
    }

    /// Decodes a reply to a request of type `req`.
    pub fn decode(pk: &PublicKey, req: u8, frame: &Frame) -> Result<Self> {
        let mut r = Reader::new(&frame.payload);
        if frame.msg_type == ty::ERROR {
            let msg = String::from_utf8_lossy(r.bytes()?).into_owned();
            return Err(Error::Remote(msg));
        }
        if frame.msg_type != req | ty::REPLY {
            return Err(Error::UnexpectedMessage {
                expected: req | ty::REPLY,
                got: frame.msg_type,
            });
        }
        let resp = match req {
            ty::HELLO => Response::Hello {
                nonce: get_token(&mut r)?,
            },
            ty::SIC => Response::Bits(get_cts(&mut r, pk)?),
            ty::MUL => {
                let n = r.count(4)?;
                let mut groups = Vec::with_capacity(n);
                for _ in 0..n {
                    groups.push(get_cts(&mut r, pk)?);
                }
                Response::Products(groups)
            }
            ty::RELU => Response::Activations(get_i128s(&mut r)?),
            ty::SBP_IDS => Response::Ids(get_i128s(&mut r)?),
            ty::SPE_BOUNDS => Response::Bounds(get_i128s(&mut r)?),
            ty::SBP_MATCH => Response::Found(match r.u8()? {
                0 => false,
                1 => true,
                v => return Err(Error::Format(format!("bad found flag {v}"))),
            }),
            ty::SPE_FILTER | ty::SLQ_MARK => {
                let width = r.u32()?;
                let selectors = get_cts(&mut r, pk)?;
                let block = r.u32()?;
                let items = get_cts(&mut r, pk)?;
                if width == 0 && !selectors.is_empty() {
                    return Err(Error::Format("zero selector width".into()));
                }
                if width > 0 {
                    check_multiple("selectors", selectors.len(), width)?;
                }
                let hits = if width == 0 { 0 } else { selectors.len() / width as usize };
                if hits * block as usize != items.len() {
                    return Err(Error::Format("selected items disagree with selectors".into()));
                }
                Response::Selected {
                    width,
                    selectors,
                    block,
                    items,
                }
            }
            ty::RETURN | ty::CLOSE => Response::Ack,
            ty::COLLECT => Response::Collected(get_i128s(&mut r)?),
            other => {
                return Err(Error::Format(format!("no reply defined for 0x{other:02x}")));
            }
        };
        r.expect_end()?;
        Ok(resp)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::paillier::test_keys::k512;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn cts(n: usize, rng: &mut ChaCha20Rng) -> Vec<Ciphertext> {
        let pk = &k512().pk;
        (0..n)
            .map(|i| pk.encrypt_i128(i as i128 - 2, rng).unwrap())
            .collect()
    }

    #[test]
    fn requests_roundtrip() {
        let pk = &k512().pk;
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let reqs = vec![
            Request::Hello {
                role: Role::Dsp,
                nonce: [7; 16],
            },
            Request::Sic(cts(3, &mut rng)),
            Request::Mul(vec![
                MulGroup {
                    x: cts(1, &mut rng).remove(0),
                    ys: cts(2, &mut rng),
                },
                MulGroup {
                    x: cts(1, &mut rng).remove(0),
                    ys: Vec::new(),
                },
            ]),
            Request::SbpIds {
                shift: 32,
                items: cts(2, &mut rng),
            },
            Request::SbpMatch {
                dims: 2,
                query: cts(2, &mut rng),
                points: cts(4, &mut rng),
            },
            Request::SpeFilter {
                dims: 2,
                slot_bits: 64,
                per_ct: 7,
                mbr_count: 2,
                bucket_slots: 4,
                theta: cts(1, &mut rng),
                delta: cts(2, &mut rng),
                buckets: cts(8, &mut rng),
            },
            Request::SlqMark {
                sigma: 2,
                per_ct: 250,
                count: 2,
                dims: 2,
                nu: cts(1, &mut rng),
                points: cts(4, &mut rng),
            },
            Request::Return {
                token: [1; 16],
                values: cts(2, &mut rng),
            },
            Request::Collect { token: [9; 16] },
            Request::Close,
        ];
        for req in reqs {
            let frame = req.encode(pk);
            assert_eq!(Request::decode(pk, &frame).unwrap(), req);
        }
    }

    #[test]
    fn responses_roundtrip() {
        let pk = &k512().pk;
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let cases = vec![
            (ty::SIC, Response::Bits(cts(2, &mut rng))),
            (ty::MUL, Response::Products(vec![cts(2, &mut rng), Vec::new()])),
            (ty::RELU, Response::Activations(vec![0, 5, -3])),
            (ty::SBP_MATCH, Response::Found(true)),
            (
                ty::SLQ_MARK,
                Response::Selected {
                    width: 3,
                    selectors: cts(6, &mut rng),
                    block: 2,
                    items: cts(4, &mut rng),
                },
            ),
            (ty::RETURN, Response::Ack),
            (ty::COLLECT, Response::Collected(vec![1, 2])),
        ];
        for (req, resp) in cases {
            let frame = resp.encode(pk, req);
            assert_eq!(Response::decode(pk, req, &frame).unwrap(), resp);
        }
    }

    #[test]
    fn frame_length_depends_only_on_counts() {
        let pk = &k512().pk;
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let small = pk.encrypt_i128(0, &mut rng).unwrap();
        let a = Request::Sic(vec![small.clone(), small]).encode(pk);
        let b = Request::Sic(cts(2, &mut rng)).encode(pk);
        assert_eq!(a.wire_len(), b.wire_len());
    }

    #[test]
    fn error_reply_surfaces_as_remote() {
        let pk = &k512().pk;
        let frame = Response::Error("boom".into()).encode(pk, ty::SIC);
        assert!(matches!(
            Response::decode(pk, ty::SIC, &frame),
            Err(Error::Remote(m)) if m == "boom"
        ));
    }

    #[test]
    fn trailing_bytes_rejected() {
        let pk = &k512().pk;
        let mut frame = Request::Close.encode(pk);
        frame.payload.push(0);
        assert!(Request::decode(pk, &frame).is_err());
    }
}
