//! The DAP: the only party holding the secret key. It decrypts blinded
//! values, answers comparisons and permutes, and never sees the index.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use num_bigint::BigInt;
use num_traits::{One, Signed, ToPrimitive, Zero};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::paillier::{Ciphertext, KeyId, KeyPair, PublicKey};
use crate::primitives::{round_div_pow2, unpack, Permutation};

use super::frame::{Direction, Frame, Transcript, PROTOCOL_VERSION};
use super::message::{Request, Response, Role, Token};

/// What a decrypted value was, for the blinding audit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AuditKind {
    Sic,
    Mul,
    Relu,
    Ids,
    Match,
    Bounds,
    Filter,
    Mark,
    Return,
}

impl AuditKind {
    /// Kinds whose plaintexts are indicator bits rather than blinded values.
    pub fn is_indicator(self) -> bool {
        matches!(self, AuditKind::Mark)
    }
}

#[derive(Clone, Debug)]
pub struct AuditRecord {
    pub kind: AuditKind,
    pub value: BigInt,
}

#[derive(Clone, Debug)]
pub struct DapConfig {
    /// Seed for per-session randomness; mixed with the DSP's session nonce.
    pub seed: [u8; 32],
    pub max_frame: usize,
    pub audit: bool,
    /// Serve each TCP connection on its own thread.
    pub threaded: bool,
}

impl DapConfig {
    pub fn with_seed(seed: [u8; 32]) -> Self {
        Self {
            seed,
            max_frame: super::frame::DEFAULT_MAX_FRAME,
            audit: false,
            threaded: false,
        }
    }

    pub fn random() -> Self {
        let mut seed = [0u8; 32];
        rand::rngs::OsRng.fill_bytes(&mut seed);
        Self::with_seed(seed)
    }
}

const TRANSCRIPT_SINK: usize = 64;

struct Shared {
    kp: KeyPair,
    cfg: DapConfig,
    mailbox: Mutex<HashMap<Token, Vec<i128>>>,
    audit: Mutex<Vec<AuditRecord>>,
    finished: Mutex<Vec<Transcript>>,
}

/// Shared DAP state: the key pair, the result mailbox and the transcript sink.
#[derive(Clone)]
pub struct DapService {
    shared: Arc<Shared>,
}

impl DapService {
    pub fn new(kp: KeyPair, cfg: DapConfig) -> Self {
        kp.pk.precompute();
        Self {
            shared: Arc::new(Shared {
                kp,
                cfg,
                mailbox: Mutex::new(HashMap::new()),
                audit: Mutex::new(Vec::new()),
                finished: Mutex::new(Vec::new()),
            }),
        }
    }

    pub fn public_key(&self) -> &PublicKey {
        &self.shared.kp.pk
    }

    pub fn config(&self) -> &DapConfig {
        &self.shared.cfg
    }

    /// Checks the peer's version and key id and opens a session.
    pub fn accept(&self, version: u8, key_id: &KeyId) -> Result<DapSession> {
        if version != PROTOCOL_VERSION {
            return Err(Error::Handshake(format!(
                "protocol version {version}, expected {PROTOCOL_VERSION}"
            )));
        }
        if key_id != self.public_key().key_id() {
            return Err(Error::Handshake(format!(
                "key id {} does not match the DAP key {}",
                crate::paillier::hex(key_id),
                crate::paillier::hex(self.public_key().key_id())
            )));
        }
        Ok(DapSession {
            service: self.clone(),
            role: None,
            rng: None,
            transcript: Transcript::new(),
        })
    }

    pub fn audit_log(&self) -> Vec<AuditRecord> {
        self.shared.audit.lock().unwrap().clone()
    }

    pub fn clear_audit(&self) {
        self.shared.audit.lock().unwrap().clear();
    }

    /// Transcripts of the most recently closed sessions, oldest first.
    pub fn finished_transcripts(&self) -> Vec<Transcript> {
        self.shared.finished.lock().unwrap().clone()
    }

    pub fn pending_results(&self) -> usize {
        self.shared.mailbox.lock().unwrap().len()
    }

    fn record(&self, kind: AuditKind, value: &BigInt) {
        if self.shared.cfg.audit {
            self.shared.audit.lock().unwrap().push(AuditRecord {
                kind,
                value: value.clone(),
            });
        }
    }
}

/// One DSP or client connection at the DAP.
pub struct DapSession {
    service: DapService,
    role: Option<Role>,
    rng: Option<ChaCha20Rng>,
    transcript: Transcript,
}

impl DapSession {
    pub fn transcript(&self) -> &Transcript {
        &self.transcript
    }

    /// Handles one request frame. The boolean is true once the session is over.
    pub fn handle(&mut self, frame: &Frame) -> (Frame, bool) {
        let pk = self.service.public_key().clone();
        let (reply, done) = match Request::decode(&pk, frame) {
            Ok(req) => {
                self.transcript
                    .record(Direction::DspToDap, frame, req.ct_count());
                let done = matches!(req, Request::Close);
                match self.dispatch(req) {
                    Ok(resp) => (resp, done),
                    Err(e) => (Response::Error(e.to_string()), true),
                }
            }
            Err(e) => {
                self.transcript.record(Direction::DspToDap, frame, 0);
                (Response::Error(e.to_string()), true)
            }
        };
        let out = reply.encode(&pk, frame.msg_type);
        self.transcript
            .record(Direction::DapToDsp, &out, reply.ct_count());
        if done {
            self.finish();
        }
        (out, done)
    }

    fn finish(&mut self) {
        let mut sink = self.service.shared.finished.lock().unwrap();
        if sink.len() == TRANSCRIPT_SINK {
            sink.remove(0);
        }
        sink.push(std::mem::take(&mut self.transcript));
    }

    fn kp(&self) -> &KeyPair {
        &self.service.shared.kp
    }

    fn decrypt(&self, kind: AuditKind, c: &Ciphertext) -> Result<BigInt> {
        let v = self.kp().decrypt(c)?;
        self.service.record(kind, &v);
        Ok(v)
    }

    fn decrypt_i128(&self, kind: AuditKind, c: &Ciphertext) -> Result<i128> {
        self.decrypt(kind, c)?
            .to_i128()
            .ok_or_else(|| Error::BoundExceeded(format!("{kind:?} plaintext exceeds 128 bits")))
    }

    fn rng(&mut self) -> Result<&mut ChaCha20Rng> {
        self.rng
            .as_mut()
            .ok_or_else(|| Error::Handshake("request before HELLO".into()))
    }

    fn encrypt_bit(&mut self, bit: bool) -> Result<Ciphertext> {
        let pk = self.service.public_key().clone();
        Ok(pk.encrypt_i128(bit as i128, self.rng()?)?)
    }

    fn rerandomize(&mut self, c: &Ciphertext) -> Result<Ciphertext> {
        let pk = self.service.public_key().clone();
        Ok(pk.rerandomize(c, self.rng()?)?)
    }

    fn require(&self, role: Role) -> Result<()> {
        match self.role {
            Some(r) if r == role => Ok(()),
            Some(r) => Err(Error::Handshake(format!("{r:?} may not issue this request"))),
            None => Err(Error::Handshake("request before HELLO".into())),
        }
    }

    fn one_hot(&mut self, width: usize, at: usize) -> Result<Vec<Ciphertext>> {
        (0..width).map(|k| self.encrypt_bit(k == at)).collect()
    }

    fn dispatch(&mut self, req: Request) -> Result<Response> {
        match req {
            Request::Hello { role, nonce } => {
                if self.role.is_some() {
                    return Err(Error::Handshake("duplicate HELLO".into()));
                }
                let mut h = Sha256::new();
                h.update(self.service.shared.cfg.seed);
                h.update(nonce);
                self.rng = Some(ChaCha20Rng::from_seed(h.finalize().into()));
                self.role = Some(role);
                Ok(Response::Hello { nonce })
            }
            Request::Close => Ok(Response::Ack),
            Request::Collect { token } => {
                self.require(Role::Client)?;
                let vals = self
                    .service
                    .shared
                    .mailbox
                    .lock()
                    .unwrap()
                    .remove(&token)
                    .ok_or_else(|| Error::InvalidInput("unknown result token".into()))?;
                Ok(Response::Collected(vals))
            }
            other => {
                self.require(Role::Dsp)?;
                self.dispatch_dsp(other)
            }
        }
    }

    fn dispatch_dsp(&mut self, req: Request) -> Result<Response> {
        let pk = self.service.public_key().clone();
        match req {
            Request::Sic(items) => {
                let mut out = Vec::with_capacity(items.len());
                for c in &items {
                    let v = self.decrypt(AuditKind::Sic, c)?;
                    out.push(self.encrypt_bit(v.is_positive())?);
                }
                Ok(Response::Bits(out))
            }
            Request::Mul(groups) => {
                let mut out = Vec::with_capacity(groups.len());
                for g in &groups {
                    let x = self.decrypt(AuditKind::Mul, &g.x)?;
                    let mut row = Vec::with_capacity(g.ys.len());
                    for y in &g.ys {
                        let prod = pk.scalar_mul(y, &x)?;
                        row.push(self.rerandomize(&prod)?);
                    }
                    out.push(row);
                }
                Ok(Response::Products(out))
            }
            Request::Relu(items) => {
                let acts = items
                    .iter()
                    .map(|c| Ok(self.decrypt_i128(AuditKind::Relu, c)?.max(0)))
                    .collect::<Result<Vec<_>>>()?;
                Ok(Response::Activations(acts))
            }
            Request::SbpIds { shift, items } => {
                let ids = self.rescale(AuditKind::Ids, shift, &items)?;
                let pi = Permutation::random(ids.len(), self.rng()?);
                Ok(Response::Ids(pi.apply(&ids)?))
            }
            Request::SpeBounds { shift, items } => {
                Ok(Response::Bounds(self.rescale(AuditKind::Bounds, shift, &items)?))
            }
            Request::SbpMatch {
                dims,
                query,
                points,
            } => {
                let q = query
                    .iter()
                    .map(|c| self.decrypt(AuditKind::Match, c))
                    .collect::<Result<Vec<_>>>()?;
                let mut found = false;
                for p in points.chunks(dims as usize) {
                    let mut equal = true;
                    for (c, qv) in p.iter().zip(&q) {
                        // every slot is decrypted so the work is independent of the outcome
                        equal &= self.decrypt(AuditKind::Match, c)? == *qv;
                    }
                    found |= equal;
                }
                Ok(Response::Found(found))
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
                let d = dims as usize;
                let q = self.unpack_all(AuditKind::Filter, &theta, slot_bits, per_ct, 2 * d)?;
                let mbrs = self.unpack_all(
                    AuditKind::Filter,
                    &delta,
                    slot_bits,
                    per_ct,
                    2 * d * mbr_count as usize,
                )?;
                let width = mbr_count as usize;
                let block = bucket_slots as usize;
                let mut selectors = Vec::new();
                let mut items = Vec::new();
                for (i, m) in mbrs.chunks(2 * d).enumerate() {
                    let hit = (0..d).all(|j| m[j] <= q[d + j] && q[j] <= m[d + j]);
                    if hit {
                        selectors.extend(self.one_hot(width, i)?);
                        for c in &buckets[i * block..(i + 1) * block] {
                            items.push(self.rerandomize(c)?);
                        }
                    }
                }
                Ok(Response::Selected {
                    width: mbr_count,
                    selectors,
                    block: bucket_slots,
                    items,
                })
            }
            Request::SlqMark {
                sigma,
                per_ct,
                count,
                dims,
                nu,
                points,
            } => {
                let marks = self.unpack_all(AuditKind::Mark, &nu, sigma, per_ct, count as usize)?;
                let d = dims as usize;
                let mut selectors = Vec::new();
                let mut items = Vec::new();
                for (i, m) in marks.iter().enumerate() {
                    if m.is_one() {
                        selectors.extend(self.one_hot(count as usize, i)?);
                        for c in &points[i * d..(i + 1) * d] {
                            items.push(self.rerandomize(c)?);
                        }
                    } else if !m.is_zero() {
                        return Err(Error::InvalidInput(format!("mark slot holds {m}")));
                    }
                }
                Ok(Response::Selected {
                    width: count,
                    selectors,
                    block: dims,
                    items,
                })
            }
            Request::Return { token, values } => {
                let vals = values
                    .iter()
                    .map(|c| self.decrypt_i128(AuditKind::Return, c))
                    .collect::<Result<Vec<_>>>()?;
                let mut mb = self.service.shared.mailbox.lock().unwrap();
                if mb.insert(token, vals).is_some() {
                    return Err(Error::InvalidInput("duplicate result token".into()));
                }
                Ok(Response::Ack)
            }
            Request::Hello { .. } | Request::Close | Request::Collect { .. } => unreachable!(),
        }
    }

    fn rescale(&self, kind: AuditKind, shift: u32, items: &[Ciphertext]) -> Result<Vec<i128>> {
        items
            .iter()
            .map(|c| {
                let v = self.decrypt(kind, c)?;
                round_div_pow2(&v, shift)
                    .to_i128()
                    .ok_or_else(|| Error::BoundExceeded("rescaled id exceeds 128 bits".into()))
            })
            .collect()
    }

    fn unpack_all(
        &self,
        kind: AuditKind,
        cts: &[Ciphertext],
        slot_bits: u32,
        per_ct: u32,
        total: usize,
    ) -> Result<Vec<BigInt>> {
        let per = per_ct as usize;
        if cts.len() != total.div_ceil(per) {
            return Err(Error::Format(format!(
                "{} packed ciphertexts for {total} slots of {per}",
                cts.len()
            )));
        }
        if slot_bits as u64 * per_ct as u64 > self.kp().pk.plaintext_bits() {
            return Err(Error::BoundExceeded("packing exceeds the plaintext space".into()));
        }
        let mut out = Vec::with_capacity(total);
        for (k, c) in cts.iter().enumerate() {
            let lambda = per.min(total - k * per);
            let v = self.decrypt(kind, c)?;
            let v = v
                .to_biguint()
                .ok_or_else(|| Error::InvalidInput("negative packed value".into()))?;
            out.extend(
                unpack(&v, slot_bits, lambda)?
                    .into_iter()
                    .map(BigInt::from),
            );
        }
        Ok(out)
    }
}

/// Runs the raw handshake bytes exchange for an in-memory peer.
pub fn handshake_bytes(pk: &PublicKey) -> [u8; 17] {
    let mut out = [0u8; 17];
    out[0] = PROTOCOL_VERSION;
    out[1..].copy_from_slice(pk.key_id());
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::paillier::test_keys::k512;
    use crate::transport::message::ty;

    fn session(audit: bool) -> (DapService, DapSession) {
        let kp = k512().clone();
        let mut cfg = DapConfig::with_seed([1; 32]);
        cfg.audit = audit;
        let svc = DapService::new(kp, cfg);
        let mut s = svc.accept(PROTOCOL_VERSION, svc.public_key().key_id()).unwrap();
        let pk = svc.public_key().clone();
        let hello = Request::Hello {
            role: Role::Dsp,
            nonce: [2; 16],
        };
        let (reply, done) = s.handle(&hello.encode(&pk));
        assert!(!done);
        assert_eq!(reply.msg_type, ty::HELLO | ty::REPLY);
        (svc, s)
    }

    #[test]
    fn rejects_wrong_version_and_key() {
        let svc = DapService::new(k512().clone(), DapConfig::with_seed([0; 32]));
        assert!(svc.accept(9, svc.public_key().key_id()).is_err());
        assert!(matches!(
            svc.accept(PROTOCOL_VERSION, &[0u8; 16]),
            Err(Error::Handshake(_))
        ));
    }

    #[test]
    fn requests_before_hello_abort() {
        let svc = DapService::new(k512().clone(), DapConfig::with_seed([0; 32]));
        let mut s = svc.accept(PROTOCOL_VERSION, svc.public_key().key_id()).unwrap();
        let (reply, done) = s.handle(&Request::Sic(Vec::new()).encode(svc.public_key()));
        assert!(done);
        assert_eq!(reply.msg_type, ty::ERROR);
    }

    #[test]
    fn malformed_frame_aborts_session() {
        let (_svc, mut s) = session(false);
        let (reply, done) = s.handle(&Frame::new(ty::SIC, vec![0, 0, 0, 9]));
        assert!(done);
        assert_eq!(reply.msg_type, ty::ERROR);
    }

    #[test]
    fn relu_and_found() {
        let (svc, mut s) = session(true);
        let pk = svc.public_key().clone();
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let items = vec![
            pk.encrypt_i128(-5, &mut rng).unwrap(),
            pk.encrypt_i128(7, &mut rng).unwrap(),
        ];
        let (f, _) = s.handle(&Request::Relu(items).encode(&pk));
        assert_eq!(
            Response::decode(&pk, ty::RELU, &f).unwrap(),
            Response::Activations(vec![0, 7])
        );
        let enc = |v: i128, rng: &mut ChaCha20Rng| pk.encrypt_i128(v, rng).unwrap();
        let req = Request::SbpMatch {
            dims: 2,
            query: vec![enc(3, &mut rng), enc(4, &mut rng)],
            points: vec![
                enc(1, &mut rng),
                enc(4, &mut rng),
                enc(3, &mut rng),
                enc(4, &mut rng),
            ],
        };
        let (f, _) = s.handle(&req.encode(&pk));
        assert_eq!(
            Response::decode(&pk, ty::SBP_MATCH, &f).unwrap(),
            Response::Found(true)
        );
        assert_eq!(svc.audit_log().len(), 2 + 6);
    }

    #[test]
    fn mailbox_collect_requires_client_role() {
        let (svc, mut s) = session(false);
        let pk = svc.public_key().clone();
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let req = Request::Return {
            token: [5; 16],
            values: vec![pk.encrypt_i128(11, &mut rng).unwrap()],
        };
        let (f, _) = s.handle(&req.encode(&pk));
        assert_eq!(Response::decode(&pk, ty::RETURN, &f).unwrap(), Response::Ack);
        let (f, done) = s.handle(&Request::Collect { token: [5; 16] }.encode(&pk));
        assert!(done);
        assert_eq!(f.msg_type, ty::ERROR);

        let mut c = svc.accept(PROTOCOL_VERSION, pk.key_id()).unwrap();
        c.handle(
            &Request::Hello {
                role: Role::Client,
                nonce: [0; 16],
            }
            .encode(&pk),
        );
        let (f, _) = c.handle(&Request::Collect { token: [5; 16] }.encode(&pk));
        assert_eq!(
            Response::decode(&pk, ty::COLLECT, &f).unwrap(),
            Response::Collected(vec![11])
        );
        assert_eq!(svc.pending_results(), 0);
    }
}
