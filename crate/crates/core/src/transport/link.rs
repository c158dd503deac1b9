//! The DSP's side of a session: a link to the DAP plus the per-session
//! transcript, blinding PRF and counters.

use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::paillier::{hex, PublicKey};
use crate::primitives::Prf;

use super::dap::{DapService, DapSession};
use super::frame::{
    read_frame, write_frame, Direction, Frame, Transcript, PROTOCOL_VERSION,
};
use super::message::{ty, Request, Response, Role, Token};

/// A request-response channel to the DAP.
pub trait DapLink: Send {
    fn exchange(&mut self, frame: &Frame) -> Result<Frame>;
}

/// In-process link. Frames still pass through their byte encoding so that
/// both transports exercise the same parser.
pub struct LocalLink {
    session: DapSession,
    max_frame: usize,
    closed: bool,
}

impl LocalLink {
    pub fn connect(service: &DapService, pk: &PublicKey) -> Result<Self> {
        let session = service.accept(PROTOCOL_VERSION, pk.key_id())?;
        Ok(Self {
            session,
            max_frame: service.config().max_frame,
            closed: false,
        })
    }
}

impl DapLink for LocalLink {
    fn exchange(&mut self, frame: &Frame) -> Result<Frame> {
        if self.closed {
            return Err(Error::Handshake("session already closed".into()));
        }
        let bytes = frame.to_bytes();
        let req = read_frame(&mut bytes.as_slice(), self.max_frame)?;
        let (reply, done) = self.session.handle(&req);
        self.closed = done;
        let bytes = reply.to_bytes();
        read_frame(&mut bytes.as_slice(), self.max_frame)
    }
}

/// Link over any ordered byte stream, normally a `TcpStream`.
pub struct StreamLink<S> {
    stream: S,
    max_frame: usize,
}

impl<S: Read + Write + Send> StreamLink<S> {
    /// Exchanges version and key id with the peer; a mismatch aborts.
    pub fn connect(mut stream: S, pk: &PublicKey, max_frame: usize) -> Result<Self> {
        let mut hello = [0u8; 17];
        hello[0] = PROTOCOL_VERSION;
        hello[1..].copy_from_slice(pk.key_id());
        stream.write_all(&hello)?;
        stream.flush()?;
        let mut peer = [0u8; 17];
        stream
            .read_exact(&mut peer)
            .map_err(|e| Error::Handshake(format!("peer closed during handshake: {e}")))?;
        check_peer_hello(&peer, pk)?;
        Ok(Self { stream, max_frame })
    }

    pub fn into_inner(self) -> S {
        self.stream
    }
}

pub(crate) fn check_peer_hello(peer: &[u8; 17], pk: &PublicKey) -> Result<()> {
    if peer[0] != PROTOCOL_VERSION {
        return Err(Error::Handshake(format!(
            "peer speaks protocol version {}, expected {PROTOCOL_VERSION}",
            peer[0]
        )));
    }
    if &peer[1..] != pk.key_id() {
        return Err(Error::Handshake(format!(
            "key id mismatch: local {}, peer {}",
            hex(pk.key_id()),
            hex(&peer[1..])
        )));
    }
    Ok(())
}

impl<S: Read + Write + Send> DapLink for StreamLink<S> {
    fn exchange(&mut self, frame: &Frame) -> Result<Frame> {
        write_frame(&mut self.stream, frame, self.max_frame)?;
        read_frame(&mut self.stream, self.max_frame)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SessionStats {
    pub round_trips: u64,
    pub sic: u64,
    pub sm: u64,
    pub bytes: u64,
}

/// One open session with the DAP.
pub struct Session {
    pk: PublicKey,
    link: Box<dyn DapLink>,
    role: Role,
    transcript: Transcript,
    prf: Prf,
    counter: u64,
    rng: ChaCha20Rng,
    stats: SessionStats,
    closed: bool,
}

impl Session {
    /// Opens a DSP session. All blinding randomness derives from `seed`.
    pub fn open(link: Box<dyn DapLink>, pk: &PublicKey, seed: &[u8; 32]) -> Result<Self> {
        Self::open_as(link, pk, seed, Role::Dsp)
    }

    pub fn open_as(
        link: Box<dyn DapLink>,
        pk: &PublicKey,
        seed: &[u8; 32],
        role: Role,
    ) -> Result<Self> {
        let derive = |label: &[u8]| -> [u8; 32] {
            let mut h = Sha256::new();
            h.update(label);
            h.update(seed);
            h.finalize().into()
        };
        let nonce: Token = derive(b"nonce")[..16].try_into().unwrap();
        let mut s = Self {
            pk: pk.clone(),
            link,
            role,
            transcript: Transcript::new(),
            prf: Prf::new(derive(b"prf")),
            counter: 0,
            rng: ChaCha20Rng::from_seed(derive(b"rng")),
            stats: SessionStats::default(),
            closed: false,
        };
        match s.call(Request::Hello { role, nonce })? {
            Response::Hello { nonce: echo } if echo == nonce => Ok(s),
            _ => Err(Error::Handshake("HELLO not acknowledged".into())),
        }
    }

    /// Convenience for tests and the browser demo: an in-process DAP session.
    pub fn local(service: &DapService, seed: &[u8; 32]) -> Result<Self> {
        let pk = service.public_key().clone();
        let link = LocalLink::connect(service, &pk)?;
        Self::open(Box::new(link), &pk, seed)
    }

    pub fn pk(&self) -> &PublicKey {
        &self.pk
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn rng(&mut self) -> &mut ChaCha20Rng {
        &mut self.rng
    }

    pub fn transcript(&self) -> &Transcript {
        &self.transcript
    }

    pub fn stats(&self) -> SessionStats {
        self.stats
    }

    pub(crate) fn count_sic(&mut self, n: usize) {
        self.stats.sic += n as u64;
    }

    pub(crate) fn count_sm(&mut self, n: usize) {
        self.stats.sm += n as u64;
    }

    /// Next PRF blinding value, uniform in `[1, bound]`.
    pub fn blind(&mut self, bound: u128) -> i128 {
        let v = self.prf.scalar(self.counter, bound);
        self.counter += 1;
        v
    }

    /// Next PRF blinding value, uniform in `[lo, hi]`.
    pub fn blind_range(&mut self, lo: i128, hi: i128) -> i128 {
        debug_assert!(lo <= hi);
        lo - 1 + self.blind((hi - lo) as u128 + 1)
    }

    pub fn call(&mut self, req: Request) -> Result<Response> {
        if self.closed {
            return Err(Error::Handshake("session already closed".into()));
        }
        let req_type = req.msg_type();
        let frame = req.encode(&self.pk);
        self.transcript
            .record(Direction::DspToDap, &frame, req.ct_count());
        let reply = self.link.exchange(&frame)?;
        self.stats.round_trips += 1;
        self.stats.bytes += (frame.wire_len() + reply.wire_len()) as u64;
        let resp = Response::decode(&self.pk, req_type, &reply);
        let cts = resp.as_ref().map(Response::ct_count).unwrap_or(0);
        self.transcript.record(Direction::DapToDsp, &reply, cts);
        if reply.msg_type == ty::ERROR || req_type == ty::CLOSE {
            self.closed = true;
        }
        resp
    }

    /// Sends CLOSE and returns the session transcript.
    pub fn close(mut self) -> Result<Transcript> {
        if !self.closed {
            self.call(Request::Close)?;
        }
        Ok(self.transcript)
    }
}

/// Connects to the DAP as a client and collects a masked result share.
pub fn collect_share<L: DapLink + 'static>(
    link: L,
    pk: &PublicKey,
    token: Token,
) -> Result<Vec<i128>> {
    let mut seed = [0u8; 32];
    seed[..16].copy_from_slice(&token);
    let mut s = Session::open_as(Box::new(link), pk, &seed, Role::Client)?;
    let out = match s.call(Request::Collect { token })? {
        Response::Collected(v) => v,
        other => return Err(Error::Format(format!("unexpected reply {other:?}"))),
    };
    s.close()?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::paillier::test_keys::k512;
    use crate::transport::dap::DapConfig;

    #[test]
    fn inproc_open_close_is_clean() {
        let svc = DapService::new(k512().clone(), DapConfig::with_seed([3; 32]));
        let s = Session::local(&svc, &[4; 32]).unwrap();
        let t = s.close().unwrap();
        assert_eq!(t.len(), 4);
        let done = svc.finished_transcripts();
        assert_eq!(done.len(), 1);
        assert_eq!(done[0], t);
    }

    #[test]
    fn calls_after_close_fail() {
        let svc = DapService::new(k512().clone(), DapConfig::with_seed([3; 32]));
        let mut s = Session::local(&svc, &[4; 32]).unwrap();
        s.call(Request::Close).unwrap();
        assert!(s.call(Request::Sic(Vec::new())).is_err());
    }

    #[test]
    fn prf_blinding_is_seeded() {
        let svc = DapService::new(k512().clone(), DapConfig::with_seed([3; 32]));
        let mut a = Session::local(&svc, &[9; 32]).unwrap();
        let mut b = Session::local(&svc, &[9; 32]).unwrap();
        let xs: Vec<_> = (0..5).map(|_| a.blind(1 << 40)).collect();
        let ys: Vec<_> = (0..5).map(|_| b.blind(1 << 40)).collect();
        assert_eq!(xs, ys);
        assert!(xs.iter().all(|v| (1..=1 << 40).contains(v)));
    }
}
