//! Query orchestration: the DSP's client-facing server, the client that
//! talks to it, and the glue that runs one query end to end.

use std::io::{Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};
use std::thread::{self, JoinHandle};

use log::{debug, warn};
use sha2::{Digest, Sha256};

use crate::codec::{self, Reader};
use crate::error::{Error, Result};
use crate::index::{apply_delta, Delta, DspIndex};
use crate::paillier::PublicKey;
use crate::protocol::{merge_results, return_results, slq_range_query, EncRangeQuery, QueryTrace};
use crate::transport::message::ty;
use crate::transport::tcp::{client_handshake, connect_dap, server_handshake};
use crate::transport::{
    collect_share, DapLink, DapService, Frame, LocalLink, Session, SessionStats, Token, Transcript,
    DEFAULT_MAX_FRAME,
};
use crate::transport::frame::{read_frame, write_frame};

/// Per-query session seed, so runs are reproducible from one base seed.
pub fn session_seed(base: &[u8; 32], query: u64) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(b"slq-query");
    h.update(base);
    h.update(query.to_be_bytes());
    h.finalize().into()
}

/// Where the DSP finds its DAP.
#[derive(Clone)]
pub enum DapEndpoint {
    Local(DapService),
    Tcp(SocketAddr),
}

impl DapEndpoint {
    pub fn link(&self, pk: &PublicKey) -> Result<Box<dyn DapLink>> {
        Ok(match self {
            DapEndpoint::Local(svc) => Box::new(LocalLink::connect(svc, pk)?),
            DapEndpoint::Tcp(addr) => Box::new(connect_dap(addr, pk, DEFAULT_MAX_FRAME)?),
        })
    }
}

/// The DSP's view of a finished query.
#[derive(Clone, Debug)]
pub struct DspAnswer {
    pub token: Token,
    pub masks: Vec<i128>,
    pub trace: QueryTrace,
    pub transcript: Transcript,
    pub stats: SessionStats,
}

/// Runs SLQ and the result return over one fresh session.
pub fn answer_query(
    idx: &DspIndex,
    link: Box<dyn DapLink>,
    seed: &[u8; 32],
    q: &EncRangeQuery,
) -> Result<DspAnswer> {
    let mut sess = Session::open(link, &idx.pk, seed)?;
    let (results, trace) = slq_range_query(&mut sess, idx, q)?;
    let (token, masks) = return_results(&mut sess, &results)?;
    let stats = sess.stats();
    let transcript = sess.close()?;
    Ok(DspAnswer {
        token,
        masks,
        trace,
        transcript,
        stats,
    })
}

/// Client half of the return: collects the DAP share and removes the masks.
pub fn finish_query(
    dap: &DapEndpoint,
    pk: &PublicKey,
    token: Token,
    masks: &[i128],
    d: usize,
) -> Result<Vec<Vec<u64>>> {
    let masked = match dap {
        DapEndpoint::Local(svc) => collect_share(LocalLink::connect(svc, pk)?, pk, token)?,
        DapEndpoint::Tcp(addr) => collect_share(connect_dap(addr, pk, DEFAULT_MAX_FRAME)?, pk, token)?,
    };
    merge_results(&masked, masks, d)
}

/// Client-side query request.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QueryRequest {
    pub query: EncRangeQuery,
    /// Ask the DSP to append its DSP-DAP transcript (shape only).
    pub want_transcript: bool,
}

/// DSP reply to a [`QueryRequest`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ResultMasks {
    pub token: Token,
    pub d: usize,
    pub masks: Vec<i128>,
    pub transcript: Option<Transcript>,
}

impl QueryRequest {
    pub fn encode(&self, pk: &PublicKey) -> Frame {
        let mut out = Vec::new();
        codec::put_u8(&mut out, self.want_transcript as u8);
        codec::put_u32(&mut out, self.query.dims() as u32);
        for c in self.query.lo.iter().chain(&self.query.hi) {
            pk.write_fixed(&mut out, c);
        }
        Frame::new(ty::QUERY, out)
    }

    pub fn decode(pk: &PublicKey, frame: &Frame) -> Result<Self> {
        if frame.msg_type != ty::QUERY {
            return Err(Error::UnexpectedMessage {
                expected: ty::QUERY,
                got: frame.msg_type,
            });
        }
        let mut r = Reader::new(&frame.payload);
        let want_transcript = match r.u8()? {
            0 => false,
            1 => true,
            v => return Err(Error::Format(format!("bad transcript flag {v}"))),
        };
        let d = r.u32()? as usize;
        if d == 0 || r.remaining() != 2 * d * pk.ciphertext_bytes() {
            return Err(Error::Format("query payload size does not match its dimension".into()));
        }
        let mut read = |n: usize| (0..n).map(|_| pk.read_fixed(&mut r).map_err(Error::from)).collect::<Result<Vec<_>>>();
        let lo = read(d)?;
        let hi = read(d)?;
        Ok(Self {
            query: EncRangeQuery { lo, hi },
            want_transcript,
        })
    }
}

impl ResultMasks {
    pub fn encode(&self) -> Frame {
        let mut out = Vec::with_capacity(25 + 16 * self.masks.len());
        out.extend_from_slice(&self.token);
        codec::put_u32(&mut out, self.d as u32);
        codec::put_u32(&mut out, self.masks.len() as u32);
        for &m in &self.masks {
            codec::put_i128(&mut out, m);
        }
        match &self.transcript {
            Some(t) => {
                codec::put_u8(&mut out, 1);
                codec::put_bytes(&mut out, t.to_text().as_bytes());
            }
            None => codec::put_u8(&mut out, 0),
        }
        Frame::new(ty::RESULT_MASKS, out)
    }

    pub fn decode(frame: &Frame) -> Result<Self> {
        match frame.msg_type {
            ty::RESULT_MASKS => {}
            ty::ERROR => return Err(Error::Remote(String::from_utf8_lossy(&frame.payload).into_owned())),
            got => {
                return Err(Error::UnexpectedMessage {
                    expected: ty::RESULT_MASKS,
                    got,
                })
            }
        }
        let mut r = Reader::new(&frame.payload);
        let token: Token = r.take(16)?.try_into().unwrap();
        let d = r.u32()? as usize;
        let count = r.count(16)?;
        let masks = (0..count).map(|_| r.i128()).collect::<Result<Vec<_>, _>>()?;
        let transcript = match r.u8()? {
            0 => None,
            1 => Some(Transcript::from_text(std::str::from_utf8(r.bytes()?).map_err(|_| {
                Error::Format("transcript is not UTF-8".into())
            })?)?),
            v => return Err(Error::Format(format!("bad transcript flag {v}"))),
        };
        r.expect_end()?;
        if d == 0 || masks.len() % d != 0 {
            return Err(Error::ShareMismatch(format!("{} masks for dimension {d}", masks.len())));
        }
        Ok(Self {
            token,
            d,
            masks,
            transcript,
        })
    }
}

/// Serves client queries against a loaded index.
#[derive(Clone)]
pub struct DspServer {
    index: Arc<RwLock<DspIndex>>,
    dap: DapEndpoint,
    seed: [u8; 32],
    queries: Arc<AtomicU64>,
    max_frame: usize,
}

impl DspServer {
    pub fn new(index: DspIndex, dap: DapEndpoint, seed: [u8; 32]) -> Self {
        Self {
            index: Arc::new(RwLock::new(index)),
            dap,
            seed,
            queries: Arc::new(AtomicU64::new(0)),
            max_frame: DEFAULT_MAX_FRAME,
        }
    }

    pub fn pk(&self) -> PublicKey {
        self.index.read().unwrap().pk.clone()
    }

    pub fn apply_delta(&self, delta: &Delta) -> Result<()> {
        apply_delta(&mut self.index.write().unwrap(), delta)
    }

    pub fn answer(&self, q: &EncRangeQuery) -> Result<DspAnswer> {
        let n = self.queries.fetch_add(1, Ordering::SeqCst);
        let idx = self.index.read().unwrap();
        let link = self.dap.link(&idx.pk)?;
        answer_query(&idx, link, &session_seed(&self.seed, n), q)
    }

    fn reply(&self, pk: &PublicKey, frame: &Frame) -> Result<Frame> {
        let req = QueryRequest::decode(pk, frame)?;
        let ans = self.answer(&req.query)?;
        debug!(
            "query scanned buckets {}..={}, {} candidates, {} results",
            ans.trace.beta_low, ans.trace.beta_upp, ans.trace.candidates, ans.trace.results
        );
        Ok(ResultMasks {
            token: ans.token,
            d: req.query.dims(),
            masks: ans.masks,
            transcript: req.want_transcript.then_some(ans.transcript),
        }
        .encode())
    }

    /// Handles one client connection until CLOSE or an error.
    pub fn serve_connection<S: Read + Write>(&self, mut stream: S) -> Result<()> {
        let pk = self.pk();
        server_handshake(&mut stream, &pk)?;
        loop {
            let frame = read_frame(&mut stream, self.max_frame)?;
            if frame.msg_type == ty::CLOSE {
                write_frame(&mut stream, &Frame::new(ty::CLOSE | ty::REPLY, Vec::new()), self.max_frame)?;
                return Ok(());
            }
            match self.reply(&pk, &frame) {
                Ok(out) => write_frame(&mut stream, &out, self.max_frame)?,
                Err(e) => {
                    let msg = e.to_string().into_bytes();
                    write_frame(&mut stream, &Frame::new(ty::ERROR, msg), self.max_frame)?;
                    return Err(e);
                }
            }
        }
    }

    /// Accept loop; one thread per connection. Stops after `limit`
    /// connections when given.
    pub fn run(self, listener: TcpListener, limit: Option<usize>) -> Result<()> {
        let mut workers = Vec::new();
        for (i, conn) in listener.incoming().enumerate() {
            let stream = conn?;
            stream.set_nodelay(true).ok();
            let me = self.clone();
            workers.push(thread::spawn(move || {
                let peer = stream.peer_addr().ok();
                if let Err(e) = me.serve_connection(stream) {
                    warn!("client {peer:?}: {e}");
                }
            }));
            if limit.is_some_and(|l| i + 1 >= l) {
                break;
            }
        }
        for w in workers {
            w.join().ok();
        }
        Ok(())
    }
}

pub fn spawn_dsp_server<A: ToSocketAddrs>(
    server: DspServer,
    addr: A,
    limit: Option<usize>,
) -> Result<(SocketAddr, JoinHandle<Result<()>>)> {
    let listener = TcpListener::bind(addr)?;
    let local = listener.local_addr()?;
    Ok((local, thread::spawn(move || server.run(listener, limit))))
}

/// Client connection to a DSP server.
pub struct DspClient {
    stream: TcpStream,
    pk: PublicKey,
}

impl DspClient {
    pub fn connect<A: ToSocketAddrs>(addr: A, pk: &PublicKey) -> Result<Self> {
        let mut stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true).ok();
        client_handshake(&mut stream, pk)?;
        Ok(Self {
            stream,
            pk: pk.clone(),
        })
    }

    pub fn query(&mut self, req: &QueryRequest) -> Result<ResultMasks> {
        write_frame(&mut self.stream, &req.encode(&self.pk), DEFAULT_MAX_FRAME)?;
        let reply = read_frame(&mut self.stream, DEFAULT_MAX_FRAME)?;
        let out = ResultMasks::decode(&reply)?;
        if out.d != req.query.dims() {
            return Err(Error::ShareMismatch("reply dimension differs from the query".into()));
        }
        Ok(out)
    }

    pub fn close(mut self) -> Result<()> {
        write_frame(&mut self.stream, &Frame::new(ty::CLOSE, Vec::new()), DEFAULT_MAX_FRAME)?;
        read_frame(&mut self.stream, DEFAULT_MAX_FRAME)?;
        Ok(())
    }
}
