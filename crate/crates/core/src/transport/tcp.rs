//! TCP serving for the DAP.

use std::io::{Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::thread::{self, JoinHandle};

use log::{debug, warn};

use crate::error::{Error, Result};
use crate::paillier::PublicKey;

use super::dap::{handshake_bytes, DapService};
use super::frame::{read_frame, write_frame};
use super::link::{check_peer_hello, StreamLink};

/// Serves one connection until the peer closes the session or errs.
pub fn serve_dap_connection<S: Read + Write>(svc: &DapService, mut stream: S) -> Result<()> {
    let mut peer = [0u8; 17];
    stream.read_exact(&mut peer)?;
    stream.write_all(&handshake_bytes(svc.public_key()))?;
    stream.flush()?;
    let mut session = svc.accept(peer[0], peer[1..].try_into().unwrap())?;
    let max = svc.config().max_frame;
    loop {
        let frame = match read_frame(&mut stream, max) {
            Ok(f) => f,
            Err(Error::Io(e)) if e.kind() == std::io::ErrorKind::UnexpectedEof => {
                return Err(Error::Handshake("peer disconnected mid-session".into()));
            }
            Err(e) => return Err(e),
        };
        let (reply, done) = session.handle(&frame);
        write_frame(&mut stream, &reply, max)?;
        if done {
            return Ok(());
        }
    }
}

/// Accepts connections forever, or until `limit` connections were served.
/// A failing session is logged and does not stop the server.
pub fn run_dap_server(svc: DapService, listener: TcpListener, limit: Option<usize>) -> Result<()> {
    let mut workers = Vec::new();
    for (i, conn) in listener.incoming().enumerate() {
        let stream = conn?;
        stream.set_nodelay(true).ok();
        if svc.config().threaded {
            let svc = svc.clone();
            workers.push(thread::spawn(move || serve_logged(&svc, stream)));
        } else {
            serve_logged(&svc, stream);
        }
        if limit.is_some_and(|l| i + 1 >= l) {
            break;
        }
    }
    for w in workers {
        let _ = w.join();
    }
    Ok(())
}

fn serve_logged(svc: &DapService, stream: TcpStream) {
    let peer = stream.peer_addr().ok();
    match serve_dap_connection(svc, stream) {
        Ok(()) => debug!("session from {peer:?} closed"),
        Err(e) => warn!("session from {peer:?} aborted: {e}"),
    }
}

/// Binds `addr` and serves on a background thread.
pub fn spawn_dap_server<A: ToSocketAddrs>(
    svc: DapService,
    addr: A,
    limit: Option<usize>,
) -> Result<(SocketAddr, JoinHandle<Result<()>>)> {
    let listener = TcpListener::bind(addr)?;
    let local = listener.local_addr()?;
    let handle = thread::spawn(move || run_dap_server(svc, listener, limit));
    Ok((local, handle))
}

pub fn connect_dap<A: ToSocketAddrs>(
    addr: A,
    pk: &PublicKey,
    max_frame: usize,
) -> Result<StreamLink<TcpStream>> {
    let stream = TcpStream::connect(addr)?;
    stream.set_nodelay(true).ok();
    StreamLink::connect(stream, pk, max_frame)
}

/// Client side of the raw handshake for non-DAP peers such as the DSP server.
pub fn client_handshake<S: Read + Write>(stream: &mut S, pk: &PublicKey) -> Result<()> {
    stream.write_all(&handshake_bytes(pk))?;
    stream.flush()?;
    let mut peer = [0u8; 17];
    stream.read_exact(&mut peer)?;
    check_peer_hello(&peer, pk)
}

/// Server side of the raw handshake: replies with our own identity, then
/// checks the peer's.
pub fn server_handshake<S: Read + Write>(stream: &mut S, pk: &PublicKey) -> Result<()> {
    let mut peer = [0u8; 17];
    stream.read_exact(&mut peer)?;
    stream.write_all(&handshake_bytes(pk))?;
    stream.flush()?;
    check_peer_hello(&peer, pk)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::paillier::test_keys::k512;
    use crate::paillier::{keygen, KeyPair};
    use crate::transport::dap::DapConfig;
    use crate::transport::frame::DEFAULT_MAX_FRAME;
    use crate::transport::link::Session;
    use crate::transport::message::{Request, Response};
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn connect_to_closed_port_fails() {
        let l = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = l.local_addr().unwrap();
        drop(l);
        assert!(matches!(
            connect_dap(addr, &k512().pk, DEFAULT_MAX_FRAME),
            Err(Error::Io(_))
        ));
    }

    #[test]
    fn key_mismatch_aborts_with_diagnostic() {
        let svc = DapService::new(k512().clone(), DapConfig::with_seed([0; 32]));
        let (addr, h) = spawn_dap_server(svc, "127.0.0.1:0", Some(1)).unwrap();
        let other: KeyPair = keygen(512, &mut ChaCha20Rng::seed_from_u64(77)).unwrap();
        let err = connect_dap(addr, &other.pk, DEFAULT_MAX_FRAME).err().unwrap();
        assert!(err.to_string().contains("key id mismatch"), "{err}");
        h.join().unwrap().unwrap();
    }

    #[test]
    fn server_survives_malformed_frame() {
        let svc = DapService::new(k512().clone(), DapConfig::with_seed([0; 32]));
        let pk = svc.public_key().clone();
        let (addr, h) = spawn_dap_server(svc.clone(), "127.0.0.1:0", Some(2)).unwrap();

        let mut raw = TcpStream::connect(addr).unwrap();
        client_handshake(&mut raw, &pk).unwrap();
        write_frame(&mut raw, &super::super::frame::Frame::new(0x55, vec![1]), 1024).unwrap();
        let reply = read_frame(&mut raw, DEFAULT_MAX_FRAME).unwrap();
        assert_eq!(reply.msg_type, super::super::message::ty::ERROR);
        drop(raw);

        let link = connect_dap(addr, &pk, DEFAULT_MAX_FRAME).unwrap();
        let mut s = Session::open(Box::new(link), &pk, &[1; 32]).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let c = pk.encrypt_i128(-4, &mut rng).unwrap();
        match s.call(Request::Relu(vec![c])).unwrap() {
            Response::Activations(v) => assert_eq!(v, vec![0]),
            other => panic!("{other:?}"),
        }
        s.close().unwrap();
        h.join().unwrap().unwrap();
        assert_eq!(svc.finished_transcripts().len(), 2);
    }
}
