//! Length-prefixed frames and the per-session transcript.
//!
//! A frame is `length: u32 BE | msg_type: u8 | payload`, where `length`
//! counts the type byte plus the payload.

use std::fmt;
use std::io::{Read, Write};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const PROTOCOL_VERSION: u8 = 1;
pub const DEFAULT_MAX_FRAME: usize = 64 << 20;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    pub msg_type: u8,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn new(msg_type: u8, payload: Vec<u8>) -> Self {
        Self { msg_type, payload }
    }

    /// Bytes this frame occupies on the wire, header included.
    pub fn wire_len(&self) -> usize {
        5 + self.payload.len()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.wire_len());
        out.extend_from_slice(&((self.payload.len() + 1) as u32).to_be_bytes());
        out.push(self.msg_type);
        out.extend_from_slice(&self.payload);
        out
    }
}

pub fn write_frame<W: Write>(w: &mut W, frame: &Frame, max: usize) -> Result<()> {
    if frame.payload.len() + 1 > max {
        return Err(Error::FrameTooLarge {
            len: frame.payload.len() + 1,
            max,
        });
    }
    w.write_all(&((frame.payload.len() + 1) as u32).to_be_bytes())?;
    w.write_all(&[frame.msg_type])?;
    w.write_all(&frame.payload)?;
    w.flush()?;
    Ok(())
}

/// Reads one frame; the declared length is checked against `max` before any
/// payload buffer is allocated.
pub fn read_frame<R: Read>(r: &mut R, max: usize) -> Result<Frame> {
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let len = u32::from_be_bytes(len) as usize;
    if len == 0 {
        return Err(Error::Format("zero-length frame".into()));
    }
    if len > max {
        return Err(Error::FrameTooLarge { len, max });
    }
    let mut ty = [0u8; 1];
    r.read_exact(&mut ty)?;
    let mut payload = vec![0u8; len - 1];
    r.read_exact(&mut payload)?;
    Ok(Frame {
        msg_type: ty[0],
        payload,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Direction {
    DspToDap,
    DapToDsp,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Direction::DspToDap => f.write_str("DSP->DAP"),
            Direction::DapToDsp => f.write_str("DAP->DSP"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TranscriptEntry {
    pub direction: Direction,
    pub msg_type: u8,
    pub ct_count: u32,
    pub byte_len: u32,
}

/// Append-only record of every frame exchanged in one session. Equality
/// compares the shape only; [`Transcript::digest`] covers the bytes.
#[derive(Clone, Debug, Default)]
pub struct Transcript {
    entries: Vec<TranscriptEntry>,
    digest: [u8; 32],
}

impl PartialEq for Transcript {
    fn eq(&self, other: &Self) -> bool {
        self.entries == other.entries
    }
}

impl Eq for Transcript {}

impl Transcript {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, direction: Direction, frame: &Frame, ct_count: usize) {
        self.entries.push(TranscriptEntry {
            direction,
            msg_type: frame.msg_type,
            ct_count: ct_count as u32,
            byte_len: frame.wire_len() as u32,
        });
        let mut h = Sha256::new();
        h.update(self.digest);
        h.update(((frame.payload.len() + 1) as u32).to_be_bytes());
        h.update([frame.msg_type]);
        h.update(&frame.payload);
        self.digest = h.finalize().into();
    }

    /// Hash chain over the exact bytes of every recorded frame.
    pub fn digest(&self) -> [u8; 32] {
        self.digest
    }

    pub fn entries(&self) -> &[TranscriptEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_bytes(&self) -> u64 {
        self.entries.iter().map(|e| e.byte_len as u64).sum()
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }

    /// Entries recorded since position `from`.
    pub fn since(&self, from: usize) -> Transcript {
        Transcript {
            entries: self.entries[from.min(self.entries.len())..].to_vec(),
            digest: [0; 32],
        }
    }

    pub fn extend(&mut self, other: &Transcript) {
        self.entries.extend_from_slice(&other.entries);
    }

    /// One line per frame: `DSP->DAP 0x10 cts=4 bytes=533`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            s.push_str(&format!(
                "{} 0x{:02x} cts={} bytes={}\n",
                e.direction, e.msg_type, e.ct_count, e.byte_len
            ));
        }
        s.push_str(&format!("digest {}\n", hex::encode(self.digest)));
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |l: &str| Error::Format(format!("bad transcript line: {l}"));
        let mut entries = Vec::new();
        let mut digest = [0u8; 32];
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let parts: Vec<_> = line.split_whitespace().collect();
            if let ["digest", h] = parts[..] {
                hex::decode_to_slice(h, &mut digest).map_err(|_| bad(line))?;
                continue;
            }
            if parts.len() != 4 {
                return Err(bad(line));
            }
            let direction = match parts[0] {
                "DSP->DAP" => Direction::DspToDap,
                "DAP->DSP" => Direction::DapToDsp,
                _ => return Err(bad(line)),
            };
            let msg_type = u8::from_str_radix(parts[1].trim_start_matches("0x"), 16)
                .map_err(|_| bad(line))?;
            let field = |p: &str, key: &str| -> Result<u32> {
                p.strip_prefix(key)
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| bad(line))
            };
            entries.push(TranscriptEntry {
                direction,
                msg_type,
                ct_count: field(parts[2], "cts=")?,
                byte_len: field(parts[3], "bytes=")?,
            });
        }
        Ok(Self { entries, digest })
    }
}
