//! Coordinator/worker messages and their binary framing.
//!
//! ```text
//! frame   = len:u32le  tag:u8  payload      (len counts tag + payload)
//! payload = u64le / f64le scalars, vectors prefixed by a u64le count
//! ```
//!
//! | tag | message         | payload                                         |
//! |-----|-----------------|-------------------------------------------------|
//! | 1   | IterationBegin  | t, theta_version, worker, start, end            |
//! | 2   | ReturnsReport   | t, worker, eval_seconds, n, (index, return) * n |
//! | 3   | UpdateBroadcast | t, n, delta * n                                 |
//! | 4   | Shutdown        | (empty)                                         |

use std::io::{self, Read, Write};
use std::ops::Range;

use crate::rng::{derive_seed, mix64};

pub const TAG_BEGIN: u8 = 1;
pub const TAG_REPORT: u8 = 2;
pub const TAG_UPDATE: u8 = 3;
pub const TAG_SHUTDOWN: u8 = 4;

/// Frames larger than this are rejected before allocation.
pub const MAX_FRAME: usize = 1 << 30;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorkerAssignment {
    pub worker: usize,
    pub mutations: Range<usize>,
}

impl WorkerAssignment {
    pub fn len(&self) -> usize {
        self.mutations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mutations.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ProtocolMessage {
    IterationBegin { t: u64, theta_version: u64, assignment: WorkerAssignment },
    ReturnsReport { t: u64, worker: usize, eval_seconds: f64, returns: Vec<(usize, f64)> },
    UpdateBroadcast { t: u64, delta: Vec<f64> },
    Shutdown,
}

impl ProtocolMessage {
    pub fn name(&self) -> &'static str {
        match self {
            Self::IterationBegin { .. } => "IterationBegin",
            Self::ReturnsReport { .. } => "ReturnsReport",
            Self::UpdateBroadcast { .. } => "UpdateBroadcast",
            Self::Shutdown => "Shutdown",
        }
    }
}

/// Version tag of a replicated parameter vector: a digest of the iteration
/// index and the exact bits of theta.
pub fn theta_version(t: u64, theta: &[f64]) -> u64 {
    theta.iter().fold(derive_seed(&[t, theta.len() as u64]), |h, v| mix64(h ^ v.to_bits()))
}

fn put(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn putf(buf: &mut Vec<u8>, v: f64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

/// Encodes a complete frame, length prefix included.
pub fn encode(msg: &ProtocolMessage) -> Vec<u8> {
    let mut buf = vec![0u8; 4];
    match msg {
        ProtocolMessage::IterationBegin { t, theta_version, assignment } => {
            buf.push(TAG_BEGIN);
            put(&mut buf, *t);
            put(&mut buf, *theta_version);
            put(&mut buf, assignment.worker as u64);
            put(&mut buf, assignment.mutations.start as u64);
            put(&mut buf, assignment.mutations.end as u64);
        }
        ProtocolMessage::ReturnsReport { t, worker, eval_seconds, returns } => {
            buf.push(TAG_REPORT);
            put(&mut buf, *t);
            put(&mut buf, *worker as u64);
            putf(&mut buf, *eval_seconds);
            put(&mut buf, returns.len() as u64);
            for &(j, r) in returns {
                put(&mut buf, j as u64);
                putf(&mut buf, r);
            }
        }
        ProtocolMessage::UpdateBroadcast { t, delta } => {
            buf.push(TAG_UPDATE);
            put(&mut buf, *t);
            put(&mut buf, delta.len() as u64);
            for &d in delta {
                putf(&mut buf, d);
            }
        }
        ProtocolMessage::Shutdown => buf.push(TAG_SHUTDOWN),
    }
    let len = (buf.len() - 4) as u32;
    buf[..4].copy_from_slice(&len.to_le_bytes());
    buf
}

fn invalid(msg: impl Into<String>) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg.into())
}

struct Cursor<'a> {
    body: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn u64(&mut self) -> io::Result<u64> {
        let b = self
            .body
            .get(self.pos..self.pos + 8)
            .ok_or_else(|| invalid(format!("frame truncated at byte {}", self.pos)))?;
        self.pos += 8;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }

    fn f64(&mut self) -> io::Result<f64> {
        self.u64().map(f64::from_bits)
    }

    fn count(&mut self, item_bytes: usize) -> io::Result<usize> {
        let n = self.u64()?;
        let remaining = (self.body.len() - self.pos) as u64;
        if n.saturating_mul(item_bytes as u64) > remaining {
            return Err(invalid(format!("vector length {n} exceeds frame")));
        }
        Ok(n as usize)
    }
}

/// Decodes a frame body (tag + payload, without the length prefix).
pub fn decode(body: &[u8]) -> io::Result<ProtocolMessage> {
    let (&tag, _) = body.split_first().ok_or_else(|| invalid("empty frame"))?;
    let mut c = Cursor { body, pos: 1 };
    let msg = match tag {
        TAG_BEGIN => {
            let t = c.u64()?;
            let theta_version = c.u64()?;
            let worker = c.u64()? as usize;
            let start = c.u64()? as usize;
            let end = c.u64()? as usize;
            if start > end {
                return Err(invalid("assignment range is reversed"));
            }
            ProtocolMessage::IterationBegin { t, theta_version, assignment: WorkerAssignment { worker, mutations: start..end } }
        }
        TAG_REPORT => {
            let t = c.u64()?;
            let worker = c.u64()? as usize;
            let eval_seconds = c.f64()?;
            let n = c.count(16)?;
            let mut returns = Vec::with_capacity(n);
            for _ in 0..n {
                returns.push((c.u64()? as usize, c.f64()?));
            }
            ProtocolMessage::ReturnsReport { t, worker, eval_seconds, returns }
        }
        TAG_UPDATE => {
            let t = c.u64()?;
            let n = c.count(8)?;
            let mut delta = Vec::with_capacity(n);
            for _ in 0..n {
                delta.push(c.f64()?);
            }
            ProtocolMessage::UpdateBroadcast { t, delta }
        }
        TAG_SHUTDOWN => ProtocolMessage::Shutdown,
        other => return Err(invalid(format!("unknown message tag {other}"))),
    };
    if c.pos != body.len() {
        return Err(invalid(format!("{} trailing bytes after {}", body.len() - c.pos, msg.name())));
    }
    Ok(msg)
}

pub fn write_frame<W: Write>(w: &mut W, frame: &[u8]) -> io::Result<()> {
    w.write_all(frame)?;
    w.flush()
}

/// Reads one frame body. A clean end-of-stream before the length prefix is
/// reported as `UnexpectedEof`.
pub fn read_frame<R: Read>(r: &mut R) -> io::Result<Vec<u8>> {
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let len = u32::from_le_bytes(len) as usize;
    if len == 0 || len > MAX_FRAME {
        return Err(invalid(format!("bad frame length {len}")));
    }
    let mut body = vec![0u8; len];
    r.read_exact(&mut body)?;
    Ok(body)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn round_trip(msg: &ProtocolMessage) -> ProtocolMessage {
        let frame = encode(msg);
        let body = read_frame(&mut &frame[..]).unwrap();
        decode(&body).unwrap()
    }

    #[test]
    fn frame_layout() {
        let frame = encode(&ProtocolMessage::Shutdown);
        assert_eq!(frame, vec![1, 0, 0, 0, TAG_SHUTDOWN]);
        let frame = encode(&ProtocolMessage::UpdateBroadcast { t: 2, delta: vec![1.5] });
        assert_eq!(&frame[..4], &(1u32 + 8 + 8 + 8).to_le_bytes());
        assert_eq!(frame[4], TAG_UPDATE);
        assert_eq!(&frame[5..13], &2u64.to_le_bytes());
        assert_eq!(&frame[13..21], &1u64.to_le_bytes());
        assert_eq!(&frame[21..29], &1.5f64.to_le_bytes());
    }

    #[test]
    fn report_size_depends_only_on_assignment() {
        let report = |n: usize| ProtocolMessage::ReturnsReport {
            t: 9,
            worker: 1,
            eval_seconds: 0.1,
            returns: (0..n).map(|j| (j, j as f64)).collect(),
        };
        // 4 length + 1 tag + 3 scalars + count + 16 bytes per entry
        assert_eq!(encode(&report(0)).len(), 4 + 1 + 24 + 8);
        assert_eq!(encode(&report(5)).len(), 4 + 1 + 24 + 8 + 5 * 16);
    }

    #[test]
    fn malformed_frames() {
        assert!(decode(&[]).is_err());
        assert!(decode(&[99]).is_err());
        assert!(decode(&[TAG_BEGIN, 1, 2]).is_err());
        let mut body = encode(&ProtocolMessage::Shutdown)[4..].to_vec();
        body.push(0);
        assert!(decode(&body).is_err());
        // huge vector count
        let mut body = vec![TAG_UPDATE];
        body.extend_from_slice(&0u64.to_le_bytes());
        body.extend_from_slice(&u64::MAX.to_le_bytes());
        assert!(decode(&body).is_err());
        assert!(read_frame(&mut &[0u8, 0, 0, 0][..]).is_err());
        assert_eq!(read_frame(&mut &[][..]).unwrap_err().kind(), io::ErrorKind::UnexpectedEof);
    }

    #[test]
    fn theta_version_tracks_bits_and_iteration() {
        let a = [1.0, 2.0];
        assert_eq!(theta_version(3, &a), theta_version(3, &a));
        assert_ne!(theta_version(3, &a), theta_version(4, &a));
        assert_ne!(theta_version(3, &a), theta_version(3, &[1.0, 2.0 + f64::EPSILON * 2.0]));
        assert_ne!(theta_version(0, &[0.0]), theta_version(0, &[-0.0]));
    }

    proptest! {
        #[test]
        fn messages_round_trip(t in any::<u64>(), v in any::<u64>(), w in 0usize..64, a in 0usize..100, b in 0usize..100,
                               secs in 0.0f64..1e4, rets in proptest::collection::vec((0usize..1000, -1e9f64..1e9), 0..40),
                               delta in proptest::collection::vec(-1e3f64..1e3, 0..300)) {
            let (lo, hi) = (a.min(b), a.max(b));
            let msgs = [
                ProtocolMessage::IterationBegin { t, theta_version: v, assignment: WorkerAssignment { worker: w, mutations: lo..hi } },
                ProtocolMessage::ReturnsReport { t, worker: w, eval_seconds: secs, returns: rets.clone() },
                ProtocolMessage::UpdateBroadcast { t, delta: delta.clone() },
                ProtocolMessage::Shutdown,
            ];
            for m in &msgs {
                prop_assert_eq!(&round_trip(m), m);
            }
        }
    }
}
