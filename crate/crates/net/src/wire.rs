//! Control-plane stream framing: each frame is a big-endian `u32` length
//! followed by that many bytes of JSON.
//!
//! A session opens with `hello` from the client, answered by `welcome` or
//! `reject`. Afterwards the client sends `subscribe`, `unsubscribe` and
//! `publish`; the broker sends `deliver` for every matching publication.

use std::io::{self, Read, Write};

use serde::{Deserialize, Serialize};
use sting_core::control::Envelope;

/// Frames above this size are a protocol violation.
pub const MAX_FRAME: usize = 16 * 1024 * 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Frame {
    Hello { schema_version: u32, client_id: String },
    Welcome { schema_version: u32 },
    Reject { schema_version: u32, reason: String },
    Subscribe { filter: String },
    Unsubscribe { filter: String },
    Publish { envelope: Envelope },
    Deliver { envelope: Envelope },
}

pub fn write_frame(w: &mut impl Write, frame: &Frame) -> io::Result<()> {
    let body = serde_json::to_vec(frame).map_err(io::Error::other)?;
    if body.len() > MAX_FRAME {
        return Err(io::Error::new(io::ErrorKind::InvalidInput, "frame too large"));
    }
    let mut buf = Vec::with_capacity(4 + body.len());
    buf.extend_from_slice(&(body.len() as u32).to_be_bytes());
    buf.extend_from_slice(&body);
    w.write_all(&buf)?;
    w.flush()
}

/// `Ok(None)` on a clean end of stream between frames.
pub fn read_frame(r: &mut impl Read) -> io::Result<Option<Frame>> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e),
    }
    let len = u32::from_be_bytes(len) as usize;
    if len > MAX_FRAME {
        return Err(io::Error::new(io::ErrorKind::InvalidData, format!("frame of {len} bytes")));
    }
    let mut body = vec![0u8; len];
    r.read_exact(&mut body)?;
    serde_json::from_slice(&body)
        .map(Some)
        .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
}
