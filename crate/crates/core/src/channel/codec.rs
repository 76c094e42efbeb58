//! Framing: 4-byte big-endian length (excluding itself) followed by a UTF-8
//! JSON body.

use super::ControlMsg;

/// Upper bound on one frame body; a full-size packet plus base64 and JSON overhead fits easily.
pub const MAX_FRAME: usize = 1 << 20;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MalformedFrame {
    #[error("frame shorter than its length prefix ({have} of {want} bytes)")]
    Truncated { want: usize, have: usize },
    #[error("{0} trailing bytes after frame")]
    Trailing(usize),
    #[error("frame length {0} exceeds limit")]
    TooLong(usize),
    #[error("frame body: {0}")]
    Body(String),
}

pub fn encode(msg: &ControlMsg) -> Vec<u8> {
    let body = serde_json::to_vec(msg).expect("control messages always serialize");
    let mut out = Vec::with_capacity(body.len() + 4);
    out.extend_from_slice(&(body.len() as u32).to_be_bytes());
    out.extend_from_slice(&body);
    out
}

/// Decodes exactly one frame occupying the whole buffer.
pub fn decode(bytes: &[u8]) -> Result<ControlMsg, MalformedFrame> {
    let (msg, used) = decode_prefix(bytes)?.ok_or(MalformedFrame::Truncated {
        want: frame_len(bytes).unwrap_or(4),
        have: bytes.len(),
    })?;
    if used != bytes.len() {
        return Err(MalformedFrame::Trailing(bytes.len() - used));
    }
    Ok(msg)
}

fn frame_len(bytes: &[u8]) -> Option<usize> {
    let prefix: [u8; 4] = bytes.get(..4)?.try_into().ok()?;
    Some(u32::from_be_bytes(prefix) as usize + 4)
}

/// Decodes a frame from the front of `bytes`; `Ok(None)` when more bytes are needed.
fn decode_prefix(bytes: &[u8]) -> Result<Option<(ControlMsg, usize)>, MalformedFrame> {
    let Some(total) = frame_len(bytes) else { return Ok(None) };
    if total - 4 > MAX_FRAME {
        return Err(MalformedFrame::TooLong(total - 4));
    }
    if bytes.len() < total {
        return Ok(None);
    }
    let msg = serde_json::from_slice(&bytes[4..total]).map_err(|e| MalformedFrame::Body(e.to_string()))?;
    Ok(Some((msg, total)))
}

/// Incremental decoder for a byte stream carrying consecutive frames.
#[derive(Debug, Default)]
pub struct FrameDecoder {
    buf: Vec<u8>,
}

impl FrameDecoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    pub fn next_frame(&mut self) -> Result<Option<ControlMsg>, MalformedFrame> {
        match decode_prefix(&self.buf)? {
            Some((msg, used)) => {
                self.buf.drain(..used);
                Ok(Some(msg))
            }
            None => Ok(None),
        }
    }

    pub fn buffered(&self) -> usize {
        self.buf.len()
    }
}
