//! Frame IO over stream transports.

use std::io::{Read, Write};

use matrt_core::wire::{self, Message};

/// Upper bound on a peer-announced payload, to keep a garbage length
/// field from forcing a huge allocation.
pub const MAX_PAYLOAD_LEN: u32 = 256 * 1024 * 1024;

/// Reading or writing a frame failed.
#[derive(Debug, thiserror::Error)]
pub enum FrameError {
    #[error("transport error: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Malformed(#[from] wire::DecodeError),
    #[error("peer announced an oversized payload of {0} bytes")]
    Oversized(u32),
}

/// Reads exactly one frame and decodes it.
pub fn read_frame(r: &mut impl Read) -> Result<Message, FrameError> {
    read_frame_into(r, &mut Vec::new())
}

/// Like [`read_frame`], reusing `scratch` as the frame buffer. Long-lived
/// readers (sessions) keep one buffer around instead of allocating per
/// frame.
pub fn read_frame_into(r: &mut impl Read, scratch: &mut Vec<u8>) -> Result<Message, FrameError> {
    read_raw_frame_into(r, scratch)?;
    Ok(wire::decode(scratch)?)
}

/// Reads one frame's raw bytes into `scratch` and returns its header,
/// leaving the decoding to the caller.
pub fn read_raw_frame_into(
    r: &mut impl Read,
    scratch: &mut Vec<u8>,
) -> Result<wire::FrameHeader, FrameError> {
    let mut header = [0u8; wire::HEADER_LEN];
    r.read_exact(&mut header)?;
    let parsed = wire::parse_header(&header)?;
    if parsed.payload_len > MAX_PAYLOAD_LEN {
        return Err(FrameError::Oversized(parsed.payload_len));
    }
    scratch.clear();
    scratch.resize(wire::HEADER_LEN + parsed.payload_len as usize, 0);
    scratch[..wire::HEADER_LEN].copy_from_slice(&header);
    r.read_exact(&mut scratch[wire::HEADER_LEN..])?;
    Ok(parsed)
}

/// Writes one already-encoded frame.
pub fn write_frame(w: &mut impl Write, frame: &[u8]) -> std::io::Result<()> {
    w.write_all(frame)?;
    w.flush()
}
