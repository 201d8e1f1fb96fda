//! Binary frame codec.
//!
//! ```text
//! +------+---------+-------+----------------+-----------+
//! | LACP | version | class | length (u32be) | body ...  |
//! |  4B  |   1B    |  1B   |       4B       | length B  |
//! +------+---------+-------+----------------+-----------+
//! ```

use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"LACP";
pub const VERSION: u8 = 0x01;
pub const HEADER_LEN: usize = 10;
/// Largest accepted body, 16 MiB.
pub const MAX_BODY_LEN: usize = 1 << 24;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FrameError {
    #[error("bad magic bytes {0:02x?}")]
    BadMagic(Vec<u8>),
    #[error("unsupported frame version {0:#04x}")]
    UnsupportedVersion(u8),
    #[error("unknown frame class {0:#04x}")]
    UnknownClass(u8),
    #[error("frame body of {0} bytes exceeds the {MAX_BODY_LEN} byte cap")]
    BodyTooLarge(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum FrameClass {
    Request = 0x01,
    Response = 0x02,
    TxnControl = 0x03,
}

impl TryFrom<u8> for FrameClass {
    type Error = FrameError;

    fn try_from(b: u8) -> Result<Self, FrameError> {
        match b {
            0x01 => Ok(FrameClass::Request),
            0x02 => Ok(FrameClass::Response),
            0x03 => Ok(FrameClass::TxnControl),
            other => Err(FrameError::UnknownClass(other)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub class: FrameClass,
    pub body: Vec<u8>,
}

impl Frame {
    pub fn new(class: FrameClass, body: impl Into<Vec<u8>>) -> Self {
        Frame {
            class,
            body: body.into(),
        }
    }

    pub fn encoded_len(&self) -> usize {
        HEADER_LEN + self.body.len()
    }
}

pub fn encode_frame(frame: &Frame) -> Result<Vec<u8>, FrameError> {
    let mut out = Vec::with_capacity(frame.encoded_len());
    encode_frame_into(frame, &mut out)?;
    Ok(out)
}

pub fn encode_frame_into(frame: &Frame, out: &mut Vec<u8>) -> Result<(), FrameError> {
    let len = frame.body.len();
    if len > MAX_BODY_LEN {
        return Err(FrameError::BodyTooLarge(len));
    }
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(frame.class as u8);
    out.extend_from_slice(&(len as u32).to_be_bytes());
    out.extend_from_slice(&frame.body);
    Ok(())
}

/// Pulls every complete frame off the front of `buffer`, leaving any partial
/// frame in place. Header errors are reported as soon as the offending bytes
/// arrive; they are fatal for the connection.
pub fn decode_frames(buffer: &mut Vec<u8>) -> Result<Vec<Frame>, FrameError> {
    let mut frames = Vec::new();
    let mut pos = 0;
    let result = loop {
        match parse_one(&buffer[pos..]) {
            Ok(Some((frame, used))) => {
                frames.push(frame);
                pos += used;
            }
            Ok(None) => break Ok(()),
            Err(e) => break Err(e),
        }
    };
    buffer.drain(..pos);
    result.map(|()| frames)
}

fn parse_one(bytes: &[u8]) -> Result<Option<(Frame, usize)>, FrameError> {
    let magic_seen = bytes.len().min(MAGIC.len());
    if bytes[..magic_seen] != MAGIC[..magic_seen] {
        return Err(FrameError::BadMagic(bytes[..magic_seen].to_vec()));
    }
    if bytes.len() > 4 && bytes[4] != VERSION {
        return Err(FrameError::UnsupportedVersion(bytes[4]));
    }
    if bytes.len() < HEADER_LEN {
        return Ok(None);
    }
    let class = FrameClass::try_from(bytes[5])?;
    let len = u32::from_be_bytes(bytes[6..10].try_into().expect("4 bytes")) as usize;
    if len > MAX_BODY_LEN {
        return Err(FrameError::BodyTooLarge(len));
    }
    let total = HEADER_LEN + len;
    if bytes.len() < total {
        return Ok(None);
    }
    Ok(Some((Frame::new(class, &bytes[HEADER_LEN..total]), total)))
}

/// Incremental decoder owning the residual bytes of one connection.
#[derive(Debug, Default)]
pub struct FrameDecoder {
    buffer: Vec<u8>,
}

impl FrameDecoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, chunk: &[u8]) -> Result<Vec<Frame>, FrameError> {
        self.buffer.extend_from_slice(chunk);
        decode_frames(&mut self.buffer)
    }

    /// Bytes of a partial frame still waiting for the rest.
    pub fn residual(&self) -> &[u8] {
        &self.buffer
    }
}
