//! Wire frame carrying one stage's message.
//!
//! ```text
//! magic "PLXM" | version u8 | producer_id_len u16 | producer_id | payload_len u32 | payload | crc32 u32
//! ```
//!
//! All multi-byte integers are big-endian, there is no padding, and the
//! CRC-32 (IEEE) covers the payload only.

use std::io::{self, Read};

use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"PLXM";
pub const VERSION: u8 = 0x01;

/// Bytes before the producer id: magic, version and the id length.
const PREFIX_LEN: usize = 4 + 1 + 2;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CodecError {
    #[error("bad frame magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unsupported frame version {0}")]
    BadVersion(u8),
    #[error("frame truncated: needed {needed} bytes, got {got}")]
    Truncated { needed: usize, got: usize },
    #[error("payload checksum mismatch: frame says {expected:08x}, payload hashes to {actual:08x}")]
    CrcMismatch { expected: u32, actual: u32 },
    #[error("producer id is not valid UTF-8")]
    InvalidProducerId,
    #[error("{0} unexpected bytes after the frame")]
    TrailingBytes(usize),
    #[error("producer id is {0} bytes; the limit is 65535")]
    ProducerIdTooLong(usize),
    #[error("payload is {0} bytes; the limit is 4294967295")]
    PayloadTooLarge(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    producer_id: String,
    payload: Vec<u8>,
}

impl Frame {
    pub fn new(producer_id: impl Into<String>, payload: impl Into<Vec<u8>>) -> Result<Self, CodecError> {
        let producer_id = producer_id.into();
        let payload = payload.into();
        if producer_id.len() > u16::MAX as usize {
            return Err(CodecError::ProducerIdTooLong(producer_id.len()));
        }
        if payload.len() > u32::MAX as usize {
            return Err(CodecError::PayloadTooLarge(payload.len()));
        }
        Ok(Frame { producer_id, payload })
    }

    pub fn producer_id(&self) -> &str {
        &self.producer_id
    }

    pub fn payload(&self) -> &[u8] {
        &self.payload
    }

    pub fn into_payload(self) -> Vec<u8> {
        self.payload
    }

    pub fn encoded_len(&self) -> usize {
        PREFIX_LEN + self.producer_id.len() + 4 + self.payload.len() + 4
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(&MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&(self.producer_id.len() as u16).to_be_bytes());
        out.extend_from_slice(self.producer_id.as_bytes());
        out.extend_from_slice(&(self.payload.len() as u32).to_be_bytes());
        out.extend_from_slice(&self.payload);
        out.extend_from_slice(&crc32fast::hash(&self.payload).to_be_bytes());
        out
    }

    /// Decodes exactly one frame occupying the whole of `bytes`.
    pub fn decode(bytes: &[u8]) -> Result<Frame, CodecError> {
        let mut cursor = bytes;
        let frame = read_frame_inner(&mut cursor).map_err(|e| match e {
            ReadError::Codec(c) => c,
            ReadError::Io(_) => unreachable!("reading from a slice cannot fail"),
        })?;
        if !cursor.is_empty() {
            return Err(CodecError::TrailingBytes(cursor.len()));
        }
        Ok(frame)
    }
}

/// Error from [`read_frame`]: either the stream failed or the bytes were bad.
#[derive(Debug, Error)]
pub enum ReadError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Codec(#[from] CodecError),
}

/// Reads one frame from a stream, validating it as it goes.
pub fn read_frame<R: Read>(reader: &mut R) -> Result<Frame, ReadError> {
    read_frame_inner(reader)
}

fn read_frame_inner<R: Read>(reader: &mut R) -> Result<Frame, ReadError> {
    let mut consumed = 0usize;

    let mut prefix = [0u8; PREFIX_LEN];
    fill(reader, &mut prefix, &mut consumed)?;
    let magic: [u8; 4] = prefix[..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(CodecError::BadMagic(magic).into());
    }
    if prefix[4] != VERSION {
        return Err(CodecError::BadVersion(prefix[4]).into());
    }
    let id_len = u16::from_be_bytes([prefix[5], prefix[6]]) as usize;

    let mut id = vec![0u8; id_len];
    fill(reader, &mut id, &mut consumed)?;
    let producer_id = String::from_utf8(id).map_err(|_| CodecError::InvalidProducerId)?;

    let mut len = [0u8; 4];
    fill(reader, &mut len, &mut consumed)?;
    let payload_len = u32::from_be_bytes(len) as usize;

    let mut payload = Vec::new();
    let got = reader
        .take(payload_len as u64)
        .read_to_end(&mut payload)?;
    if got < payload_len {
        return Err(CodecError::Truncated {
            needed: consumed + payload_len,
            got: consumed + got,
        }
        .into());
    }
    consumed += got;

    let mut crc = [0u8; 4];
    fill(reader, &mut crc, &mut consumed)?;
    let expected = u32::from_be_bytes(crc);
    let actual = crc32fast::hash(&payload);
    if expected != actual {
        return Err(CodecError::CrcMismatch { expected, actual }.into());
    }

    Ok(Frame { producer_id, payload })
}

/// `read_exact` that reports how far it got on a short read.
fn fill<R: Read>(reader: &mut R, buf: &mut [u8], consumed: &mut usize) -> Result<(), ReadError> {
    let mut filled = 0;
    while filled < buf.len() {
        match reader.read(&mut buf[filled..]) {
            Ok(0) => {
                return Err(CodecError::Truncated {
                    needed: *consumed + buf.len(),
                    got: *consumed + filled,
                }
                .into())
            }
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    *consumed += filled;
    Ok(())
}
