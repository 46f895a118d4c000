//! SSP1 framing.
//!
//! ```text
//! "SSP1" | version u8 | type u8 | flags u16 LE | length u32 LE | payload
//! ```
//!
//! Decoding is incremental: a buffer holding less than a whole frame yields
//! [`Decoded::NeedMoreData`] and nothing is consumed.

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

use eduloop_core::sigcore::SampleBlock;

pub const MAGIC: [u8; 4] = *b"SSP1";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 12;
pub const MAX_PAYLOAD: usize = 1 << 20;
/// `first_sample_index`, `n_channels`, `n_samples`.
pub const SAMPLES_HEADER_LEN: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum FrameType {
    Hello = 0x01,
    Config = 0x02,
    Samples = 0x03,
    Features = 0x04,
    State = 0x05,
    Command = 0x06,
    Ack = 0x07,
    Error = 0x08,
}

impl FrameType {
    pub const ALL: [FrameType; 8] = [
        FrameType::Hello,
        FrameType::Config,
        FrameType::Samples,
        FrameType::Features,
        FrameType::State,
        FrameType::Command,
        FrameType::Ack,
        FrameType::Error,
    ];

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|t| *t as u8 == code)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FrameError {
    #[error("payload of {len} bytes exceeds the {MAX_PAYLOAD}-byte limit")]
    Oversize { len: usize },
    #[error("bad magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unsupported protocol version {0}")]
    BadVersion(u8),
    /// Well-framed but of a type this side does not know; the frame is
    /// consumed and the stream stays usable.
    #[error("unknown frame type 0x{code:02x}")]
    UnknownType { code: u8, consumed: usize },
    #[error("malformed payload: {0}")]
    Payload(String),
}

impl FrameError {
    /// Whether the connection has to be closed.
    pub fn is_fatal(&self) -> bool {
        matches!(self, FrameError::Oversize { .. } | FrameError::BadMagic(_) | FrameError::BadVersion(_))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub frame_type: FrameType,
    pub flags: u16,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn new(frame_type: FrameType, payload: Vec<u8>) -> Self {
        Self {
            frame_type,
            flags: 0,
            payload,
        }
    }

    pub fn json<T: Serialize>(frame_type: FrameType, value: &T) -> Self {
        Self::new(frame_type, serde_json::to_vec(value).expect("value serializes"))
    }

    pub fn parse_json<T: DeserializeOwned>(&self) -> Result<T, FrameError> {
        serde_json::from_slice(&self.payload).map_err(|e| FrameError::Payload(e.to_string()))
    }

    pub fn encode(&self) -> Result<Vec<u8>, FrameError> {
        encode_frame(self.frame_type, self.flags, &self.payload)
    }
}

pub fn encode_frame(frame_type: FrameType, flags: u16, payload: &[u8]) -> Result<Vec<u8>, FrameError> {
    if payload.len() > MAX_PAYLOAD {
        return Err(FrameError::Oversize { len: payload.len() });
    }
    let mut out = Vec::with_capacity(HEADER_LEN + payload.len());
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(frame_type as u8);
    out.extend_from_slice(&flags.to_le_bytes());
    out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    out.extend_from_slice(payload);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Decoded {
    Frame { frame: Frame, consumed: usize },
    NeedMoreData,
}

pub fn decode_frame(buf: &[u8]) -> Result<Decoded, FrameError> {
    if buf.len() >= 4 && buf[..4] != MAGIC {
        return Err(FrameError::BadMagic(buf[..4].try_into().unwrap()));
    }
    if buf.len() >= 5 && buf[4] != VERSION {
        return Err(FrameError::BadVersion(buf[4]));
    }
    if buf.len() < HEADER_LEN {
        return Ok(Decoded::NeedMoreData);
    }
    let len = u32::from_le_bytes(buf[8..12].try_into().unwrap()) as usize;
    if len > MAX_PAYLOAD {
        return Err(FrameError::Oversize { len });
    }
    let total = HEADER_LEN + len;
    if buf.len() < total {
        return Ok(Decoded::NeedMoreData);
    }
    let Some(frame_type) = FrameType::from_code(buf[5]) else {
        return Err(FrameError::UnknownType {
            code: buf[5],
            consumed: total,
        });
    };
    Ok(Decoded::Frame {
        frame: Frame {
            frame_type,
            flags: u16::from_le_bytes([buf[6], buf[7]]),
            payload: buf[HEADER_LEN..total].to_vec(),
        },
        consumed: total,
    })
}

/// SAMPLES payload: 32-bit samples, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplesPayload {
    pub first_sample_index: u64,
    pub n_channels: u16,
    pub n_samples: u16,
    pub samples: Vec<f32>,
}

impl SamplesPayload {
    pub fn from_block(block: &SampleBlock) -> Result<Self, FrameError> {
        let n_channels = u16::try_from(block.n_channels)
            .map_err(|_| FrameError::Payload(format!("{} channels do not fit in 16 bits", block.n_channels)))?;
        let n_samples = u16::try_from(block.n_samples)
            .map_err(|_| FrameError::Payload(format!("{} samples do not fit in 16 bits", block.n_samples)))?;
        Ok(Self {
            first_sample_index: block.first_sample_index,
            n_channels,
            n_samples,
            samples: block.samples().iter().map(|v| *v as f32).collect(),
        })
    }

    pub fn to_block(&self, fs: f64) -> Result<SampleBlock, FrameError> {
        let samples = self.samples.iter().map(|v| *v as f64).collect();
        SampleBlock::new(self.first_sample_index, self.n_channels as usize, fs, samples)
            .map_err(|e| FrameError::Payload(e.to_string()))
    }

    pub fn encode(&self) -> Result<Vec<u8>, FrameError> {
        let expected = self.n_channels as usize * self.n_samples as usize;
        if self.samples.len() != expected {
            return Err(FrameError::Payload(format!(
                "{} samples for a {}x{} block",
                self.samples.len(),
                self.n_channels,
                self.n_samples
            )));
        }
        let mut out = Vec::with_capacity(SAMPLES_HEADER_LEN + 4 * expected);
        out.extend_from_slice(&self.first_sample_index.to_le_bytes());
        out.extend_from_slice(&self.n_channels.to_le_bytes());
        out.extend_from_slice(&self.n_samples.to_le_bytes());
        for v in &self.samples {
            out.extend_from_slice(&v.to_le_bytes());
        }
        if out.len() > MAX_PAYLOAD {
            return Err(FrameError::Oversize { len: out.len() });
        }
        Ok(out)
    }

    pub fn decode(payload: &[u8]) -> Result<Self, FrameError> {
        if payload.len() < SAMPLES_HEADER_LEN {
            return Err(FrameError::Payload(format!(
                "SAMPLES payload of {} bytes is shorter than its header",
                payload.len()
            )));
        }
        let first_sample_index = u64::from_le_bytes(payload[..8].try_into().unwrap());
        let n_channels = u16::from_le_bytes([payload[8], payload[9]]);
        let n_samples = u16::from_le_bytes([payload[10], payload[11]]);
        let body = &payload[SAMPLES_HEADER_LEN..];
        let expected = 4 * n_channels as usize * n_samples as usize;
        if body.len() != expected {
            return Err(FrameError::Payload(format!(
                "{n_channels}x{n_samples} block needs {expected} sample bytes, got {}",
                body.len()
            )));
        }
        let samples = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self {
            first_sample_index,
            n_channels,
            n_samples,
            samples,
        })
    }
}
