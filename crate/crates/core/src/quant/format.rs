//! Little-endian binary layout of a [`QuantizedTensor`].
//!
//! ```text
//! offset  size          field
//! 0       4             magic "QLAQ"
//! 4       2             format version (u16)
//! 6       1             mode (0 = linear, 1 = log)
//! 7       1             reserved, 0
//! 8       4             block size B (u32)
//! 12      8             original element count N (u64)
//! 20      blocks·B      payload codes
//! ..      blocks·4      lo (f32)
//! ..      blocks·4      hi (f32)
//! ```
//!
//! The layout has no field for ε, so log-mode tensors are only
//! serializable with [`DEFAULT_EPSILON`](super::DEFAULT_EPSILON).

use std::io::{Read, Write};

use super::{QuantMode, QuantizedTensor, DEFAULT_EPSILON};
use crate::{Error, Result};

pub const MAGIC: [u8; 4] = *b"QLAQ";
pub const FORMAT_VERSION: u16 = 1;
pub const HEADER_LEN: usize = 20;

fn format_err(offset: usize, reason: impl Into<String>) -> Error {
    Error::Format {
        offset,
        reason: reason.into(),
    }
}

impl QuantizedTensor {
    /// Exact size of [`to_bytes`](Self::to_bytes) output.
    pub fn serialized_len(&self) -> usize {
        HEADER_LEN + self.payload.len() + 8 * self.lo.len()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if self.mode == QuantMode::Log && self.epsilon != DEFAULT_EPSILON {
            return Err(Error::Usage(format!(
                "binary format stores log tensors with epsilon {DEFAULT_EPSILON} only, this one uses {}",
                self.epsilon
            )));
        }
        let block_size = u32::try_from(self.block_size)
            .map_err(|_| Error::Usage(format!("block size {} exceeds u32", self.block_size)))?;
        let mut out = Vec::with_capacity(self.serialized_len());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.push(self.mode.wire_tag());
        out.push(0);
        out.extend_from_slice(&block_size.to_le_bytes());
        out.extend_from_slice(&(self.original_len as u64).to_le_bytes());
        out.extend_from_slice(&self.payload);
        for v in &self.lo {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in &self.hi {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    /// Parses one tensor from the front of `bytes`, returning it and the bytes consumed.
    pub fn from_bytes_prefix(bytes: &[u8]) -> Result<(Self, usize)> {
        if bytes.len() < HEADER_LEN {
            return Err(format_err(bytes.len(), "truncated header"));
        }
        if bytes[0..4] != MAGIC {
            return Err(format_err(0, "bad magic, expected \"QLAQ\""));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != FORMAT_VERSION {
            return Err(format_err(4, format!("unsupported format version {version}")));
        }
        let mode = QuantMode::from_wire_tag(bytes[6])
            .ok_or_else(|| format_err(6, format!("unknown mode tag {}", bytes[6])))?;
        let block_size = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        if block_size == 0 {
            return Err(format_err(8, "block size 0"));
        }
        let original_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
        let original_len = usize::try_from(original_len)
            .map_err(|_| format_err(12, "element count does not fit in memory"))?;
        let blocks = original_len.div_ceil(block_size);
        let payload_len = blocks
            .checked_mul(block_size)
            .ok_or_else(|| format_err(12, "payload size overflows"))?;
        let end = HEADER_LEN + payload_len + 8 * blocks;
        if bytes.len() < end {
            return Err(format_err(
                bytes.len(),
                format!("truncated body, need {end} bytes"),
            ));
        }
        let payload = bytes[HEADER_LEN..HEADER_LEN + payload_len].to_vec();
        let floats = |start: usize| -> Vec<f32> {
            bytes[start..start + 4 * blocks]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect()
        };
        let lo_start = HEADER_LEN + payload_len;
        let lo = floats(lo_start);
        let hi = floats(lo_start + 4 * blocks);
        let qt = QuantizedTensor::from_parts(mode, block_size, original_len, payload, lo, hi, DEFAULT_EPSILON)
            .map_err(|e| format_err(lo_start, e.to_string()))?;
        Ok((qt, end))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (qt, used) = Self::from_bytes_prefix(bytes)?;
        if used != bytes.len() {
            return Err(format_err(used, "trailing bytes after tensor"));
        }
        Ok(qt)
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }
}
