use std::ops::Add;

use serde::{Deserialize, Serialize};

use super::QuantizedTensor;

/// Bytes per mebibyte. All "MB" figures in reports are MiB.
pub const MIB: f64 = 1_048_576.0;

/// Byte accounting for stored optimizer state.
///
/// `total_bytes = payload_bytes + metadata_bytes`; padding is counted inside
/// the payload. The serialization header is not included.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemoryReport {
    pub payload_bytes: u64,
    pub metadata_bytes: u64,
    pub padding_bytes: u64,
    pub total_bytes: u64,
    pub fp32_equivalent_bytes: u64,
    pub compression_ratio: f64,
}

impl MemoryReport {
    pub fn new(payload_bytes: u64, metadata_bytes: u64, padding_bytes: u64, fp32_equivalent_bytes: u64) -> Self {
        let total_bytes = payload_bytes + metadata_bytes;
        let compression_ratio = if total_bytes == 0 {
            1.0
        } else {
            fp32_equivalent_bytes as f64 / total_bytes as f64
        };
        Self {
            payload_bytes,
            metadata_bytes,
            padding_bytes,
            total_bytes,
            fp32_equivalent_bytes,
            compression_ratio,
        }
    }

    pub fn empty() -> Self {
        Self::new(0, 0, 0, 0)
    }

    /// A plain FP32 buffer of `len` elements.
    pub fn fp32(len: usize) -> Self {
        let bytes = 4 * len as u64;
        Self::new(bytes, 0, 0, bytes)
    }

    pub fn total_mib(&self) -> f64 {
        self.total_bytes as f64 / MIB
    }

    pub fn fp32_mib(&self) -> f64 {
        self.fp32_equivalent_bytes as f64 / MIB
    }

    /// Share of the stored bytes spent on per-block scales.
    pub fn metadata_fraction(&self) -> f64 {
        if self.total_bytes == 0 {
            0.0
        } else {
            self.metadata_bytes as f64 / self.total_bytes as f64
        }
    }
}

impl Add for MemoryReport {
    type Output = MemoryReport;

    fn add(self, rhs: MemoryReport) -> MemoryReport {
        MemoryReport::new(
            self.payload_bytes + rhs.payload_bytes,
            self.metadata_bytes + rhs.metadata_bytes,
            self.padding_bytes + rhs.padding_bytes,
            self.fp32_equivalent_bytes + rhs.fp32_equivalent_bytes,
        )
    }
}

impl std::iter::Sum for MemoryReport {
    fn sum<I: Iterator<Item = MemoryReport>>(iter: I) -> Self {
        iter.fold(MemoryReport::empty(), Add::add)
    }
}

pub fn memory_report(qt: &QuantizedTensor) -> MemoryReport {
    let blocks = qt.num_blocks() as u64;
    let payload = blocks * qt.block_size() as u64;
    MemoryReport::new(
        payload,
        8 * blocks,
        payload - qt.original_len() as u64,
        4 * qt.original_len() as u64,
    )
}

/// Exact bytes for one quantized state of `n` elements, padding included.
pub fn quantized_state_bytes(n: u64, block_size: u64) -> u64 {
    n.div_ceil(block_size) * (block_size + 8)
}

/// Closed-form bytes for both quantized Adam states: `2N + 16N/B`.
pub fn state_bytes_formula(n: u64, block_size: u64) -> f64 {
    2.0 * n as f64 + 16.0 * n as f64 / block_size as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::{quantize_linear, quantize_log, DEFAULT_EPSILON};

    #[test]
    fn one_full_block() {
        let qt = quantize_linear(&[0.5; 64], 64).unwrap();
        let r = memory_report(&qt);
        assert_eq!(r.total_bytes, 72);
        assert_eq!(r.payload_bytes, 64);
        assert_eq!(r.metadata_bytes, 8);
        assert_eq!(r.fp32_equivalent_bytes, 256);
        assert_eq!(r.compression_ratio, 256.0 / 72.0);
        assert!((r.compression_ratio - 3.5556).abs() < 1e-4);
    }

    #[test]
    fn partial_block_padding() {
        let qt = quantize_log(&[1e-3; 65], 64, DEFAULT_EPSILON).unwrap();
        let r = memory_report(&qt);
        assert_eq!(r.payload_bytes, 128);
        assert_eq!(r.padding_bytes, 63);
        assert_eq!(r.metadata_bytes, 16);
        assert_eq!(r.total_bytes, 144);
    }

    #[test]
    fn ten_million_elements_two_states() {
        let per_state = quantized_state_bytes(10_000_000, 64);
        assert_eq!(2 * per_state, 22_500_000);
        assert_eq!(state_bytes_formula(10_000_000, 64), 22_500_000.0);
        let fp32 = MemoryReport::fp32(10_000_000) + MemoryReport::fp32(10_000_000);
        assert!((fp32.total_mib() - 76.29).abs() < 0.005);
        assert!((22_500_000.0 / MIB - 21.46).abs() < 0.005);
    }

    #[test]
    fn sum_recomputes_ratio() {
        let a = MemoryReport::new(64, 8, 0, 256);
        let b = MemoryReport::fp32(64);
        let s: MemoryReport = [a, b].into_iter().sum();
        assert_eq!(s.total_bytes, 72 + 256);
        assert_eq!(s.compression_ratio, 512.0 / 328.0);
        assert_eq!(MemoryReport::empty().compression_ratio, 1.0);
    }
}
