//! Block-wise 8-bit quantization of optimizer state.
//!
//! A tensor of `N` elements is cut into `ceil(N / B)` contiguous blocks.
//! Each block stores `B` one-byte codes plus two FP32 scalars (`lo`, `hi`).
//!
//! - [`QuantMode::Linear`] codes the values themselves: `lo`/`hi` are the
//!   block min/max and `x̃ = q/255 · (hi − lo) + lo`.
//! - [`QuantMode::Log`] codes `ln(x + ε)`: `lo`/`hi` are the block log-min
//!   and log-max and `x̃ = exp(q/255 · (hi − lo) + lo) − ε`, clamped at 0.
//!
//! Codes use floor semantics: `q` is the largest level whose FP32
//! reconstruction does not exceed `x`, with the block maximum pinned to 255.
//! Evaluating the floor against the stored reconstruction (rather than in
//! exact arithmetic) makes re-quantizing a dequantized tensor reproduce the
//! same payload bit for bit.

mod dynamic_tree;
mod format;
mod memory;

pub use dynamic_tree::{
    decode_dynamic_tree, dequantize_dynamic_tree, dynamic_tree_table, quantize_dynamic_tree,
    DynamicTreeCodes,
};
pub use format::{HEADER_LEN, MAGIC, FORMAT_VERSION};
pub use memory::{memory_report, quantized_state_bytes, state_bytes_formula, MemoryReport, MIB};

use crate::{Error, Result};

/// Offset used by the log-space quantizer, `ε = 1e-8`.
pub const DEFAULT_EPSILON: f32 = 1e-8;

/// Highest code value.
pub const MAX_CODE: u8 = 255;

const LEVELS: f64 = 255.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuantMode {
    Linear,
    Log,
}

impl QuantMode {
    pub fn wire_tag(self) -> u8 {
        match self {
            QuantMode::Linear => 0,
            QuantMode::Log => 1,
        }
    }

    pub fn from_wire_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(QuantMode::Linear),
            1 => Some(QuantMode::Log),
            _ => None,
        }
    }
}

/// INT8 block codes plus per-block FP32 range metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    payload: Vec<u8>,
    lo: Vec<f32>,
    hi: Vec<f32>,
    block_size: usize,
    original_len: usize,
    mode: QuantMode,
    epsilon: f32,
}

impl QuantizedTensor {
    /// Reassembles a tensor from raw parts, checking every layout invariant.
    pub fn from_parts(
        mode: QuantMode,
        block_size: usize,
        original_len: usize,
        payload: Vec<u8>,
        lo: Vec<f32>,
        hi: Vec<f32>,
        epsilon: f32,
    ) -> Result<Self> {
        if block_size == 0 {
            return Err(Error::Parameter("block size must be >= 1".into()));
        }
        let blocks = original_len.div_ceil(block_size);
        if payload.len() != blocks * block_size || lo.len() != blocks || hi.len() != blocks {
            return Err(Error::Dimension(format!(
                "{original_len} elements at B={block_size} need {blocks} blocks \
                 ({} payload bytes), got payload={} lo={} hi={}",
                blocks * block_size,
                payload.len(),
                lo.len(),
                hi.len()
            )));
        }
        for (b, (&l, &h)) in lo.iter().zip(&hi).enumerate() {
            if !l.is_finite() || !h.is_finite() || l > h {
                return Err(Error::Data(format!("block {b}: invalid range [{l}, {h}]")));
            }
        }
        check_epsilon(epsilon)?;
        Ok(Self {
            payload,
            lo,
            hi,
            block_size,
            original_len,
            mode,
            epsilon,
        })
    }

    pub fn mode(&self) -> QuantMode {
        self.mode
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn original_len(&self) -> usize {
        self.original_len
    }

    pub fn num_blocks(&self) -> usize {
        self.lo.len()
    }

    /// Codes for every block, including the zero-coded padding tail.
    pub fn payload(&self) -> &[u8] {
        &self.payload
    }

    /// Per-block minimum (log-minimum in log mode).
    pub fn lo(&self) -> &[f32] {
        &self.lo
    }

    /// Per-block maximum (log-maximum in log mode).
    pub fn hi(&self) -> &[f32] {
        &self.hi
    }

    /// Per-block range `hi − lo`, computed in f64 exactly as the decoder does.
    pub fn block_range(&self, block: usize) -> f64 {
        f64::from(self.hi[block]) - f64::from(self.lo[block])
    }

    pub fn epsilon(&self) -> f32 {
        self.epsilon
    }

    pub fn padding_len(&self) -> usize {
        self.payload.len() - self.original_len
    }

    fn transform(&self) -> Transform {
        Transform::for_mode(self.mode, self.epsilon)
    }

    /// Decodes every element regardless of mode.
    pub fn dequantize(&self) -> Vec<f32> {
        let t = self.transform();
        let mut out = Vec::with_capacity(self.original_len);
        for (b, (&lo, &hi)) in self.lo.iter().zip(&self.hi).enumerate() {
            let start = b * self.block_size;
            let end = (start + self.block_size).min(self.original_len);
            let range = f64::from(hi) - f64::from(lo);
            out.extend(
                self.payload[start..end]
                    .iter()
                    .map(|&q| t.reconstruct(level(lo, range, q))),
            );
        }
        out
    }
}

fn check_epsilon(epsilon: f32) -> Result<()> {
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(Error::Parameter(format!(
            "epsilon must be positive and finite, got {epsilon}"
        )));
    }
    Ok(())
}

/// `q/255 · r + lo`, shared by the encoder and decoder.
#[inline]
fn level(lo: f32, range: f64, q: u8) -> f64 {
    (f64::from(q) / LEVELS) * range + f64::from(lo)
}

/// The value-space map a quantizer works in.
#[derive(Debug, Clone, Copy)]
enum Transform {
    Linear,
    Log { eps: f64, floor: f32 },
}

impl Transform {
    fn for_mode(mode: QuantMode, epsilon: f32) -> Self {
        match mode {
            QuantMode::Linear => Transform::Linear,
            QuantMode::Log => {
                let eps = f64::from(epsilon);
                Transform::Log {
                    eps,
                    floor: eps.ln() as f32,
                }
            }
        }
    }

    #[inline]
    fn forward(self, x: f32) -> f64 {
        match self {
            Transform::Linear => f64::from(x),
            Transform::Log { eps, .. } => (f64::from(x) + eps).ln(),
        }
    }

    /// Block metadata for an element value, rounded to FP32.
    #[inline]
    fn metadata(self, x: f32) -> f32 {
        self.forward(x) as f32
    }

    #[inline]
    fn reconstruct(self, level: f64) -> f32 {
        match self {
            Transform::Linear => level as f32,
            Transform::Log { eps, floor } => {
                // at or below the FP32 image of ln ε the stored value is zero
                if level as f32 <= floor {
                    0.0
                } else {
                    (level.exp() - eps).max(0.0) as f32
                }
            }
        }
    }

    /// Metadata that is a fixed point of reconstruct-then-remeasure, so the
    /// block range survives a dequantize/quantize cycle unchanged.
    fn settle(self, x: f32) -> f32 {
        let mut m = self.metadata(x);
        for _ in 0..4 {
            let next = self.metadata(self.reconstruct(f64::from(m)));
            if next == m {
                break;
            }
            m = next;
        }
        m
    }
}

fn encode_block(t: Transform, values: &[f32], codes: &mut [u8]) -> (f32, f32) {
    let (xmin, xmax) = values
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let lo = t.settle(xmin);
    let hi = t.settle(xmax);
    if xmin == xmax || hi <= lo {
        codes.iter_mut().for_each(|c| *c = 0);
        return (lo, lo);
    }
    let range = f64::from(hi) - f64::from(lo);
    let lo64 = f64::from(lo);
    for (c, &x) in codes.iter_mut().zip(values) {
        if x == xmax {
            *c = MAX_CODE;
            continue;
        }
        let estimate = ((t.forward(x) - lo64) / range * LEVELS).floor();
        let mut q = estimate.clamp(0.0, LEVELS) as u8;
        while q < MAX_CODE && t.reconstruct(level(lo, range, q + 1)) <= x {
            q += 1;
        }
        while q > 0 && t.reconstruct(level(lo, range, q)) > x {
            q -= 1;
        }
        *c = q;
    }
    (lo, hi)
}

fn quantize_with(
    x: &[f32],
    block_size: usize,
    mode: QuantMode,
    epsilon: f32,
) -> Result<QuantizedTensor> {
    if block_size == 0 {
        return Err(Error::Parameter("block size must be >= 1".into()));
    }
    check_epsilon(epsilon)?;
    if let Some(i) = x.iter().position(|v| !v.is_finite()) {
        return Err(Error::Data(format!("non-finite value {} at index {i}", x[i])));
    }
    if mode == QuantMode::Log {
        if let Some(i) = x.iter().position(|&v| v < 0.0) {
            return Err(Error::Data(format!(
                "log-space quantization needs nonnegative input, got {} at index {i}",
                x[i]
            )));
        }
    }
    let t = Transform::for_mode(mode, epsilon);
    let blocks = x.len().div_ceil(block_size);
    let mut payload = vec![0u8; blocks * block_size];
    let mut lo = Vec::with_capacity(blocks);
    let mut hi = Vec::with_capacity(blocks);
    for (values, codes) in x.chunks(block_size).zip(payload.chunks_mut(block_size)) {
        let n = values.len();
        let (l, h) = encode_block(t, values, &mut codes[..n]);
        lo.push(l);
        hi.push(h);
    }
    Ok(QuantizedTensor {
        payload,
        lo,
        hi,
        block_size,
        original_len: x.len(),
        mode,
        epsilon,
    })
}

/// Block-wise linear quantization (momentum storage).
pub fn quantize_linear(x: &[f32], block_size: usize) -> Result<QuantizedTensor> {
    quantize_with(x, block_size, QuantMode::Linear, DEFAULT_EPSILON)
}

/// Block-wise log-space quantization of nonnegative values (variance storage).
pub fn quantize_log(x: &[f32], block_size: usize, epsilon: f32) -> Result<QuantizedTensor> {
    quantize_with(x, block_size, QuantMode::Log, epsilon)
}

pub fn quantize(x: &[f32], block_size: usize, mode: QuantMode) -> Result<QuantizedTensor> {
    quantize_with(x, block_size, mode, DEFAULT_EPSILON)
}

pub fn dequantize_linear(qt: &QuantizedTensor) -> Result<Vec<f32>> {
    expect_mode(qt, QuantMode::Linear)?;
    Ok(qt.dequantize())
}

pub fn dequantize_log(qt: &QuantizedTensor) -> Result<Vec<f32>> {
    expect_mode(qt, QuantMode::Log)?;
    Ok(qt.dequantize())
}

fn expect_mode(qt: &QuantizedTensor, mode: QuantMode) -> Result<()> {
    if qt.mode != mode {
        return Err(Error::Usage(format!(
            "tensor is {:?}-quantized, cannot decode as {mode:?}",
            qt.mode
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndcore::RngStream;

    #[test]
    fn linear_hand_example() {
        let qt = quantize_linear(&[0.0, 0.5, 1.0], 4).unwrap();
        assert_eq!(qt.payload(), &[0, 127, 255, 0]);
        assert_eq!((qt.lo()[0], qt.hi()[0]), (0.0, 1.0));
        assert_eq!(qt.padding_len(), 1);
        let back = dequantize_linear(&qt).unwrap();
        assert_eq!(back.len(), 3);
        assert_eq!(back[0], 0.0);
        assert_eq!(back[2], 1.0);
        assert!((back[1] - 127.0 / 255.0).abs() < 1e-7);
        assert!(back.iter().zip([0.0, 0.5, 1.0]).all(|(a, b)| (a - b).abs() <= 1.0 / 255.0));
    }

    #[test]
    fn constant_block_is_exact() {
        for c in [0.0f32, -3.25, 7.0e-3] {
            let qt = quantize_linear(&[c, c, c], 64).unwrap();
            assert!(qt.payload().iter().all(|&q| q == 0));
            assert_eq!(dequantize_linear(&qt).unwrap(), vec![c, c, c]);
        }
        let qt = quantize_log(&[2.5e-4; 5], 4, DEFAULT_EPSILON).unwrap();
        for v in dequantize_log(&qt).unwrap() {
            assert!(((v - 2.5e-4) / 2.5e-4).abs() < 2e-6);
        }
    }

    #[test]
    fn log_hand_example() {
        let x = [1e-8f32, 1e-4, 1.0];
        let qt = quantize_log(&x, 4, DEFAULT_EPSILON).unwrap();
        // ln(x + ε) with natural log: (-17.7275, -9.2102, 1e-8) → 255·0.48046 = 122.52
        assert_eq!(&qt.payload()[..3], &[0, 122, 255]);
        let e = 1e-8f64;
        assert!((f64::from(qt.lo()[0]) - (1e-8f64 + e).ln()).abs() < 1e-5);
        assert!((f64::from(qt.hi()[0]) - (1.0f64 + e).ln()).abs() < 1e-6);
    }

    #[test]
    fn zero_variance_dequantizes_to_exact_zero() {
        let qt = quantize_log(&[0.0; 100], 64, DEFAULT_EPSILON).unwrap();
        assert_eq!(qt.num_blocks(), 2);
        assert!(qt.payload().iter().all(|&q| q == 0));
        assert_eq!(qt.lo(), qt.hi());
        assert!(dequantize_log(&qt).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn log_singleton_roundtrip() {
        let qt = quantize_log(&[1e-6], 64, DEFAULT_EPSILON).unwrap();
        let v = dequantize_log(&qt).unwrap()[0];
        assert!(((v - 1e-6) / 1e-6).abs() < 2e-6, "{v}");
    }

    #[test]
    fn log_reconstruction_never_negative() {
        let mut rng = RngStream::new(5, 5);
        let x: Vec<f32> = (0..4096)
            .map(|i| if i % 7 == 0 { 0.0 } else { 10f64.powf(rng.uniform_range(-14.0, 0.0)) as f32 })
            .collect();
        let qt = quantize_log(&x, 64, DEFAULT_EPSILON).unwrap();
        assert!(dequantize_log(&qt).unwrap().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn wide_log_block_uses_all_levels_with_bounded_relative_error() {
        // 256 geometrically spaced values over 1e-12..1e-3 in one block
        let x: Vec<f32> = (0..256)
            .map(|i| 10f64.powf(-12.0 + 9.0 * i as f64 / 255.0) as f32)
            .collect();
        let qt = quantize_log(&x, 256, DEFAULT_EPSILON).unwrap();
        let bound = (qt.block_range(0) / 255.0).exp() - 1.0;
        let back = qt.dequantize();
        for (&a, &b) in x.iter().zip(&back) {
            let a = f64::from(a);
            if a >= 1e-7 {
                let rel = (f64::from(b) - a).abs() / a;
                assert!(rel <= bound * (1.0 + 1e-8 / a) + 1e-6, "x={a} rel={rel} bound={bound}");
            }
        }
        let distinct: std::collections::BTreeSet<u8> = qt.payload().iter().copied().collect();
        assert!(distinct.len() > 100);
    }

    #[test]
    fn error_paths() {
        assert!(matches!(quantize_linear(&[1.0], 0), Err(Error::Parameter(_))));
        assert!(matches!(quantize_linear(&[f32::NAN], 4), Err(Error::Data(_))));
        assert!(matches!(
            quantize_linear(&[f32::INFINITY], 4),
            Err(Error::Data(_))
        ));
        assert!(matches!(
            quantize_log(&[1.0, -1e-9], 4, DEFAULT_EPSILON),
            Err(Error::Data(_))
        ));
        assert!(matches!(
            quantize_log(&[1.0], 4, 0.0),
            Err(Error::Parameter(_))
        ));
        let lin = quantize_linear(&[1.0, 2.0], 2).unwrap();
        assert!(matches!(dequantize_log(&lin), Err(Error::Usage(_))));
        let log = quantize_log(&[1.0, 2.0], 2, DEFAULT_EPSILON).unwrap();
        assert!(matches!(dequantize_linear(&log), Err(Error::Usage(_))));
    }

    #[test]
    fn empty_input_has_no_blocks() {
        let qt = quantize_linear(&[], 64).unwrap();
        assert_eq!(qt.num_blocks(), 0);
        assert!(qt.dequantize().is_empty());
    }

    #[test]
    fn padding_is_ignored_by_range_and_decode() {
        let mut x = vec![5.0f32; 64];
        x.push(-1.0);
        let qt = quantize_linear(&x, 64).unwrap();
        assert_eq!(qt.num_blocks(), 2);
        assert_eq!(qt.padding_len(), 63);
        // second block holds only -1.0, padding does not widen it
        assert_eq!((qt.lo()[1], qt.hi()[1]), (-1.0, -1.0));
        assert!(qt.payload()[65..].iter().all(|&q| q == 0));
        assert_eq!(qt.dequantize(), x);
    }

    #[test]
    fn from_parts_validates() {
        assert!(QuantizedTensor::from_parts(QuantMode::Linear, 4, 3, vec![0; 4], vec![0.0], vec![1.0], 1e-8).is_ok());
        assert!(QuantizedTensor::from_parts(QuantMode::Linear, 4, 5, vec![0; 4], vec![0.0], vec![1.0], 1e-8).is_err());
        assert!(QuantizedTensor::from_parts(QuantMode::Linear, 4, 3, vec![0; 4], vec![2.0], vec![1.0], 1e-8).is_err());
        assert!(QuantizedTensor::from_parts(QuantMode::Linear, 0, 0, vec![], vec![], vec![], 1e-8).is_err());
    }
}
