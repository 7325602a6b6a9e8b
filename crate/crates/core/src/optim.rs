//! Adam with per-mode optimizer state storage.
//!
//! Each step dequantizes the previous `m`/`v`, applies the Adam moment
//! updates in FP32, re-stores the new moments in the mode's format, and
//! then updates the parameters from the *FP32* moments. Storage error
//! therefore only reaches the next step, never the current update.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::ndcore::DenseTensor;
use crate::quant::{
    memory_report, quantize_linear, quantize_log, MemoryReport, QuantMode, QuantizedTensor,
    DEFAULT_EPSILON,
};
use crate::{Error, Result};

/// Largest supported local step counter.
pub const MAX_STEP: u64 = 1 << 31;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OptimizerMode {
    /// Vanilla client Adam, both states FP32.
    #[serde(rename = "fp32")]
    Fp32,
    /// Linear INT8 momentum, log-space INT8 variance.
    #[serde(rename = "qlocaladam")]
    QLocalAdam,
    /// Linear INT8 for both states.
    #[serde(rename = "naive-int8")]
    NaiveInt8,
    /// Linear INT8 momentum, FP32 variance.
    #[serde(rename = "m-only")]
    MomentumOnly,
    /// FP32 momentum, log-space INT8 variance.
    #[serde(rename = "v-only")]
    VarianceOnly,
}

/// How one optimizer state buffer is held between steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Storage {
    Fp32,
    Linear8,
    Log8,
}

impl OptimizerMode {
    pub const ALL: [OptimizerMode; 5] = [
        OptimizerMode::Fp32,
        OptimizerMode::QLocalAdam,
        OptimizerMode::NaiveInt8,
        OptimizerMode::MomentumOnly,
        OptimizerMode::VarianceOnly,
    ];

    /// `(momentum storage, variance storage)`.
    pub fn storage(self) -> (Storage, Storage) {
        use Storage::*;
        match self {
            OptimizerMode::Fp32 => (Fp32, Fp32),
            OptimizerMode::QLocalAdam => (Linear8, Log8),
            OptimizerMode::NaiveInt8 => (Linear8, Linear8),
            OptimizerMode::MomentumOnly => (Linear8, Fp32),
            OptimizerMode::VarianceOnly => (Fp32, Log8),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            OptimizerMode::Fp32 => "fp32",
            OptimizerMode::QLocalAdam => "qlocaladam",
            OptimizerMode::NaiveInt8 => "naive-int8",
            OptimizerMode::MomentumOnly => "m-only",
            OptimizerMode::VarianceOnly => "v-only",
        }
    }

    fn wire_tag(self) -> u8 {
        match self {
            OptimizerMode::Fp32 => 0,
            OptimizerMode::QLocalAdam => 1,
            OptimizerMode::NaiveInt8 => 2,
            OptimizerMode::MomentumOnly => 3,
            OptimizerMode::VarianceOnly => 4,
        }
    }

    fn from_wire_tag(tag: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.wire_tag() == tag)
    }
}

impl fmt::Display for OptimizerMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OptimizerMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                Error::Usage(format!(
                    "unknown optimizer mode `{s}` (expected fp32, qlocaladam, naive-int8, m-only or v-only)"
                ))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: DEFAULT_EPSILON,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum StateBuffer {
    Fp32(Vec<f32>),
    Quantized(QuantizedTensor),
}

impl StateBuffer {
    fn store(storage: Storage, values: Vec<f32>, block_size: usize, eps: f32) -> Result<Self> {
        Ok(match storage {
            Storage::Fp32 => StateBuffer::Fp32(values),
            Storage::Linear8 => StateBuffer::Quantized(quantize_linear(&values, block_size)?),
            Storage::Log8 => StateBuffer::Quantized(quantize_log(&values, block_size, eps)?),
        })
    }

    fn load(&self) -> Vec<f32> {
        match self {
            StateBuffer::Fp32(v) => v.clone(),
            StateBuffer::Quantized(q) => q.dequantize(),
        }
    }

    fn memory(&self) -> MemoryReport {
        match self {
            StateBuffer::Fp32(v) => MemoryReport::fp32(v.len()),
            StateBuffer::Quantized(q) => memory_report(q),
        }
    }

    fn storage(&self) -> Storage {
        match self {
            StateBuffer::Fp32(_) => Storage::Fp32,
            StateBuffer::Quantized(q) => match q.mode() {
                QuantMode::Linear => Storage::Linear8,
                QuantMode::Log => Storage::Log8,
            },
        }
    }
}

/// One client's Adam moments for a list of parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    mode: OptimizerMode,
    hyper: AdamHyper,
    block_size: usize,
    step: u64,
    shapes: Vec<Vec<usize>>,
    m: Vec<StateBuffer>,
    v: Vec<StateBuffer>,
}

/// Zero moments in the storage formats `mode` prescribes.
pub fn init_state(
    param_shapes: &[Vec<usize>],
    mode: OptimizerMode,
    hyper: AdamHyper,
    block_size: usize,
) -> Result<AdamState> {
    if block_size == 0 {
        return Err(Error::Parameter("block size must be >= 1".into()));
    }
    let (ms, vs) = mode.storage();
    let mut m = Vec::with_capacity(param_shapes.len());
    let mut v = Vec::with_capacity(param_shapes.len());
    for shape in param_shapes {
        let n: usize = shape.iter().product();
        m.push(StateBuffer::store(ms, vec![0.0; n], block_size, hyper.eps)?);
        v.push(StateBuffer::store(vs, vec![0.0; n], block_size, hyper.eps)?);
    }
    Ok(AdamState {
        mode,
        hyper,
        block_size,
        step: 0,
        shapes: param_shapes.to_vec(),
        m,
        v,
    })
}

impl AdamState {
    pub fn mode(&self) -> OptimizerMode {
        self.mode
    }

    pub fn hyper(&self) -> AdamHyper {
        self.hyper
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn shapes(&self) -> &[Vec<usize>] {
        &self.shapes
    }

    pub fn param_count(&self) -> usize {
        self.shapes.iter().map(|s| s.iter().product::<usize>()).sum()
    }

    /// Dequantized momentum per tensor.
    pub fn momentum(&self) -> Vec<Vec<f32>> {
        self.m.iter().map(StateBuffer::load).collect()
    }

    /// Dequantized variance per tensor.
    pub fn variance(&self) -> Vec<Vec<f32>> {
        self.v.iter().map(StateBuffer::load).collect()
    }

    /// The stored quantized momentum of tensor `i`, if it is quantized.
    pub fn quantized_momentum(&self, i: usize) -> Option<&QuantizedTensor> {
        match &self.m[i] {
            StateBuffer::Quantized(q) => Some(q),
            StateBuffer::Fp32(_) => None,
        }
    }

    pub fn quantized_variance(&self, i: usize) -> Option<&QuantizedTensor> {
        match &self.v[i] {
            StateBuffer::Quantized(q) => Some(q),
            StateBuffer::Fp32(_) => None,
        }
    }

    fn validate(&self, params: &[DenseTensor], grads: &[DenseTensor]) -> Result<()> {
        if params.len() != self.shapes.len() || grads.len() != self.shapes.len() {
            return Err(Error::Dimension(format!(
                "state tracks {} tensors, got {} params and {} grads",
                self.shapes.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, ((p, g), s)) in params.iter().zip(grads).zip(&self.shapes).enumerate() {
            if p.shape() != s.as_slice() || g.shape() != s.as_slice() {
                return Err(Error::Dimension(format!(
                    "tensor {i}: state shape {s:?}, param {:?}, grad {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
            if g.data().iter().any(|x| !x.is_finite()) {
                return Err(Error::Data(format!("tensor {i}: non-finite gradient")));
            }
        }
        if self.step >= MAX_STEP {
            return Err(Error::State(format!(
                "step counter would exceed {MAX_STEP}"
            )));
        }
        Ok(())
    }

    /// One Adam step over every tensor; `params` are updated in place.
    pub fn step(&mut self, params: &mut [DenseTensor], grads: &[DenseTensor]) -> Result<()> {
        self.validate(params, grads)?;
        let step = self.step + 1;
        let AdamHyper {
            lr,
            beta1,
            beta2,
            eps,
        } = self.hyper;
        let exp = i32::try_from(step).expect("step bounded by MAX_STEP");
        let bc1 = (1.0 - f64::from(beta1).powi(exp)) as f32;
        let bc2 = (1.0 - f64::from(beta2).powi(exp)) as f32;
        let (ms, vs) = self.mode.storage();

        // Compute everything before mutating so a failure leaves state intact.
        let mut staged = Vec::with_capacity(params.len());
        for (i, g) in grads.iter().enumerate() {
            let g = g.data();
            let mut m = self.m[i].load();
            let mut v = self.v[i].load();
            for ((mj, vj), &gj) in m.iter_mut().zip(v.iter_mut()).zip(g) {
                *mj = beta1 * *mj + (1.0 - beta1) * gj;
                *vj = beta2 * *vj + (1.0 - beta2) * gj * gj;
            }
            let update: Vec<f32> = m
                .iter()
                .zip(&v)
                .map(|(&mj, &vj)| {
                    let m_hat = mj / bc1;
                    let v_hat = vj / bc2;
                    lr * m_hat / (v_hat.sqrt() + eps)
                })
                .collect();
            let m_store = StateBuffer::store(ms, m, self.block_size, eps)?;
            let v_store = StateBuffer::store(vs, v, self.block_size, eps)?;
            staged.push((m_store, v_store, update));
        }

        for (i, (m_store, v_store, update)) in staged.into_iter().enumerate() {
            let data = params[i].data_mut();
            for (p, u) in data.iter_mut().zip(update) {
                *p -= u;
            }
            if let Some(j) = data.iter().position(|x| !x.is_finite()) {
                return Err(Error::Data(format!(
                    "tensor {i}: parameter {j} became non-finite"
                )));
            }
            self.m[i] = m_store;
            self.v[i] = v_store;
        }
        self.step = step;
        Ok(())
    }
}

/// [`AdamState::step`] with an explicit mode check.
pub fn adam_step(
    state: &mut AdamState,
    params: &mut [DenseTensor],
    grads: &[DenseTensor],
    mode: OptimizerMode,
) -> Result<()> {
    if state.mode != mode {
        return Err(Error::Usage(format!(
            "state was initialized for {}, step requested as {mode}",
            state.mode
        )));
    }
    state.step(params, grads)
}

/// Stored bytes for every moment buffer of `state`.
pub fn state_memory_bytes(state: &AdamState) -> MemoryReport {
    state
        .m
        .iter()
        .chain(&state.v)
        .map(StateBuffer::memory)
        .sum()
}

/// Server-side FedAdam update (reference math, not used by the training loop).
///
/// `Δ = mean(client_deltas)`, `m ← β1·m + (1−β1)·Δ`, `v ← β2·v + (1−β2)·Δ²`,
/// `θ ← θ − η·m / (√v + ε)`.
pub fn fedadam_server_step(
    theta: &mut [f32],
    m: &mut [f32],
    v: &mut [f32],
    client_deltas: &[Vec<f32>],
    hyper: &AdamHyper,
) -> Result<()> {
    if client_deltas.is_empty() {
        return Err(Error::Parameter("fedadam needs at least one client delta".into()));
    }
    let n = theta.len();
    if m.len() != n || v.len() != n || client_deltas.iter().any(|d| d.len() != n) {
        return Err(Error::Dimension("fedadam buffers must share one length".into()));
    }
    let k = client_deltas.len() as f64;
    for j in 0..n {
        let delta = (client_deltas.iter().map(|d| f64::from(d[j])).sum::<f64>() / k) as f32;
        m[j] = hyper.beta1 * m[j] + (1.0 - hyper.beta1) * delta;
        v[j] = hyper.beta2 * v[j] + (1.0 - hyper.beta2) * delta * delta;
        theta[j] -= hyper.lr * m[j] / (v[j].sqrt() + hyper.eps);
    }
    Ok(())
}

const CHECKPOINT_MAGIC: [u8; 4] = *b"QLAS";
const CHECKPOINT_VERSION: u16 = 1;

fn storage_tag(s: Storage) -> u8 {
    match s {
        Storage::Fp32 => 0,
        Storage::Linear8 => 1,
        Storage::Log8 => 2,
    }
}

/// Serializes an optimizer state.
///
/// ```text
/// "QLAS" | version u16 | mode u8 | reserved u8 | step u64 | block size u32 |
/// tensor count u32 | lr f32 | beta1 f32 | beta2 f32 | eps f32
/// per tensor: ndim u32, dims u64 × ndim
/// index: 2 × tensor count entries (m then v per tensor) of
///        tensor u32 | kind u8 (0 = m, 1 = v) | storage u8 | reserved u16 | offset u64 | length u64
/// blobs: QLAQ tensors, or raw little-endian f32 for FP32 buffers
/// ```
///
/// Offsets are relative to the start of the blob section.
pub fn save_checkpoint(state: &AdamState) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.push(state.mode.wire_tag());
    out.push(0);
    out.extend_from_slice(&state.step.to_le_bytes());
    out.extend_from_slice(&(state.block_size as u32).to_le_bytes());
    out.extend_from_slice(&(state.shapes.len() as u32).to_le_bytes());
    for v in [state.hyper.lr, state.hyper.beta1, state.hyper.beta2, state.hyper.eps] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for s in &state.shapes {
        out.extend_from_slice(&(s.len() as u32).to_le_bytes());
        for &d in s {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
    }
    let mut blobs = Vec::new();
    let mut index = Vec::new();
    for (t, (m, v)) in state.m.iter().zip(&state.v).enumerate() {
        for (kind, buf) in [(0u8, m), (1u8, v)] {
            let offset = blobs.len() as u64;
            match buf {
                StateBuffer::Fp32(x) => x.iter().for_each(|f| blobs.extend_from_slice(&f.to_le_bytes())),
                StateBuffer::Quantized(q) => blobs.extend_from_slice(&q.to_bytes()?),
            }
            index.extend_from_slice(&(t as u32).to_le_bytes());
            index.push(kind);
            index.push(storage_tag(buf.storage()));
            index.extend_from_slice(&0u16.to_le_bytes());
            index.extend_from_slice(&offset.to_le_bytes());
            index.extend_from_slice(&(blobs.len() as u64 - offset).to_le_bytes());
        }
    }
    out.extend_from_slice(&index);
    out.extend_from_slice(&blobs);
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos,
                reason: format!("truncated checkpoint, wanted {n} more bytes"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn load_checkpoint(bytes: &[u8]) -> Result<AdamState> {
    let bad = |offset: usize, reason: String| Error::Format { offset, reason };
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4)? != CHECKPOINT_MAGIC {
        return Err(bad(0, "bad magic, expected \"QLAS\"".into()));
    }
    let version = c.u16()?;
    if version != CHECKPOINT_VERSION {
        return Err(bad(4, format!("unsupported checkpoint version {version}")));
    }
    let mode = OptimizerMode::from_wire_tag(c.u8()?)
        .ok_or_else(|| bad(6, "unknown optimizer mode".into()))?;
    c.u8()?;
    let step = c.u64()?;
    let block_size = c.u32()? as usize;
    let count = c.u32()? as usize;
    let hyper = AdamHyper {
        lr: c.f32()?,
        beta1: c.f32()?,
        beta2: c.f32()?,
        eps: c.f32()?,
    };
    let mut shapes = Vec::with_capacity(count);
    for _ in 0..count {
        let nd = c.u32()? as usize;
        let dims = (0..nd)
            .map(|_| c.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        shapes.push(dims);
    }
    let mut entries = Vec::with_capacity(2 * count);
    for _ in 0..2 * count {
        let tensor = c.u32()? as usize;
        let kind = c.u8()?;
        let storage = c.u8()?;
        c.u16()?;
        let offset = c.u64()? as usize;
        let len = c.u64()? as usize;
        entries.push((tensor, kind, storage, offset, len));
    }
    let blob_start = c.pos;
    let blobs = &bytes[blob_start..];
    let (ms, vs) = mode.storage();
    let mut m = Vec::with_capacity(count);
    let mut v = Vec::with_capacity(count);
    for (i, &(tensor, kind, storage, offset, len)) in entries.iter().enumerate() {
        let expect_tensor = i / 2;
        let expect_kind = (i % 2) as u8;
        let want = if expect_kind == 0 { ms } else { vs };
        if tensor != expect_tensor || kind != expect_kind || storage != storage_tag(want) {
            return Err(bad(blob_start, format!("index entry {i} does not match mode {mode}")));
        }
        let end = offset
            .checked_add(len)
            .filter(|&e| e <= blobs.len())
            .ok_or_else(|| bad(blob_start + offset, format!("entry {i} runs past end")))?;
        let blob = &blobs[offset..end];
        let n: usize = shapes[tensor].iter().product();
        let buf = match want {
            Storage::Fp32 => {
                if blob.len() != 4 * n {
                    return Err(bad(blob_start + offset, format!("entry {i}: expected {} bytes", 4 * n)));
                }
                StateBuffer::Fp32(
                    blob.chunks_exact(4)
                        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                        .collect(),
                )
            }
            _ => {
                let q = QuantizedTensor::from_bytes(blob)?;
                if q.original_len() != n || q.block_size() != block_size {
                    return Err(bad(blob_start + offset, format!("entry {i}: tensor layout mismatch")));
                }
                StateBuffer::Quantized(q)
            }
        };
        if expect_kind == 0 {
            m.push(buf);
        } else {
            v.push(buf);
        }
    }
    Ok(AdamState {
        mode,
        hyper,
        block_size,
        step,
        shapes,
        m,
        v,
    })
}
