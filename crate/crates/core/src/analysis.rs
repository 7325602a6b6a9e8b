//! Precision, distribution and memory-scaling studies.

use std::fmt::Write as _;

use serde::Serialize;

use crate::data::generate_synthetic;
use crate::model::MlpModel;
use crate::ndcore::RngStream;
use crate::optim::{init_state, AdamHyper, AdamState, OptimizerMode};
use crate::quant::{
    dequantize_dynamic_tree, quantize_dynamic_tree, quantize_linear, quantize_log, quantized_state_bytes,
    state_bytes_formula, DEFAULT_EPSILON, MIB,
};
use crate::{Error, Result};

/// Denominator floor for relative error, so exact zeros do not divide by zero.
pub const REL_ERR_FLOOR: f64 = 1e-30;

/// `|x̃ − x| / max(x, 1e-30)`.
pub fn relative_error(approx: f32, exact: f32) -> f64 {
    (f64::from(approx) - f64::from(exact)).abs() / f64::from(exact).abs().max(REL_ERR_FLOOR)
}

/// `exp(uniform(ln lo, ln hi))`, `n` draws.
pub fn log_uniform(rng: &mut RngStream, n: usize, lo: f64, hi: f64) -> Result<Vec<f32>> {
    if !(lo > 0.0 && lo.is_finite() && hi.is_finite()) {
        return Err(Error::Parameter(format!("log-uniform needs 0 < lo, got lo = {lo}")));
    }
    if hi < lo {
        return Err(Error::Parameter(format!("empty range [{lo}, {hi}]")));
    }
    let (a, b) = (lo.ln(), hi.ln());
    Ok((0..n)
        .map(|_| (rng.uniform_range(a, b).exp() as f32).clamp(lo as f32, hi as f32))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecadeBucket {
    /// Bucket covers `[10^decade, 10^(decade+1))`.
    pub decade: i32,
    pub count: usize,
    pub mean_relative_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PrecisionReport {
    pub scheme: String,
    pub n: usize,
    pub mean_relative_error: f64,
    pub max_relative_error: f64,
    pub buckets: Vec<DecadeBucket>,
}

impl PrecisionReport {
    pub fn from_pairs(scheme: &str, exact: &[f32], approx: &[f32]) -> Self {
        let errs: Vec<f64> = exact.iter().zip(approx).map(|(&x, &a)| relative_error(a, x)).collect();
        let n = errs.len();
        let mut buckets: Vec<DecadeBucket> = Vec::new();
        let positive = exact.iter().filter(|&&x| x > 0.0);
        if let (Some(lo), Some(hi)) = (
            positive.clone().map(|&x| decade_of(x)).min(),
            positive.map(|&x| decade_of(x)).max(),
        ) {
            let mut sums = vec![(0usize, 0.0f64); (hi - lo + 1) as usize];
            for (&x, e) in exact.iter().zip(&errs) {
                if x > 0.0 {
                    let s = &mut sums[(decade_of(x) - lo) as usize];
                    s.0 += 1;
                    s.1 += e;
                }
            }
            buckets = sums
                .into_iter()
                .enumerate()
                .map(|(i, (count, sum))| DecadeBucket {
                    decade: lo + i as i32,
                    count,
                    mean_relative_error: if count == 0 { 0.0 } else { sum / count as f64 },
                })
                .collect();
        }
        Self {
            scheme: scheme.to_string(),
            n,
            mean_relative_error: if n == 0 { 0.0 } else { errs.iter().sum::<f64>() / n as f64 },
            max_relative_error: errs.iter().copied().fold(0.0, f64::max),
            buckets,
        }
    }
}

fn decade_of(x: f32) -> i32 {
    f64::from(x).log10().floor() as i32
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PrecisionStudy {
    pub lo: f64,
    pub hi: f64,
    pub block_size: usize,
    /// Block-wise log-space INT8.
    pub log_space: PrecisionReport,
    /// Absmax-normalized dynamic-tree INT8.
    pub dynamic_tree: PrecisionReport,
    /// Log-space INT8 with the whole array as one block.
    pub log_space_whole: PrecisionReport,
}

impl PrecisionStudy {
    /// `dynamic_tree / log_space` mean relative error.
    pub fn error_ratio(&self) -> f64 {
        self.dynamic_tree.mean_relative_error / self.log_space.mean_relative_error
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("scheme\tdecade\tcount\tmean_relative_error\n");
        for r in [&self.log_space, &self.dynamic_tree, &self.log_space_whole] {
            let _ = writeln!(s, "{}\tall\t{}\t{:e}", r.scheme, r.n, r.mean_relative_error);
            for b in &r.buckets {
                let _ = writeln!(s, "{}\t{}\t{}\t{:e}", r.scheme, b.decade, b.count, b.mean_relative_error);
            }
        }
        s
    }
}

/// Round-trips `n` log-uniform values on `[lo, hi]` through each 8-bit scheme.
pub fn precision_study(rng: &mut RngStream, n: usize, lo: f64, hi: f64, block_size: usize) -> Result<PrecisionStudy> {
    let x = log_uniform(rng, n, lo, hi)?;
    precision_study_on(&x, lo, hi, block_size)
}

pub fn precision_study_on(x: &[f32], lo: f64, hi: f64, block_size: usize) -> Result<PrecisionStudy> {
    let log = quantize_log(x, block_size, DEFAULT_EPSILON)?.dequantize();
    let whole = quantize_log(x, x.len().max(1), DEFAULT_EPSILON)?.dequantize();
    let tree = dequantize_dynamic_tree(&quantize_dynamic_tree(x)?);
    Ok(PrecisionStudy {
        lo,
        hi,
        block_size,
        log_space: PrecisionReport::from_pairs("log-space", x, &log),
        dynamic_tree: PrecisionReport::from_pairs("dynamic-tree", x, &tree),
        log_space_whole: PrecisionReport::from_pairs("log-space-whole", x, &whole),
    })
}

/// Linear vs log INT8 storage of a heavy-tailed nonnegative array.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StorageComparison {
    pub n: usize,
    pub block_size: usize,
    pub linear_mean_relative_error: f64,
    /// Share of elements reconstructed with relative error above 50%.
    pub linear_fraction_over_half: f64,
    pub linear_fraction_zeroed: f64,
    pub log_mean_relative_error: f64,
    pub log_fraction_over_half: f64,
}

pub fn compare_storage(x: &[f32], block_size: usize) -> Result<StorageComparison> {
    let lin = quantize_linear(x, block_size)?.dequantize();
    let log = quantize_log(x, block_size, DEFAULT_EPSILON)?.dequantize();
    let n = x.len().max(1) as f64;
    let over = |approx: &[f32]| x.iter().zip(approx).filter(|(&e, &a)| relative_error(a, e) > 0.5).count() as f64 / n;
    Ok(StorageComparison {
        n: x.len(),
        block_size,
        linear_mean_relative_error: PrecisionReport::from_pairs("", x, &lin).mean_relative_error,
        linear_fraction_over_half: over(&lin),
        linear_fraction_zeroed: lin.iter().filter(|&&v| v == 0.0).count() as f64 / n,
        log_mean_relative_error: PrecisionReport::from_pairs("", x, &log).mean_relative_error,
        log_fraction_over_half: over(&log),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum BinScale {
    Linear,
    Log10,
}

/// Bin counts with `edges.len() == counts.len() + 1`.
///
/// `underflow` holds values that cannot be placed on the axis (zeros on a
/// log10 axis), so `counts.sum() + underflow == total`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Histogram {
    pub scale: BinScale,
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub underflow: u64,
    pub total: u64,
    pub min: f64,
    pub max: f64,
}

pub const LINEAR_BINS: usize = 100;
pub const LOG_BINS_PER_DECADE: usize = 4;

impl Histogram {
    /// `bins` equal-width bins over `[min, max]`. A constant input gives one
    /// unit-wide bin centered on the value.
    pub fn linear(values: &[f32], bins: usize) -> Self {
        let (min, max) = min_max(values.iter().copied());
        let total = values.len() as u64;
        if values.is_empty() || min == max || bins == 0 {
            let edges = if values.is_empty() { vec![] } else { vec![min - 0.5, min + 0.5] };
            let counts = if values.is_empty() { vec![] } else { vec![total] };
            return Self { scale: BinScale::Linear, edges, counts, underflow: 0, total, min, max };
        }
        let width = (max - min) / bins as f64;
        let edges: Vec<f64> = (0..=bins).map(|i| if i == bins { max } else { min + width * i as f64 }).collect();
        let mut counts = vec![0u64; bins];
        for &v in values {
            let i = (((f64::from(v) - min) / width) as usize).min(bins - 1);
            counts[i] += 1;
        }
        Self { scale: BinScale::Linear, edges, counts, underflow: 0, total, min, max }
    }

    /// Bins of `1 / bins_per_decade` decades aligned to multiples of that
    /// width; nonpositive values go to `underflow`.
    pub fn log10(values: &[f32], bins_per_decade: usize) -> Self {
        let total = values.len() as u64;
        let positive: Vec<f64> = values.iter().filter(|&&v| v > 0.0).map(|&v| f64::from(v).log10()).collect();
        let underflow = total - positive.len() as u64;
        let (min, max) = min_max(values.iter().copied());
        if positive.is_empty() || bins_per_decade == 0 {
            return Self { scale: BinScale::Log10, edges: vec![], counts: vec![], underflow, total, min, max };
        }
        let per = bins_per_decade as f64;
        let (lmin, lmax) = positive.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &l| (a.min(l), b.max(l)));
        let first = (lmin * per).floor() as i64;
        let last = ((lmax * per).floor() as i64).max(first);
        let bins = (last - first + 1) as usize;
        let edges = (0..=bins).map(|i| (first + i as i64) as f64 / per).collect();
        let mut counts = vec![0u64; bins];
        for l in positive {
            let i = ((l * per).floor() as i64 - first).clamp(0, bins as i64 - 1) as usize;
            counts[i] += 1;
        }
        Self { scale: BinScale::Log10, edges, counts, underflow, total, min, max }
    }

    /// Width of the occupied range; decades for log10 histograms.
    pub fn occupied_span(&self) -> f64 {
        let first = self.counts.iter().position(|&c| c > 0);
        let last = self.counts.iter().rposition(|&c| c > 0);
        match (first, last) {
            (Some(a), Some(b)) => self.edges[b + 1] - self.edges[a],
            _ => 0.0,
        }
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("bin_lo\tbin_hi\tcount\n");
        if self.underflow > 0 {
            let _ = writeln!(s, "underflow\tunderflow\t{}", self.underflow);
        }
        for (i, c) in self.counts.iter().enumerate() {
            let _ = writeln!(s, "{:e}\t{:e}\t{c}", self.edges[i], self.edges[i + 1]);
        }
        s
    }
}

fn min_max(values: impl Iterator<Item = f32>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(f64::from(v)), b.max(f64::from(v))));
    if lo.is_finite() {
        (lo, hi)
    } else {
        (0.0, 0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StateHistograms {
    /// Momentum, 100 linear bins.
    pub momentum: Histogram,
    /// Variance, quarter-decade log10 bins.
    pub variance: Histogram,
}

/// Histograms of the dequantized moments of every tensor in `state`.
pub fn state_histograms(state: &AdamState) -> Result<StateHistograms> {
    if state.param_count() == 0 {
        return Err(Error::Parameter("optimizer state holds no elements".into()));
    }
    let m: Vec<f32> = state.momentum().concat();
    let v: Vec<f32> = state.variance().concat();
    Ok(StateHistograms {
        momentum: Histogram::linear(&m, LINEAR_BINS),
        variance: Histogram::log10(&v, LOG_BINS_PER_DECADE),
    })
}

/// Optimizer state after a short full-precision warmup on the synthetic task.
#[derive(Debug, Clone)]
pub struct Warmup {
    pub state: AdamState,
    /// Largest gradient magnitude seen during warmup.
    pub max_abs_grad: f32,
    pub steps: usize,
}

/// `steps` mini-batch Adam steps on a 10-class synthetic problem with the
/// default MLP.
pub fn histogram_warmup(seed: u64, steps: usize, mode: OptimizerMode) -> Result<Warmup> {
    let data = generate_synthetic(&mut RngStream::new(seed, 0), 2048, 32, 10, 3.0)?;
    let mut model = MlpModel::new(&[32, 128, 64, 10], &mut RngStream::new(seed, 1))?;
    let mut state = init_state(&model.param_shapes(), mode, AdamHyper::default(), 64)?;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut rng = RngStream::new(seed, 2);
    let mut max_abs_grad = 0.0f32;
    let mut done = 0;
    while done < steps {
        rng.shuffle(&mut order);
        for batch in order.chunks(64) {
            if done == steps {
                break;
            }
            let (x, y) = data.gather(batch)?;
            let (_, grads) = model.loss_and_grads(&x, &y)?;
            max_abs_grad = grads.iter().map(|g| g.max_abs()).fold(max_abs_grad, f32::max);
            state.step(model.params_mut(), &grads)?;
            done += 1;
        }
    }
    Ok(Warmup { state, max_abs_grad, steps })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScalingRow {
    pub params: u64,
    pub fp32_bytes: u64,
    pub fp32_mib: f64,
    /// Both states quantized as one padded tensor each.
    pub quantized_bytes: u64,
    pub quantized_mib: f64,
    /// `2N + 16N/B`, unpadded.
    pub formula_bytes: f64,
    pub ratio: f64,
}

/// Two-state optimizer memory for each parameter count, FP32 vs block INT8.
pub fn scaling_projection(param_counts: &[u64], block_size: usize) -> Result<Vec<ScalingRow>> {
    if block_size == 0 {
        return Err(Error::Parameter("block size must be positive".into()));
    }
    param_counts
        .iter()
        .map(|&n| {
            if n == 0 {
                return Err(Error::Parameter("parameter count must be positive".into()));
            }
            let b = block_size as u64;
            let fp32_bytes = 8 * n;
            let quantized_bytes = 2 * quantized_state_bytes(n, b);
            Ok(ScalingRow {
                params: n,
                fp32_bytes,
                fp32_mib: fp32_bytes as f64 / MIB,
                quantized_bytes,
                quantized_mib: quantized_bytes as f64 / MIB,
                formula_bytes: state_bytes_formula(n, b),
                ratio: fp32_bytes as f64 / quantized_bytes as f64,
            })
        })
        .collect()
}

pub fn scaling_tsv(rows: &[ScalingRow]) -> String {
    let mut s = String::from("params\tfp32_mib\tquantized_mib\tratio\tfp32_bytes\tquantized_bytes\tformula_bytes\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{}\t{:.2}\t{:.2}\t{:.3}\t{}\t{}\t{}",
            r.params, r.fp32_mib, r.quantized_mib, r.ratio, r.fp32_bytes, r.quantized_bytes, r.formula_bytes
        );
    }
    s
}
