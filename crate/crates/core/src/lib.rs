//! Distribution-aware 8-bit optimizer state quantization for federated Adam.
//!
//! Adam keeps two FP32 buffers per parameter. This crate stores the
//! momentum with block-wise linear INT8 codes and the variance with
//! block-wise log-space INT8 codes, cutting optimizer memory from `8N`
//! to roughly `2.25N` bytes for `B = 64`, and ships a deterministic
//! federated simulator to measure what that does to training.
//!
//! Module map:
//!
//! - [`ndcore`]: dense FP32 tensors, matmul, seeded RNG streams, Gaussian and Dirichlet draws
//! - [`quant`]: linear / log-space block quantizers, dynamic-tree baseline, memory accounting, binary format
//! - [`optim`]: Adam with per-mode state storage plus a FedAdam server reference
//! - [`model`]: small ReLU MLP with hand-written backprop
//! - [`data`]: synthetic datasets, Dirichlet partitioning, heterogeneity statistics, text dataset format
//! - [`fed`]: client sampling, local training, FedAvg aggregation, the round loop
//! - [`analysis`]: precision study, state histograms, memory scaling projection
//! - [`cli`]: config resolution, manifests, metrics files, sweeps (backs the `qlocal` binary)
//!
//! ```
//! use qlocal::quant::{quantize_log, dequantize_log, DEFAULT_EPSILON};
//!
//! let v = vec![1e-8_f32, 1e-4, 1.0];
//! let qt = quantize_log(&v, 4, DEFAULT_EPSILON).unwrap();
//! assert_eq!(&qt.payload()[..3], &[0, 122, 255]);
//! let back = dequantize_log(&qt).unwrap();
//! assert!((back[2] - 1.0).abs() < 1e-6);
//! ```

pub mod analysis;
pub mod cli;
pub mod data;
pub mod error;
pub mod fed;
pub mod model;
pub mod ndcore;
pub mod optim;
pub mod quant;

pub use error::{Error, Result};
