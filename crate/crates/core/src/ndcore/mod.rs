//! Dense FP32 tensors and seeded randomness.

mod rng;
mod tensor;

pub use rng::{sample_dirichlet, sample_gaussian, RngStream};
pub use tensor::{matmul, DenseTensor};
