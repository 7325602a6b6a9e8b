use rand::seq::{index, SliceRandom};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::{Error, Result};

/// Words reserved per round when a round offset is folded into the counter.
const ROUND_WORDS: u128 = 1 << 40;

/// Deterministic random stream identified by `(seed, stream_id)`.
///
/// Backed by ChaCha8 with the 64-bit seed expanded through
/// `seed_from_u64` and `stream_id` used as the ChaCha stream (nonce).
/// Round offsets are folded into the block counter, so
/// `(seed, stream_id, round)` names a disjoint, reproducible sequence
/// independent of thread scheduling.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    inner: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream_id);
        Self {
            seed,
            stream_id,
            inner,
        }
    }

    /// Stream positioned at the start of `round`'s counter window.
    pub fn for_round(seed: u64, stream_id: u64, round: u64) -> Self {
        let mut s = Self::new(seed, stream_id);
        s.inner.set_word_pos(u128::from(round) * ROUND_WORDS);
        s
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn gaussian_vec(&mut self, mean: f32, std: f32, n: usize) -> Vec<f32> {
        (0..n)
            .map(|_| mean + std * self.standard_normal() as f32)
            .collect()
    }

    /// Gamma(shape, 1) draw (Marsaglia–Tsang, with the `U^(1/shape)` boost below 1).
    pub fn gamma(&mut self, shape: f64) -> Result<f64> {
        let dist = Gamma::new(shape, 1.0)
            .map_err(|e| Error::Parameter(format!("gamma shape {shape}: {e}")))?;
        Ok(dist.sample(&mut self.inner))
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }

    /// `k` distinct indices from `0..n`, uniformly, returned in ascending order.
    pub fn sample_without_replacement(&mut self, n: usize, k: usize) -> Vec<usize> {
        let mut picked = index::sample(&mut self.inner, n, k).into_vec();
        picked.sort_unstable();
        picked
    }
}

/// Symmetric Dirichlet(alpha, ..., alpha) draw of length `n`.
///
/// Normalized Gamma draws. If every Gamma draw underflows (possible for very
/// small `alpha`) the draw is retried, and after repeated underflow the
/// `alpha → 0` limit (a one-hot vector) is returned.
pub fn sample_dirichlet(rng: &mut RngStream, alpha: f64, n: usize) -> Result<Vec<f64>> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::Parameter(format!(
            "dirichlet concentration must be positive and finite, got {alpha}"
        )));
    }
    if n == 0 {
        return Err(Error::Parameter("dirichlet dimension must be >= 1".into()));
    }
    if n == 1 {
        return Ok(vec![1.0]);
    }
    for _ in 0..16 {
        let draws = (0..n)
            .map(|_| rng.gamma(alpha))
            .collect::<Result<Vec<f64>>>()?;
        let total: f64 = draws.iter().sum();
        if total > 0.0 && total.is_finite() {
            return Ok(draws.into_iter().map(|g| g / total).collect());
        }
    }
    let mut onehot = vec![0.0; n];
    onehot[rng.below(n)] = 1.0;
    Ok(onehot)
}

pub fn sample_gaussian(rng: &mut RngStream, mean: f32, std: f32, n: usize) -> Result<Vec<f32>> {
    if !(std >= 0.0) || !std.is_finite() || !mean.is_finite() {
        return Err(Error::Parameter(format!(
            "gaussian needs finite mean and std >= 0, got mean={mean} std={std}"
        )));
    }
    Ok(rng.gaussian_vec(mean, std, n))
}
