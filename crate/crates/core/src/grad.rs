//! Dense gradients, seeded randomness and EWMA smoothing.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, GravacError, Result};

/// A flat single-precision gradient partitioned into model layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientVector {
    values: Vec<f32>,
    layer_offsets: Vec<usize>,
}

impl GradientVector {
    /// A single-layer gradient.
    pub fn new(values: Vec<f32>) -> Self {
        Self {
            values,
            layer_offsets: vec![0],
        }
    }

    pub fn with_layers(values: Vec<f32>, layer_offsets: Vec<usize>) -> Result<Self> {
        validate_offsets(&layer_offsets, values.len())?;
        Ok(Self {
            values,
            layer_offsets,
        })
    }

    pub fn zeros(len: usize) -> Self {
        Self::new(vec![0.0; len])
    }

    /// A zero vector sharing `self`'s layer layout.
    pub fn zeros_like(&self) -> Self {
        Self {
            values: vec![0.0; self.values.len()],
            layer_offsets: self.layer_offsets.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    pub fn layer_offsets(&self) -> &[usize] {
        &self.layer_offsets
    }

    /// Half-open index ranges of each layer.
    pub fn layer_ranges(&self) -> impl Iterator<Item = std::ops::Range<usize>> + '_ {
        let len = self.values.len();
        self.layer_offsets
            .iter()
            .enumerate()
            .filter_map(move |(i, &start)| {
                let end = self.layer_offsets.get(i + 1).copied().unwrap_or(len);
                (end > start).then_some(start..end)
            })
    }

    pub fn squared_norm(&self) -> Result<f64> {
        squared_l2_norm(&self.values)
    }

    pub(crate) fn ensure_len(&self, expected: usize) -> Result<()> {
        if self.values.len() == expected {
            Ok(())
        } else {
            Err(GravacError::LengthMismatch {
                expected,
                actual: self.values.len(),
            })
        }
    }
}

fn validate_offsets(offsets: &[usize], len: usize) -> Result<()> {
    match offsets.first() {
        Some(0) => {}
        _ => return Err(GravacError::InvalidLayout("offsets must start at 0".into())),
    }
    if offsets.windows(2).any(|w| w[0] >= w[1]) {
        return Err(GravacError::InvalidLayout(
            "offsets must be strictly increasing".into(),
        ));
    }
    if offsets.last().is_some_and(|&last| last > len) {
        return Err(GravacError::InvalidLayout(format!(
            "last offset exceeds length {len}"
        )));
    }
    Ok(())
}

/// Sum of squares with 64-bit accumulation.
pub fn squared_l2_norm(values: &[f32]) -> Result<f64> {
    if values.is_empty() {
        return Err(GravacError::EmptyGradient);
    }
    Ok(values.iter().map(|&v| f64::from(v) * f64::from(v)).sum())
}

/// Exponentially weighted moving average; the first observation is taken as-is.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EwmaTracker {
    lambda: f64,
    current: f64,
    initialized: bool,
}

impl EwmaTracker {
    pub fn new(lambda: f64) -> Result<Self> {
        if !(lambda > 0.0 && lambda <= 1.0) {
            return Err(invalid("lambda", format!("{lambda} not in (0, 1]")));
        }
        Ok(Self {
            lambda,
            current: 0.0,
            initialized: false,
        })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    pub fn value(&self) -> Result<f64> {
        if self.initialized {
            Ok(self.current)
        } else {
            Err(GravacError::Uninitialized)
        }
    }

    /// Folds `x` into the average and returns the new value.
    pub fn update(&mut self, x: f64) -> Result<f64> {
        if !x.is_finite() {
            return Err(GravacError::NonFinite(x));
        }
        self.current = if self.initialized {
            self.lambda * x + (1.0 - self.lambda) * self.current
        } else {
            x
        };
        self.initialized = true;
        Ok(self.current)
    }
}

/// Smoothing factor of N/100, clamped to [0.01, 1].
pub fn ewma_lambda_from_workers(workers: usize) -> Result<f64> {
    if workers < 1 {
        return Err(invalid("workers", "must be at least 1"));
    }
    Ok((workers as f64 / 100.0).clamp(0.01, 1.0))
}

/// Deterministic ChaCha8 generator addressed by a seed plus a stream id.
///
/// Independent streams (per worker, per iteration, per purpose) are derived
/// with [`SeededRng::stream`] so results never depend on call interleaving.
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Generator for the stream identified by `parts` under `seed`.
    pub fn stream(seed: u64, parts: &[u64]) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        let id = parts.iter().fold(0x6a09_e667_f3bc_c908_u64, |acc, &p| {
            splitmix64(acc ^ splitmix64(p))
        });
        inner.set_stream(id);
        Self { seed, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    /// `len` standard-normal draws as a gradient.
    pub fn normal_gradient(&mut self, len: usize) -> GradientVector {
        GradientVector::new((0..len).map(|_| self.normal() as f32).collect())
    }
}

impl RngCore for SeededRng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
