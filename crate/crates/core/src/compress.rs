//! Sparsifying compressors over flat gradients.
//!
//! Every compressor keeps exactly `k = max(1, floor(M / cf))` entries. Ties in
//! magnitude are broken towards the lower index so that selections are
//! reproducible.

use std::cmp::Ordering;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::costmodel::CostModelParams;
use crate::error::{invalid, GravacError, Result};
use crate::grad::{GradientVector, SeededRng};

/// Smallest sample the DGC threshold estimate draws.
pub const DGC_MIN_SAMPLE: usize = 256;
pub const DEFAULT_DGC_SAMPLE_FRACTION: f64 = 0.01;
pub const DEFAULT_REDSYNC_MAX_ROUNDS: u32 = 20;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum CompressorKind {
    TopK,
    /// Threshold estimated from a uniform sample of the gradient.
    Dgc {
        sample_fraction: f64,
    },
    /// Threshold bisection followed by mean-magnitude value substitution.
    Redsync {
        max_rounds: u32,
    },
    RandomK,
}

impl CompressorKind {
    pub fn dgc() -> Self {
        Self::Dgc {
            sample_fraction: DEFAULT_DGC_SAMPLE_FRACTION,
        }
    }

    pub fn redsync() -> Self {
        Self::Redsync {
            max_rounds: DEFAULT_REDSYNC_MAX_ROUNDS,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::TopK => "topk",
            Self::Dgc { .. } => "dgc",
            Self::Redsync { .. } => "redsync",
            Self::RandomK => "randomk",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::Dgc { sample_fraction } if !(sample_fraction > 0.0 && sample_fraction <= 1.0) => {
                Err(invalid(
                    "compressor.dgc_sample_fraction",
                    format!("{sample_fraction} not in (0, 1]"),
                ))
            }
            Self::Redsync { max_rounds: 0 } => {
                Err(invalid("compressor.redsync_max_rounds", "must be >= 1"))
            }
            _ => Ok(()),
        }
    }

    /// Positions (ascending) and transmitted values of the `k` retained entries.
    pub fn select(&self, values: &[f32], k: usize, rng: &mut SeededRng) -> (Vec<usize>, Vec<f32>) {
        let n = values.len();
        let k = k.clamp(1, n.max(1));
        let positions = if k >= n {
            (0..n).collect()
        } else {
            match *self {
                Self::TopK => top_k_positions(values, k),
                Self::RandomK => {
                    let mut picked = index::sample(rng, n, k).into_vec();
                    picked.sort_unstable();
                    picked
                }
                Self::Dgc { sample_fraction } => dgc_positions(values, k, sample_fraction, rng),
                Self::Redsync { max_rounds } => {
                    let threshold = redsync_threshold(values, k, max_rounds);
                    threshold_positions(values, k, threshold)
                }
            }
        };
        let sent = match self {
            Self::Redsync { .. } if k < n => substitute_mean_magnitude(values, &positions),
            _ => positions.iter().map(|&i| values[i]).collect(),
        };
        (positions, sent)
    }
}

impl std::str::FromStr for CompressorKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "topk" => Ok(Self::TopK),
            "dgc" => Ok(Self::dgc()),
            "redsync" => Ok(Self::redsync()),
            "randomk" => Ok(Self::RandomK),
            other => Err(format!(
                "unknown compressor `{other}` (expected topk|dgc|redsync|randomk)"
            )),
        }
    }
}

/// A gradient in (index, value) form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseGradient {
    indices: Vec<u32>,
    values: Vec<f32>,
    original_length: usize,
    layer_offsets: Vec<usize>,
}

impl SparseGradient {
    pub fn new(indices: Vec<u32>, values: Vec<f32>, original_length: usize) -> Result<Self> {
        let s = Self {
            indices,
            values,
            original_length,
            layer_offsets: vec![0],
        };
        s.validate()?;
        Ok(s)
    }

    fn validate(&self) -> Result<()> {
        if self.indices.len() != self.values.len() {
            return Err(GravacError::InvalidSparse(format!(
                "{} indices but {} values",
                self.indices.len(),
                self.values.len()
            )));
        }
        if self.values.is_empty() {
            return Err(GravacError::InvalidSparse("empty support".into()));
        }
        if self.indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(GravacError::InvalidSparse(
                "indices must be strictly increasing".into(),
            ));
        }
        if self
            .indices
            .last()
            .is_some_and(|&i| i as usize >= self.original_length)
        {
            return Err(GravacError::InvalidSparse(format!(
                "index out of range for length {}",
                self.original_length
            )));
        }
        Ok(())
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn original_length(&self) -> usize {
        self.original_length
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn achieved_cf(&self) -> f64 {
        self.original_length as f64 / self.values.len() as f64
    }

    pub fn squared_norm(&self) -> f64 {
        self.values.iter().map(|&v| f64::from(v).powi(2)).sum()
    }

    /// Dense vector with the retained values in place and zeros elsewhere.
    pub fn decompress(&self) -> GradientVector {
        let mut dense = vec![0.0f32; self.original_length];
        for (&i, &v) in self.indices.iter().zip(&self.values) {
            dense[i as usize] = v;
        }
        GradientVector::with_layers(dense, self.layer_offsets.clone())
            .unwrap_or_else(|_| unreachable!("layout validated at construction"))
    }
}

pub fn decompress(s: &SparseGradient) -> GradientVector {
    s.decompress()
}

/// `max(1, floor(len / cf))`.
pub fn retained_count(len: usize, cf: f64) -> Result<usize> {
    if !(cf.is_finite() && cf >= 1.0) {
        return Err(GravacError::InvalidCompressionFactor(cf));
    }
    Ok(((len as f64 / cf).floor() as usize).clamp(1, len.max(1)))
}

/// Compresses `g` to factor `cf` with `kind`.
pub fn compress(
    kind: &CompressorKind,
    g: &GradientVector,
    cf: f64,
    rng: &mut SeededRng,
) -> Result<SparseGradient> {
    if g.is_empty() {
        return Err(GravacError::EmptyGradient);
    }
    let k = retained_count(g.len(), cf)?;
    let (positions, sent) = kind.select(g.values(), k, rng);
    Ok(SparseGradient {
        indices: positions.into_iter().map(|p| p as u32).collect(),
        values: sent,
        original_length: g.len(),
        layer_offsets: g.layer_offsets().to_vec(),
    })
}

/// Compresses each layer independently to factor `cf`.
///
/// Support size is `Σ max(1, floor(len_l / cf))` rather than the whole-vector
/// count.
pub fn compress_layerwise(
    kind: &CompressorKind,
    g: &GradientVector,
    cf: f64,
    rng: &mut SeededRng,
) -> Result<SparseGradient> {
    if g.is_empty() {
        return Err(GravacError::EmptyGradient);
    }
    let mut indices = Vec::new();
    let mut values = Vec::new();
    for range in g.layer_ranges() {
        let layer = &g.values()[range.clone()];
        let k = retained_count(layer.len(), cf)?;
        let (positions, sent) = kind.select(layer, k, rng);
        indices.extend(positions.into_iter().map(|p| (p + range.start) as u32));
        values.extend(sent);
    }
    Ok(SparseGradient {
        indices,
        values,
        original_length: g.len(),
        layer_offsets: g.layer_offsets().to_vec(),
    })
}

/// Applies the compressor again to the retained entries of `s`, keeping
/// `max(1, floor(k / step))` of them. Indices stay in the original space.
pub fn compress_further(
    kind: &CompressorKind,
    s: &SparseGradient,
    step: f64,
    rng: &mut SeededRng,
) -> Result<SparseGradient> {
    let k = retained_count(s.nnz(), step)?;
    if k == s.nnz() {
        return Ok(s.clone());
    }
    let (positions, sent) = kind.select(&s.values, k, rng);
    Ok(SparseGradient {
        indices: positions.iter().map(|&p| s.indices[p]).collect(),
        values: sent,
        original_length: s.original_length,
        layer_offsets: s.layer_offsets.clone(),
    })
}

/// Element-wise mean of the densified parts, reduced in slice order.
pub fn aggregate(parts: &[SparseGradient]) -> Result<GradientVector> {
    let first = parts
        .first()
        .ok_or_else(|| invalid("parts", "need at least one worker"))?;
    let len = first.original_length;
    let mut acc = vec![0.0f64; len];
    for part in parts {
        if part.original_length != len {
            return Err(GravacError::LengthMismatch {
                expected: len,
                actual: part.original_length,
            });
        }
        for (&i, &v) in part.indices.iter().zip(&part.values) {
            acc[i as usize] += f64::from(v);
        }
    }
    finish_mean(acc, parts.len(), first.layer_offsets.clone())
}

/// Element-wise mean of dense gradients with the same reduction order as
/// [`aggregate`], so a full-support sparse round equals the dense one bit-for-bit.
pub fn mean_dense(parts: &[GradientVector]) -> Result<GradientVector> {
    let first = parts
        .first()
        .ok_or_else(|| invalid("parts", "need at least one worker"))?;
    let len = first.len();
    let mut acc = vec![0.0f64; len];
    for part in parts {
        part.ensure_len(len)?;
        for (a, &v) in acc.iter_mut().zip(part.values()) {
            *a += f64::from(v);
        }
    }
    finish_mean(acc, parts.len(), first.layer_offsets().to_vec())
}

fn finish_mean(acc: Vec<f64>, count: usize, offsets: Vec<usize>) -> Result<GradientVector> {
    let n = count as f64;
    GradientVector::with_layers(acc.into_iter().map(|a| (a / n) as f32).collect(), offsets)
}

/// A compressor bound to its modeled latency.
#[derive(Debug, Clone, PartialEq)]
pub struct Compressor {
    pub kind: CompressorKind,
    pub layerwise: bool,
}

impl Compressor {
    pub fn new(kind: CompressorKind) -> Self {
        Self {
            kind,
            layerwise: false,
        }
    }

    /// Compresses `g` to `cf`, returning the message and its modeled latency.
    pub fn compress(
        &self,
        g: &GradientVector,
        cf: f64,
        rng: &mut SeededRng,
        cost: &CostModelParams,
    ) -> Result<(SparseGradient, f64)> {
        let s = if self.layerwise {
            compress_layerwise(&self.kind, g, cf, rng)?
        } else {
            compress(&self.kind, g, cf, rng)?
        };
        let t = cost.compression_time(&self.kind, g.len(), s.nnz());
        Ok((s, t))
    }

    /// Multi-level step; latency scales with the already-reduced input.
    pub fn compress_further(
        &self,
        s: &SparseGradient,
        step: f64,
        rng: &mut SeededRng,
        cost: &CostModelParams,
    ) -> Result<(SparseGradient, f64)> {
        let out = compress_further(&self.kind, s, step, rng)?;
        let t = if out.nnz() == s.nnz() {
            0.0
        } else {
            cost.compression_time(&self.kind, s.nnz(), out.nnz())
        };
        Ok((out, t))
    }
}

/// Descending magnitude, then ascending index.
fn magnitude_order(values: &[f32], a: usize, b: usize) -> Ordering {
    values[b]
        .abs()
        .total_cmp(&values[a].abs())
        .then_with(|| a.cmp(&b))
}

fn top_k_positions(values: &[f32], k: usize) -> Vec<usize> {
    let mut all: Vec<usize> = (0..values.len()).collect();
    top_k_of(values, &mut all, k)
}

/// The `k` best positions among `candidates` in magnitude order, sorted ascending.
fn top_k_of(values: &[f32], candidates: &mut Vec<usize>, k: usize) -> Vec<usize> {
    if k < candidates.len() {
        candidates.select_nth_unstable_by(k - 1, |&a, &b| magnitude_order(values, a, b));
        candidates.truncate(k);
    }
    let mut picked = std::mem::take(candidates);
    picked.sort_unstable();
    picked
}

/// Keeps every entry at or above `threshold`, then truncates or pads to
/// exactly `k` in magnitude order.
fn threshold_positions(values: &[f32], k: usize, threshold: f32) -> Vec<usize> {
    let (mut above, mut below): (Vec<usize>, Vec<usize>) =
        (0..values.len()).partition(|&i| values[i].abs() >= threshold);
    match above.len().cmp(&k) {
        Ordering::Equal => above,
        Ordering::Greater => top_k_of(values, &mut above, k),
        Ordering::Less => {
            let need = k - above.len();
            let mut picked = top_k_of(values, &mut below, need);
            picked.extend(above);
            picked.sort_unstable();
            picked
        }
    }
}

fn dgc_positions(
    values: &[f32],
    k: usize,
    sample_fraction: f64,
    rng: &mut SeededRng,
) -> Vec<usize> {
    let n = values.len();
    let sample_len = ((sample_fraction * n as f64).ceil() as usize)
        .max(DGC_MIN_SAMPLE.min(n))
        .min(n);
    let mut sample: Vec<f32> = index::sample(rng, n, sample_len)
        .into_iter()
        .map(|i| values[i].abs())
        .collect();
    sample.sort_unstable_by(|a, b| b.total_cmp(a));
    let rank = ((k as f64 * sample_len as f64 / n as f64).round() as usize).clamp(1, sample_len);
    threshold_positions(values, k, sample[rank - 1])
}

/// Bisects between mean |v| and max |v| for a threshold whose support brackets `k`.
fn redsync_threshold(values: &[f32], k: usize, max_rounds: u32) -> f32 {
    let count_above = |t: f32| values.iter().filter(|v| v.abs() >= t).count();
    let sum: f64 = values.iter().map(|v| f64::from(v.abs())).sum();
    let mut lo = (sum / values.len() as f64) as f32;
    let mut hi = values.iter().map(|v| v.abs()).fold(0.0f32, f32::max);
    if count_above(lo) <= k {
        return lo;
    }
    for _ in 0..max_rounds {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        match count_above(mid).cmp(&k) {
            Ordering::Equal => return mid,
            Ordering::Greater => lo = mid,
            Ordering::Less => hi = mid,
        }
    }
    hi
}

fn substitute_mean_magnitude(values: &[f32], positions: &[usize]) -> Vec<f32> {
    let mean = positions
        .iter()
        .map(|&i| f64::from(values[i].abs()))
        .sum::<f64>()
        / positions.len().max(1) as f64;
    let mean = mean as f32;
    positions
        .iter()
        .map(|&i| {
            let v = values[i];
            if v == 0.0 {
                0.0
            } else {
                mean.copysign(v)
            }
        })
        .collect()
}
