//! Compression gain, system throughput and compression throughput.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::compress::SparseGradient;
use crate::error::{invalid, GravacError, Result};
use crate::grad::{EwmaTracker, GradientVector};

/// A compression factor usable as an ordered map key.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Cf(pub f64);

impl Eq for Cf {}

impl PartialOrd for Cf {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Cf {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

impl std::fmt::Display for Cf {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Unclamped energy ratio `||g_c||² / ||g_ef||²`.
pub fn raw_compression_gain(g_c: &SparseGradient, g_ef: &GradientVector) -> Result<f64> {
    if g_c.original_length() != g_ef.len() {
        return Err(GravacError::LengthMismatch {
            expected: g_ef.len(),
            actual: g_c.original_length(),
        });
    }
    let denom = g_ef.squared_norm()?;
    if denom == 0.0 {
        return Err(GravacError::ZeroNorm);
    }
    Ok(g_c.squared_norm() / denom)
}

/// Gain clamped to at most 1.
pub fn compression_gain(g_c: &SparseGradient, g_ef: &GradientVector) -> Result<f64> {
    Ok(raw_compression_gain(g_c, g_ef)?.min(1.0))
}

/// Smoothed gain per compression factor. CF 1 is always exactly 1.
#[derive(Debug, Clone)]
pub struct GainTracker {
    lambda: f64,
    per_cf: BTreeMap<Cf, EwmaTracker>,
}

impl GainTracker {
    pub fn new(lambda: f64) -> Result<Self> {
        EwmaTracker::new(lambda)?;
        Ok(Self {
            lambda,
            per_cf: BTreeMap::new(),
        })
    }

    /// Folds a raw gain into the tracker for `cf` and returns the smoothed value.
    pub fn observe(&mut self, cf: f64, gain: f64) -> Result<f64> {
        if cf == 1.0 {
            return Ok(1.0);
        }
        let tracker = match self.per_cf.entry(Cf(cf)) {
            std::collections::btree_map::Entry::Occupied(e) => e.into_mut(),
            std::collections::btree_map::Entry::Vacant(e) => {
                e.insert(EwmaTracker::new(self.lambda)?)
            }
        };
        // Gains live in (0, 1]; a fully vanished message still reads as a tiny gain.
        tracker.update(gain.clamp(f64::MIN_POSITIVE, 1.0))
    }

    pub fn get(&self, cf: f64) -> Option<f64> {
        if cf == 1.0 {
            return Some(1.0);
        }
        self.per_cf.get(&Cf(cf)).and_then(|t| t.value().ok())
    }
}

/// Latest system and compression throughput per compression factor.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ThroughputTable {
    system: BTreeMap<Cf, f64>,
    compression: BTreeMap<Cf, f64>,
    last_system: Option<f64>,
}

impl ThroughputTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records `T_sys = N·b / t_iter` and `T_compress[cf] = T_sys·gain`.
    /// Returns `(T_sys, T_compress)`.
    pub fn update_step(
        &mut self,
        cf: f64,
        gain: f64,
        t_iter: f64,
        workers: usize,
        batch: usize,
    ) -> Result<(f64, f64)> {
        if !(t_iter.is_finite() && t_iter > 0.0) {
            return Err(invalid("t_iter", format!("{t_iter} must be > 0")));
        }
        if !(gain > 0.0 && gain <= 1.0) {
            return Err(invalid("gain", format!("{gain} not in (0, 1]")));
        }
        if cf.is_nan() || cf < 1.0 {
            return Err(GravacError::InvalidCompressionFactor(cf));
        }
        let t_sys = (workers * batch) as f64 / t_iter;
        let t_comp = t_sys * gain;
        self.system.insert(Cf(cf), t_sys);
        self.compression.insert(Cf(cf), t_comp);
        self.last_system = Some(t_sys);
        Ok((t_sys, t_comp))
    }

    pub fn system(&self, cf: f64) -> Option<f64> {
        self.system.get(&Cf(cf)).copied()
    }

    pub fn compression(&self, cf: f64) -> Option<f64> {
        self.compression.get(&Cf(cf)).copied()
    }

    pub fn last_system(&self) -> Option<f64> {
        self.last_system
    }

    pub fn len(&self) -> usize {
        self.compression.len()
    }

    pub fn is_empty(&self) -> bool {
        self.compression.is_empty()
    }

    /// `(cf, T_compress)` pairs in ascending CF order.
    pub fn compression_entries(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.compression.iter().map(|(cf, &t)| (cf.0, t))
    }

    pub fn set_compression(&mut self, cf: f64, value: f64) {
        self.compression.insert(Cf(cf), value);
    }
}

/// `T_N / (N · T_1)`.
pub fn scaling_efficiency(throughput_n: f64, throughput_1: f64, workers: usize) -> Result<f64> {
    if throughput_1.is_nan() || throughput_1 <= 0.0 {
        return Err(invalid("throughput_1", "must be > 0"));
    }
    if workers < 1 {
        return Err(invalid("workers", "must be at least 1"));
    }
    Ok(throughput_n / (workers as f64 * throughput_1))
}
