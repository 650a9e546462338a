//! Per-worker error-feedback residuals.

use crate::compress::SparseGradient;
use crate::error::{GravacError, Result};
use crate::grad::GradientVector;

/// Gradient mass that was not transmitted, carried into the next iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualStore {
    residual: GradientVector,
}

impl ResidualStore {
    pub fn new(len: usize) -> Self {
        Self {
            residual: GradientVector::zeros(len),
        }
    }

    pub fn like(g: &GradientVector) -> Self {
        Self {
            residual: g.zeros_like(),
        }
    }

    pub fn residual(&self) -> &GradientVector {
        &self.residual
    }

    pub fn is_zero(&self) -> bool {
        self.residual.values().iter().all(|&v| v == 0.0)
    }

    /// `g_raw + residual`; the store is left untouched.
    pub fn apply_feedback(&self, g_raw: &GradientVector) -> Result<GradientVector> {
        g_raw.ensure_len(self.residual.len())?;
        let mut out = g_raw.clone();
        for (o, &r) in out.values_mut().iter_mut().zip(self.residual.values()) {
            *o += r;
        }
        Ok(out)
    }

    /// Sets the residual to `g_ef − decompress(sent)`.
    pub fn update(&mut self, g_ef: &GradientVector, sent: &SparseGradient) -> Result<()> {
        g_ef.ensure_len(self.residual.len())?;
        if sent.original_length() != g_ef.len() {
            return Err(GravacError::LengthMismatch {
                expected: g_ef.len(),
                actual: sent.original_length(),
            });
        }
        self.residual.values_mut().copy_from_slice(g_ef.values());
        let r = self.residual.values_mut();
        for (&i, &v) in sent.indices().iter().zip(sent.values()) {
            r[i as usize] -= v;
        }
        Ok(())
    }

    pub fn clear(&mut self) {
        self.residual.values_mut().fill(0.0);
    }
}
