//! The adaptive compression controller.
//!
//! Each iteration compresses the error-fed gradient to `θ_min`, compresses
//! that result further by `θ_s` to reach the candidate CF, smooths both gains
//! and sends the most compressed message whose gain clears `ε` (falling back
//! to dense). Every `window` iterations the candidate is scaled up by the
//! policy, `θ_min` may be escalated, and the controller freezes on an ideal CF
//! once the two best compression throughputs are within `ω` of each other.

use serde::{Deserialize, Serialize};

use crate::compress::{aggregate, mean_dense, Compressor, SparseGradient};
use crate::costmodel::{
    dense_message_words, iteration_time, sparse_message_words, CostModelParams,
};
use crate::error::{invalid, GravacError, Result};
use crate::feedback::ResidualStore;
use crate::grad::{ewma_lambda_from_workers, GradientVector, SeededRng};
use crate::metrics::{raw_compression_gain, GainTracker, ThroughputTable};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScalingPolicy {
    /// Step factors 2^1, 2^2, 2^4, 2^8, ... relative to the initial θ_min.
    Exponential,
    /// Step factors 2^1, 2^2, 2^3, ... relative to the initial θ_min.
    Geometric,
}

impl std::str::FromStr for ScalingPolicy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "exponential" => Ok(Self::Exponential),
            "geometric" => Ok(Self::Geometric),
            other => Err(format!(
                "unknown policy `{other}` (expected exponential|geometric)"
            )),
        }
    }
}

impl std::fmt::Display for ScalingPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Exponential => "exponential",
            Self::Geometric => "geometric",
        })
    }
}

/// Scale factor θ_s relative to the initial θ_min after `step` policy steps,
/// capped so that `θ_s·θ_min ≤ θ_max`.
pub fn scaling_policy(policy: ScalingPolicy, step: u32, theta_min: f64, theta_max: f64) -> f64 {
    let factor = match (policy, step) {
        (_, 0) => 1.0,
        (ScalingPolicy::Exponential, k) if k <= 10 => 2f64.powi(1 << (k - 1)),
        (ScalingPolicy::Geometric, k) if k <= 1023 => 2f64.powi(k as i32),
        _ => f64::INFINITY,
    };
    factor.min(theta_max / theta_min)
}

/// Candidate CF after `step` policy steps.
pub fn policy_cf(policy: ScalingPolicy, step: u32, theta_min: f64, theta_max: f64) -> f64 {
    let s = scaling_policy(policy, step, theta_min, theta_max);
    if s == theta_max / theta_min {
        theta_max
    } else {
        theta_min * s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerConfig {
    pub theta_min: f64,
    pub theta_max: f64,
    pub epsilon: f64,
    pub omega: f64,
    pub window: u64,
    pub policy: ScalingPolicy,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            theta_min: 10.0,
            theta_max: 1000.0,
            epsilon: 0.9,
            omega: 0.01,
            window: 50,
            policy: ScalingPolicy::Exponential,
        }
    }
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.theta_min.is_finite() && self.theta_min >= 1.0) {
            return Err(invalid(
                "controller.theta_min",
                format!("{} must be >= 1", self.theta_min),
            ));
        }
        if !(self.theta_max.is_finite() && self.theta_max >= self.theta_min) {
            return Err(invalid(
                "controller.theta_max",
                format!("{} must be >= theta_min", self.theta_max),
            ));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(invalid("controller.epsilon", "epsilon out of (0,1)"));
        }
        if !(self.omega > 0.0 && self.omega < 1.0) {
            return Err(invalid("controller.omega", "omega out of (0,1)"));
        }
        if self.window < 1 {
            return Err(invalid("controller.window", "must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CfChoice {
    Candidate,
    Minimum,
    Dense,
}

/// Branch choice: candidate if `δ_c ≥ ε`, else minimum if `δ_min ≥ ε`, else dense.
pub fn select_cf(gain_c: f64, gain_min: f64, epsilon: f64) -> CfChoice {
    if gain_c >= epsilon {
        CfChoice::Candidate
    } else if gain_min >= epsilon {
        CfChoice::Minimum
    } else {
        CfChoice::Dense
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CfDecision {
    pub choice: CfChoice,
    /// CF of the transmitted message (1 for dense).
    pub cf: f64,
    /// Gain attributed to the transmitted message (1 for dense).
    pub gain: f64,
    pub gain_min: f64,
    pub gain_c: f64,
}

/// Outcome of a saturation check that froze the candidate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Saturation {
    pub ideal_cf: f64,
    pub peak_cf: f64,
    pub peak: f64,
    pub runner_up: f64,
    /// The chosen CF is above the CF holding the peak throughput.
    pub ideal_above_peak: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowEvent {
    pub iteration: u64,
    pub candidate_before: f64,
    pub candidate_after: f64,
    pub theta_min_before: f64,
    pub theta_min_after: f64,
    pub saturation: Option<Saturation>,
}

/// Per-iteration result of [`Controller::run_iteration`].
#[derive(Debug, Clone)]
pub struct IterationOutcome {
    pub aggregate: GradientVector,
    pub decision: CfDecision,
    pub t_compute: f64,
    pub t_compress: f64,
    pub t_sync: f64,
    pub t_iter: f64,
    pub system_throughput: f64,
    pub compression_throughput: f64,
    /// Value floats in one worker's message.
    pub floats_sent: u64,
    /// 32-bit words in one worker's message.
    pub words_sent: u64,
    pub window_event: Option<WindowEvent>,
}

#[derive(Debug, Clone)]
pub struct Controller {
    config: ControllerConfig,
    workers: usize,
    batch: usize,
    theta_min: f64,
    candidate: f64,
    step: u32,
    frozen: Option<Saturation>,
    gains: GainTracker,
    table: ThroughputTable,
    gain_min: Option<f64>,
    gain_c: Option<f64>,
}

impl Controller {
    pub fn new(config: ControllerConfig, workers: usize, batch: usize) -> Result<Self> {
        config.validate()?;
        if batch < 1 {
            return Err(invalid("task.batch", "must be >= 1"));
        }
        let lambda = ewma_lambda_from_workers(workers)?;
        Ok(Self {
            theta_min: config.theta_min,
            candidate: config.theta_min,
            config,
            workers,
            batch,
            step: 0,
            frozen: None,
            gains: GainTracker::new(lambda)?,
            table: ThroughputTable::new(),
            gain_min: None,
            gain_c: None,
        })
    }

    pub fn config(&self) -> &ControllerConfig {
        &self.config
    }

    pub fn theta_min(&self) -> f64 {
        self.theta_min
    }

    pub fn candidate_cf(&self) -> f64 {
        self.candidate
    }

    pub fn theta_s(&self) -> f64 {
        self.candidate / self.theta_min
    }

    pub fn policy_step(&self) -> u32 {
        self.step
    }

    pub fn saturation(&self) -> Option<&Saturation> {
        self.frozen.as_ref()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen.is_some()
    }

    pub fn table(&self) -> &ThroughputTable {
        &self.table
    }

    pub fn table_mut(&mut self) -> &mut ThroughputTable {
        &mut self.table
    }

    pub fn smoothed_gains(&self) -> Option<(f64, f64)> {
        Some((self.gain_min?, self.gain_c?))
    }

    /// Folds raw per-iteration gains of θ_min and the candidate into their
    /// trackers and returns the smoothed `(δ_min, δ_c)`.
    pub fn observe_gains(&mut self, raw_min: f64, raw_c: f64) -> Result<(f64, f64)> {
        let gain_min = self.gains.observe(self.theta_min, raw_min)?;
        let gain_c = if self.candidate == self.theta_min {
            gain_min
        } else {
            self.gains.observe(self.candidate, raw_c)?
        };
        self.gain_min = Some(gain_min);
        self.gain_c = Some(gain_c);
        Ok((gain_min, gain_c))
    }

    pub fn decide(&self, gain_min: f64, gain_c: f64) -> CfDecision {
        let choice = select_cf(gain_c, gain_min, self.config.epsilon);
        let (cf, gain) = match choice {
            CfChoice::Candidate => (self.candidate, gain_c),
            CfChoice::Minimum => (self.theta_min, gain_min),
            CfChoice::Dense => (1.0, 1.0),
        };
        CfDecision {
            choice,
            cf,
            gain,
            gain_min,
            gain_c,
        }
    }

    /// Records throughput for the CF that was sent. Returns `(T_sys, T_compress)`.
    pub fn update_step(&mut self, decision: &CfDecision, t_iter: f64) -> Result<(f64, f64)> {
        self.table
            .update_step(decision.cf, decision.gain, t_iter, self.workers, self.batch)
    }

    /// Window-boundary evaluation; a no-op unless `iteration % window == 0`
    /// and the controller has not frozen yet.
    pub fn check_gravac(&mut self, iteration: u64) -> Option<WindowEvent> {
        if iteration == 0 || !iteration.is_multiple_of(self.config.window) || self.frozen.is_some()
        {
            return None;
        }
        let cfg = &self.config;
        let candidate_before = self.candidate;
        let theta_min_before = self.theta_min;

        self.step = self.step.saturating_add(1);
        let mut candidate = policy_cf(cfg.policy, self.step, cfg.theta_min, cfg.theta_max);

        if let (Some(gain_min), Some(gain_c)) = (self.gain_min, self.gain_c) {
            if gain_min > 0.0 && cfg.omega >= (gain_min - gain_c).abs() / gain_min {
                self.theta_min = self.theta_min.max(candidate_before);
            }
        }
        candidate = candidate.max(self.theta_min).min(cfg.theta_max);

        let saturation = self.saturation_check();
        if let Some(sat) = saturation {
            candidate = sat.ideal_cf.max(self.theta_min).min(cfg.theta_max);
            self.frozen = Some(sat);
        }
        self.candidate = candidate;

        Some(WindowEvent {
            iteration,
            candidate_before,
            candidate_after: self.candidate,
            theta_min_before,
            theta_min_after: self.theta_min,
            saturation,
        })
    }

    /// Compares the two largest compression throughputs; within `ω`, the CF
    /// holding the runner-up value is ideal.
    fn saturation_check(&self) -> Option<Saturation> {
        if self.table.len() < 2 {
            return None;
        }
        let mut entries: Vec<(f64, f64)> = self.table.compression_entries().collect();
        // Descending throughput; equal throughputs favour the lower CF.
        entries.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.total_cmp(&b.0)));
        let (peak_cf, peak) = entries[0];
        let (ideal_cf, runner_up) = entries[1];
        if runner_up > 0.0 && ((peak - runner_up) / runner_up).abs() <= self.config.omega {
            Some(Saturation {
                ideal_cf,
                peak_cf,
                peak,
                runner_up,
                ideal_above_peak: ideal_cf > peak_cf,
            })
        } else {
            None
        }
    }

    /// One synchronous iteration across all workers: error feedback, two-level
    /// compression, gain smoothing, branch selection, residual update,
    /// aggregation, timing, throughput bookkeeping and the window check.
    ///
    /// The per-iteration raw gains are averaged over workers before smoothing
    /// so that every worker takes the same branch.
    pub fn run_iteration(
        &mut self,
        iteration: u64,
        raw: &[GradientVector],
        residuals: &mut [ResidualStore],
        compressor: &Compressor,
        cost: &CostModelParams,
        rngs: &mut [SeededRng],
    ) -> Result<IterationOutcome> {
        let workers = raw.len();
        if workers == 0 || residuals.len() != workers || rngs.len() != workers {
            return Err(invalid(
                "workers",
                "need one gradient, residual and rng per worker",
            ));
        }
        let len = raw[0].len();
        let step = self.theta_s();

        let mut fed = Vec::with_capacity(workers);
        let mut minimum = Vec::with_capacity(workers);
        let mut candidate = Vec::with_capacity(workers);
        let (mut sum_min, mut sum_c, mut t_compress) = (0.0, 0.0, 0.0f64);
        for w in 0..workers {
            let g_ef = residuals[w].apply_feedback(&raw[w])?;
            let (g_min, t_min) = compressor.compress(&g_ef, self.theta_min, &mut rngs[w], cost)?;
            let (g_c, t_c) = compressor.compress_further(&g_min, step, &mut rngs[w], cost)?;
            sum_min += gain_or_unit(raw_compression_gain(&g_min, &g_ef))?;
            sum_c += gain_or_unit(raw_compression_gain(&g_c, &g_ef))?;
            t_compress = t_compress.max(t_min + t_c);
            fed.push(g_ef);
            minimum.push(g_min);
            candidate.push(g_c);
        }
        let n = workers as f64;
        let (gain_min, gain_c) = self.observe_gains(sum_min / n, sum_c / n)?;
        let decision = self.decide(gain_min, gain_c);

        let (aggregate, floats, words) = match decision.choice {
            CfChoice::Candidate => sync_sparse(&fed, &candidate, residuals)?,
            CfChoice::Minimum => sync_sparse(&fed, &minimum, residuals)?,
            CfChoice::Dense => {
                residuals.iter_mut().for_each(ResidualStore::clear);
                (mean_dense(&fed)?, len, dense_message_words(len))
            }
        };
        let t_compress = if decision.choice == CfChoice::Dense {
            0.0
        } else {
            t_compress
        };
        let t_sync = cost.allreduce_time(words);
        let t_iter = iteration_time(decision.choice, cost.compute_time, t_compress, t_sync);
        let (system_throughput, compression_throughput) = self.update_step(&decision, t_iter)?;
        let window_event = self.check_gravac(iteration);

        Ok(IterationOutcome {
            aggregate,
            decision,
            t_compute: cost.compute_time,
            t_compress,
            t_sync,
            t_iter,
            system_throughput,
            compression_throughput,
            floats_sent: floats as u64,
            words_sent: words as u64,
            window_event,
        })
    }
}

fn gain_or_unit(gain: Result<f64>) -> Result<f64> {
    match gain {
        // Nothing to lose on a vanished gradient.
        Err(GravacError::ZeroNorm) => Ok(1.0),
        other => other.map(|g| g.min(1.0)),
    }
}

fn sync_sparse(
    fed: &[GradientVector],
    sent: &[SparseGradient],
    residuals: &mut [ResidualStore],
) -> Result<(GradientVector, usize, usize)> {
    for ((store, g_ef), s) in residuals.iter_mut().zip(fed).zip(sent) {
        store.update(g_ef, s)?;
    }
    let floats = sent[0].nnz();
    Ok((aggregate(sent)?, floats, sparse_message_words(&sent[0])))
}
