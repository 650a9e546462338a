//! Run orchestration, trace persistence and reports.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{GravacError, Result};
use crate::kde::{
    cf_histogram, cf_usage_samples, default_grid, gaussian_kde, histogram_csv, kde_csv,
};
use crate::sim::{run_training, RunResult, TraceRecord};

pub const TRACE_FILE: &str = "trace.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const EVENTS_FILE: &str = "events.jsonl";
pub const CONFIG_FILE: &str = "config.txt";
pub const KDE_FILE: &str = "kde.csv";
pub const HISTOGRAM_FILE: &str = "histogram.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mode: String,
    pub compressor: String,
    pub iterations: u64,
    pub workers: usize,
    pub param_count: usize,
    /// Held-out loss after the last update.
    pub final_loss: f64,
    pub final_accuracy: Option<f64>,
    /// Mini-batch loss of the last iteration.
    pub final_train_loss: f64,
    pub total_floats_sent: u64,
    pub total_words_sent: u64,
    /// Dense volume over the same iterations divided by the volume sent.
    pub comm_reduction: f64,
    pub comm_reduction_words: f64,
    pub total_time: f64,
    pub speedup: Option<f64>,
    pub distinct_cfs: usize,
    pub theta_min: Option<f64>,
    pub candidate_cf: Option<f64>,
    pub ideal_cf: Option<f64>,
    /// Set when the selected CF is larger than the throughput peak.
    pub ideal_above_peak: Option<bool>,
    pub window_events: usize,
}

impl Summary {
    pub fn from_run(config: &RunConfig, run: &RunResult) -> Self {
        let trace = &run.trace;
        let total_floats: u64 = trace.iter().map(|r| r.floats_sent).sum();
        let total_words: u64 = trace.iter().map(|r| r.words_sent).sum();
        let dense = trace.len() as f64 * run.param_count as f64;
        let total_time: f64 = trace.iter().map(|r| r.t_iter).sum();
        let mut cfs: Vec<f64> = trace.iter().map(|r| r.cf).collect();
        cfs.sort_by(f64::total_cmp);
        cfs.dedup();
        Self {
            mode: config.mode.to_string(),
            compressor: config.compressor.name.to_string(),
            iterations: trace.len() as u64,
            workers: config.cost.workers,
            param_count: run.param_count,
            final_loss: run.evaluation.loss,
            final_accuracy: run.evaluation.accuracy,
            final_train_loss: trace.last().map_or(f64::NAN, |r| r.loss),
            total_floats_sent: total_floats,
            total_words_sent: total_words,
            comm_reduction: dense / total_floats as f64,
            comm_reduction_words: dense / total_words as f64,
            total_time,
            speedup: config.report.baseline_time.map(|b| b / total_time),
            distinct_cfs: cfs.len(),
            theta_min: run.theta_min,
            candidate_cf: run.candidate_cf,
            ideal_cf: run.saturation.as_ref().map(|s| s.ideal_cf),
            ideal_above_peak: run.saturation.as_ref().map(|s| s.ideal_above_peak),
            window_events: run.events.len(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub result: RunResult,
    pub summary: Summary,
}

/// Trains per `config` and writes every report into `config.output`.
pub fn run_experiment(config: &RunConfig) -> Result<RunOutput> {
    let result = run_training(config)?;
    let summary = Summary::from_run(config, &result);
    let dir = &config.output;
    fs::create_dir_all(dir)?;
    write_trace(&dir.join(TRACE_FILE), &result.trace)?;
    write_jsonl(&dir.join(EVENTS_FILE), &result.events)?;
    fs::write(
        dir.join(SUMMARY_FILE),
        serde_json::to_string_pretty(&summary)? + "\n",
    )?;
    fs::write(dir.join(CONFIG_FILE), config.serialize())?;
    let (kde, hist) = kde_report(
        &result.trace,
        config.report.kde_bandwidth,
        config.report.kde_points,
        config.controller.theta_max,
    )?;
    fs::write(dir.join(KDE_FILE), kde)?;
    fs::write(dir.join(HISTOGRAM_FILE), hist)?;
    Ok(RunOutput { result, summary })
}

/// KDE and histogram CSV text for the CFs used in `trace`.
pub fn kde_report(
    trace: &[TraceRecord],
    bandwidth: f64,
    points: usize,
    theta_max: f64,
) -> Result<(String, String)> {
    let hist = cf_histogram(trace)?;
    let samples = cf_usage_samples(trace)?;
    let top = trace.iter().map(|r| r.cf).fold(theta_max, f64::max);
    let grid = default_grid(top, bandwidth, points);
    let density = gaussian_kde(&samples, bandwidth, &grid)?;
    Ok((kde_csv(&grid, &density), histogram_csv(&hist)))
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    for row in rows {
        serde_json::to_writer(&mut out, row)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_trace(path: &Path, trace: &[TraceRecord]) -> Result<()> {
    write_jsonl(path, trace)
}

/// Reads a JSON-lines trace; every record must carry the full field set.
pub fn read_trace(path: &Path) -> Result<Vec<TraceRecord>> {
    let file = fs::File::open(path)?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TraceRecord = serde_json::from_str(&line)
            .map_err(|e| GravacError::Trace(format!("{}:{}: {e}", path.display(), n + 1)))?;
        out.push(rec);
    }
    if out.is_empty() {
        return Err(GravacError::Trace(format!(
            "{}: empty trace",
            path.display()
        )));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub target_loss: Option<f64>,
    pub reached_a: bool,
    pub reached_b: bool,
    /// Simulated time until the target (or the end of the run).
    pub time_a: f64,
    pub time_b: f64,
    pub time_ratio: f64,
    pub floats_ratio: f64,
    pub words_ratio: f64,
    pub final_loss_a: f64,
    pub final_loss_b: f64,
    pub final_loss_delta: f64,
}

struct Reach {
    reached: bool,
    time: f64,
    floats: u64,
    words: u64,
}

fn reach(trace: &[TraceRecord], target: Option<f64>) -> Reach {
    let mut r = Reach {
        reached: target.is_none(),
        time: 0.0,
        floats: 0,
        words: 0,
    };
    for rec in trace {
        r.time += rec.t_iter;
        r.floats += rec.floats_sent;
        r.words += rec.words_sent;
        if target.is_some_and(|t| rec.loss <= t) {
            r.reached = true;
            break;
        }
    }
    r
}

/// Ratios `a / b` of time-to-target and of volume sent up to that point.
pub fn compare_runs(
    a: &[TraceRecord],
    b: &[TraceRecord],
    target: Option<f64>,
) -> Result<Comparison> {
    let (Some(last_a), Some(last_b)) = (a.last(), b.last()) else {
        return Err(GravacError::Trace("cannot compare an empty trace".into()));
    };
    if let Some(t) = target {
        if !t.is_finite() {
            return Err(GravacError::Trace(format!("target loss {t} is not finite")));
        }
    }
    let (ra, rb) = (reach(a, target), reach(b, target));
    Ok(Comparison {
        target_loss: target,
        reached_a: ra.reached,
        reached_b: rb.reached,
        time_a: ra.time,
        time_b: rb.time,
        time_ratio: ra.time / rb.time,
        floats_ratio: ra.floats as f64 / rb.floats as f64,
        words_ratio: ra.words as f64 / rb.words as f64,
        final_loss_a: last_a.loss,
        final_loss_b: last_b.loss,
        final_loss_delta: last_a.loss - last_b.loss,
    })
}
