//! Simulated data-parallel training with N in-process workers.

mod optim;
mod task;

pub use optim::{OptimizerConfig, OptimizerState};
pub use task::{Evaluation, QuadraticBowl, SyntheticMlp, Task, TaskKind, TaskSpec};

use serde::{Deserialize, Serialize};

use crate::compress::{aggregate, mean_dense, Compressor, SparseGradient};
use crate::config::RunConfig;
use crate::controller::{CfChoice, Controller, Saturation, WindowEvent};
use crate::costmodel::{dense_message_words, sparse_message_words};
use crate::error::{GravacError, Result};
use crate::feedback::ResidualStore;
use crate::grad::{GradientVector, SeededRng};
use crate::metrics::compression_gain;

const STREAM_COMPRESS: u64 = 0xc0de;

/// Training loss above this multiple of the first loss aborts the run.
pub const DIVERGENCE_FACTOR: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "cf", rename_all = "kebab-case")]
pub enum Mode {
    Gravac,
    StaticCf(f64),
    Dense,
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "gravac" => Ok(Self::Gravac),
            "dense" => Ok(Self::Dense),
            other => match other.strip_prefix("static-cf:") {
                Some(cf) => match cf.parse::<f64>() {
                    Ok(c) if c >= 1.0 && c.is_finite() => Ok(Self::StaticCf(c)),
                    _ => Err(format!("invalid compression factor `{cf}` (need >= 1)")),
                },
                None => Err(format!(
                    "unknown mode `{other}` (expected gravac|dense|static-cf:<cf>)"
                )),
            },
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Gravac => f.write_str("gravac"),
            Self::Dense => f.write_str("dense"),
            Self::StaticCf(c) => write!(f, "static-cf:{c}"),
        }
    }
}

/// One line of `trace.jsonl`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iter: u64,
    pub cf: f64,
    pub gain_min: f64,
    pub gain_c: f64,
    pub t_o: f64,
    pub t_compress: f64,
    pub t_s: f64,
    pub t_iter: f64,
    pub tsys: f64,
    pub tcomp: f64,
    pub loss: f64,
    pub floats_sent: u64,
    pub words_sent: u64,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub trace: Vec<TraceRecord>,
    pub events: Vec<WindowEvent>,
    pub weights: Vec<f32>,
    pub evaluation: Evaluation,
    pub param_count: usize,
    /// Final θ_min and candidate CF; `None` outside GraVAC mode.
    pub theta_min: Option<f64>,
    pub candidate_cf: Option<f64>,
    pub saturation: Option<Saturation>,
}

struct Step {
    aggregate: GradientVector,
    record: TraceRecord,
}

/// Runs `config.iterations` synchronous iterations on `config.cost.workers` workers.
pub fn run_training(config: &RunConfig) -> Result<RunResult> {
    config.validate()?;
    let task = Task::build(&config.task)?;
    let workers = config.cost.workers;
    let len = task.param_count();
    let mut opt = OptimizerState::new(config.optimizer.clone(), task.initial_weights())?;
    let mut residuals = vec![ResidualStore::new(len); workers];
    let compressor = Compressor {
        kind: config.compressor.kind(),
        layerwise: config.compressor.layerwise,
    };
    let mut controller = match config.mode {
        Mode::Gravac => Some(Controller::new(
            config.controller.clone(),
            workers,
            config.task.batch,
        )?),
        _ => None,
    };

    let mut trace = Vec::with_capacity(config.iterations as usize);
    let mut events = Vec::new();
    let mut initial_loss = None;
    for iter in 1..=config.iterations {
        let mut raw = Vec::with_capacity(workers);
        let mut loss = 0.0;
        for w in 0..workers {
            let (g, l) = task.local_gradient(opt.weights(), w, iter);
            raw.push(g);
            loss += l;
        }
        loss /= workers as f64;
        let first = *initial_loss.get_or_insert(loss);
        if !loss.is_finite() || loss > DIVERGENCE_FACTOR * first.max(f64::MIN_POSITIVE) {
            return Err(GravacError::Divergence {
                iteration: iter,
                loss,
                limit: DIVERGENCE_FACTOR * first,
            });
        }
        let mut rngs: Vec<SeededRng> = (0..workers)
            .map(|w| SeededRng::stream(config.seed, &[STREAM_COMPRESS, iter, w as u64]))
            .collect();

        let step = match (&mut controller, config.mode) {
            (Some(ctl), _) => {
                let out = ctl.run_iteration(
                    iter,
                    &raw,
                    &mut residuals,
                    &compressor,
                    &config.cost,
                    &mut rngs,
                )?;
                if let Some(ev) = out.window_event.clone() {
                    events.push(ev);
                }
                Step {
                    aggregate: out.aggregate,
                    record: TraceRecord {
                        iter,
                        cf: out.decision.cf,
                        gain_min: out.decision.gain_min,
                        gain_c: out.decision.gain_c,
                        t_o: out.t_compute,
                        t_compress: out.t_compress,
                        t_s: out.t_sync,
                        t_iter: out.t_iter,
                        tsys: out.system_throughput,
                        tcomp: out.compression_throughput,
                        loss,
                        floats_sent: out.floats_sent,
                        words_sent: out.words_sent,
                    },
                }
            }
            (None, Mode::StaticCf(cf)) => static_step(
                config,
                &compressor,
                cf,
                &raw,
                &mut residuals,
                &mut rngs,
                iter,
                loss,
            )?,
            (None, _) => dense_step(config, &raw, iter, loss)?,
        };
        opt.sgd_update(&step.aggregate, iter)?;
        trace.push(step.record);
    }

    let evaluation = task.evaluate(opt.weights());
    Ok(RunResult {
        trace,
        events,
        evaluation,
        param_count: len,
        theta_min: controller.as_ref().map(Controller::theta_min),
        candidate_cf: controller.as_ref().map(Controller::candidate_cf),
        saturation: controller.as_ref().and_then(|c| c.saturation().cloned()),
        weights: opt.into_weights(),
    })
}

fn throughput(config: &RunConfig, t_iter: f64) -> f64 {
    (config.cost.workers * config.task.batch) as f64 / t_iter
}

fn dense_step(config: &RunConfig, raw: &[GradientVector], iter: u64, loss: f64) -> Result<Step> {
    let len = raw[0].len();
    let words = dense_message_words(len);
    let t_s = config.cost.allreduce_time(words);
    let t_iter = config.cost.compute_time + t_s;
    let tsys = throughput(config, t_iter);
    Ok(Step {
        aggregate: mean_dense(raw)?,
        record: TraceRecord {
            iter,
            cf: 1.0,
            gain_min: 1.0,
            gain_c: 1.0,
            t_o: config.cost.compute_time,
            t_compress: 0.0,
            t_s,
            t_iter,
            tsys,
            tcomp: tsys,
            loss,
            floats_sent: len as u64,
            words_sent: words as u64,
        },
    })
}

#[allow(clippy::too_many_arguments)]
fn static_step(
    config: &RunConfig,
    compressor: &Compressor,
    cf: f64,
    raw: &[GradientVector],
    residuals: &mut [ResidualStore],
    rngs: &mut [SeededRng],
    iter: u64,
    loss: f64,
) -> Result<Step> {
    let feedback = config.compressor.error_feedback;
    let mut sent: Vec<SparseGradient> = Vec::with_capacity(raw.len());
    let (mut gain, mut t_compress) = (0.0, 0.0f64);
    for (w, g) in raw.iter().enumerate() {
        let g_ef = if feedback {
            residuals[w].apply_feedback(g)?
        } else {
            g.clone()
        };
        let (s, t) = compressor.compress(&g_ef, cf, &mut rngs[w], &config.cost)?;
        gain += match compression_gain(&s, &g_ef) {
            Err(GravacError::ZeroNorm) => 1.0,
            other => other?,
        };
        t_compress = t_compress.max(t);
        if feedback {
            residuals[w].update(&g_ef, &s)?;
        }
        sent.push(s);
    }
    gain /= raw.len() as f64;
    let words = sparse_message_words(&sent[0]);
    let t_s = config.cost.allreduce_time(words);
    let t_iter = crate::costmodel::iteration_time(
        CfChoice::Minimum,
        config.cost.compute_time,
        t_compress,
        t_s,
    );
    let tsys = throughput(config, t_iter);
    Ok(Step {
        aggregate: aggregate(&sent)?,
        record: TraceRecord {
            iter,
            cf,
            gain_min: gain,
            gain_c: gain,
            t_o: config.cost.compute_time,
            t_compress,
            t_s,
            t_iter,
            tsys,
            tcomp: tsys * gain,
            loss,
            floats_sent: sent[0].nnz() as u64,
            words_sent: words as u64,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::CompressorName;

    #[allow(clippy::field_reassign_with_default)]
    fn quadratic(mode: Mode, workers: usize, iterations: u64) -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.mode = mode;
        cfg.iterations = iterations;
        cfg.cost.workers = workers;
        cfg.task.kind = TaskKind::Quadratic;
        cfg.task.params = 200;
        cfg.task.noise = 0.0;
        cfg.optimizer = OptimizerConfig {
            lr: 0.5,
            momentum: 0.0,
            weight_decay: 0.0,
            ..OptimizerConfig::default()
        };
        cfg
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("gravac".parse::<Mode>(), Ok(Mode::Gravac));
        assert_eq!("static-cf:10".parse::<Mode>(), Ok(Mode::StaticCf(10.0)));
        assert!("static-cf:0.5".parse::<Mode>().is_err());
        assert!("sparse".parse::<Mode>().is_err());
        assert_eq!(Mode::StaticCf(10.0).to_string(), "static-cf:10");
    }

    #[test]
    fn dense_matches_closed_form_decay() {
        let cfg = quadratic(Mode::Dense, 2, 20);
        let result = run_training(&cfg).unwrap();
        let Task::Quadratic(q) = Task::build(&cfg.task).unwrap() else {
            unreachable!()
        };
        // Plain GD on a diagonal bowl: w_t − w* = (1 − ηc)^t (w_0 − w*).
        for (i, &w) in result.weights.iter().enumerate() {
            let expected = q.optimum[i] * (1.0 - (1.0 - 0.5 * q.curvature[i]).powi(20));
            assert!((f64::from(w) - expected).abs() < 1e-4, "coord {i}");
        }
        assert!(result
            .trace
            .iter()
            .all(|r| r.cf == 1.0 && r.floats_sent == 200));
    }

    #[test]
    fn unit_cf_equals_dense() {
        let dense = run_training(&quadratic(Mode::Dense, 3, 15)).unwrap();
        let static1 = run_training(&quadratic(Mode::StaticCf(1.0), 3, 15)).unwrap();
        assert_eq!(dense.weights, static1.weights);
    }

    #[test]
    fn worker_count_consistency_without_noise() {
        let one = run_training(&quadratic(Mode::Dense, 1, 10)).unwrap();
        let four = run_training(&quadratic(Mode::Dense, 4, 10)).unwrap();
        for (a, b) in one.weights.iter().zip(&four.weights) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn gravac_is_deterministic() {
        let mut cfg = quadratic(Mode::Gravac, 2, 60);
        cfg.controller.window = 10;
        cfg.compressor.name = CompressorName::RandomK;
        let a = run_training(&cfg).unwrap();
        let b = run_training(&cfg).unwrap();
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.weights, b.weights);
        assert_eq!(a.events.len(), 6);
    }

    #[test]
    fn divergence_is_reported() {
        let mut cfg = quadratic(Mode::Dense, 1, 200);
        cfg.task.curvature_min = 10.0;
        cfg.task.curvature_max = 10.0;
        cfg.optimizer.lr = 1.0;
        match run_training(&cfg) {
            Err(GravacError::Divergence { iteration, .. }) => assert!(iteration > 1),
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
