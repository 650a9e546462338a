//! Run configuration and its flat `key = value` file format.
//!
//! Lines are `dotted.key = value`; `#` starts a comment. Unknown keys are
//! rejected. Unset keys keep their defaults.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::compress::{CompressorKind, DEFAULT_DGC_SAMPLE_FRACTION, DEFAULT_REDSYNC_MAX_ROUNDS};
use crate::controller::ControllerConfig;
use crate::costmodel::{CostModelParams, LatencyCoefficients};
use crate::error::{GravacError, Result};
use crate::kde::{DEFAULT_BANDWIDTH, DEFAULT_GRID_POINTS};
use crate::sim::{Mode, OptimizerConfig, TaskSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CompressorName {
    TopK,
    Dgc,
    Redsync,
    RandomK,
}

impl FromStr for CompressorName {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "topk" => Ok(Self::TopK),
            "dgc" => Ok(Self::Dgc),
            "redsync" => Ok(Self::Redsync),
            "randomk" => Ok(Self::RandomK),
            other => Err(format!(
                "unknown compressor `{other}` (expected topk|dgc|redsync|randomk)"
            )),
        }
    }
}

impl std::fmt::Display for CompressorName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::TopK => "topk",
            Self::Dgc => "dgc",
            Self::Redsync => "redsync",
            Self::RandomK => "randomk",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressorConfig {
    pub name: CompressorName,
    pub dgc_sample_fraction: f64,
    pub redsync_max_rounds: u32,
    /// Allocate the budget per layer instead of over the flat vector.
    pub layerwise: bool,
    /// Static-CF runs only; GraVAC always carries residuals.
    pub error_feedback: bool,
}

impl Default for CompressorConfig {
    fn default() -> Self {
        Self {
            name: CompressorName::TopK,
            dgc_sample_fraction: DEFAULT_DGC_SAMPLE_FRACTION,
            redsync_max_rounds: DEFAULT_REDSYNC_MAX_ROUNDS,
            layerwise: false,
            error_feedback: true,
        }
    }
}

impl CompressorConfig {
    pub fn kind(&self) -> CompressorKind {
        match self.name {
            CompressorName::TopK => CompressorKind::TopK,
            CompressorName::Dgc => CompressorKind::Dgc {
                sample_fraction: self.dgc_sample_fraction,
            },
            CompressorName::Redsync => CompressorKind::Redsync {
                max_rounds: self.redsync_max_rounds,
            },
            CompressorName::RandomK => CompressorKind::RandomK,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportConfig {
    pub kde_bandwidth: f64,
    pub kde_points: usize,
    /// Simulated time of a reference run; enables the speedup field.
    pub baseline_time: Option<f64>,
    /// Loss threshold used for time-to-target comparisons.
    pub target_loss: Option<f64>,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self {
            kde_bandwidth: DEFAULT_BANDWIDTH,
            kde_points: DEFAULT_GRID_POINTS,
            baseline_time: None,
            target_loss: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub iterations: u64,
    pub mode: Mode,
    pub output: PathBuf,
    pub task: TaskSpec,
    pub optimizer: OptimizerConfig,
    pub controller: ControllerConfig,
    pub cost: CostModelParams,
    pub compressor: CompressorConfig,
    pub report: ReportConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            iterations: 3000,
            mode: Mode::Gravac,
            output: PathBuf::from("runs/latest"),
            task: TaskSpec::default(),
            optimizer: OptimizerConfig::default(),
            controller: ControllerConfig::default(),
            cost: CostModelParams::default(),
            compressor: CompressorConfig::default(),
            report: ReportConfig::default(),
        }
    }
}

/// Every accepted key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "master seed for compressor randomness"),
    ("iterations", "number of synchronous iterations"),
    ("mode", "gravac | dense | static-cf:<cf>"),
    ("output", "directory receiving trace and reports"),
    ("task.kind", "quadratic | mlp"),
    ("task.batch", "per-worker batch size"),
    (
        "task.data_seed",
        "seed for data, targets and initial weights",
    ),
    ("task.params", "quadratic: parameter count"),
    (
        "task.curvature_min",
        "quadratic: smallest curvature (log-uniform)",
    ),
    ("task.curvature_max", "quadratic: largest curvature"),
    ("task.noise", "quadratic: per-sample gradient noise std"),
    (
        "task.widths",
        "mlp: comma-separated layer widths, input first",
    ),
    ("task.separation", "mlp: cluster centre scale"),
    (
        "task.feature_spread",
        "mlp: decades spanned by input feature scales",
    ),
    ("task.test_samples", "mlp: held-out evaluation set size"),
    ("optimizer.lr", "learning rate"),
    ("optimizer.momentum", "momentum coefficient in [0,1)"),
    ("optimizer.weight_decay", "L2 weight decay"),
    (
        "optimizer.lr_milestones",
        "comma-separated iterations after which the rate drops (empty = never)",
    ),
    (
        "optimizer.lr_decay_factor",
        "learning-rate multiplier per drop",
    ),
    ("controller.theta_min", "smallest compression factor"),
    ("controller.theta_max", "largest compression factor"),
    (
        "controller.epsilon",
        "minimum acceptable compression gain, in (0,1)",
    ),
    (
        "controller.omega",
        "relative tolerance for escalation and saturation",
    ),
    ("controller.window", "iterations per candidate evaluation"),
    ("controller.policy", "exponential | geometric"),
    ("cost.alpha", "per-message latency (s)"),
    ("cost.beta", "transfer time per 32-bit word (s)"),
    ("cost.workers", "number of workers"),
    ("cost.topology", "ring | tree"),
    (
        "cost.compute_time",
        "modeled compute time per iteration (s)",
    ),
    ("cost.latency.topk.c0", "topk fixed latency (s)"),
    ("cost.latency.topk.c1", "topk per-input-entry latency (s)"),
    ("cost.latency.topk.c2", "topk per k·log2 k latency (s)"),
    ("cost.latency.dgc.c0", "dgc fixed latency (s)"),
    ("cost.latency.dgc.c1", "dgc per-input-entry latency (s)"),
    ("cost.latency.dgc.c2", "dgc per k·log2 k latency (s)"),
    ("cost.latency.redsync.c0", "redsync fixed latency (s)"),
    (
        "cost.latency.redsync.c1",
        "redsync per-input-entry latency (s)",
    ),
    (
        "cost.latency.redsync.c2",
        "redsync per k·log2 k latency (s)",
    ),
    ("cost.latency.randomk.c0", "randomk fixed latency (s)"),
    (
        "cost.latency.randomk.c1",
        "randomk per-input-entry latency (s)",
    ),
    (
        "cost.latency.randomk.c2",
        "randomk per k·log2 k latency (s)",
    ),
    ("compressor.kind", "topk | dgc | redsync | randomk"),
    (
        "compressor.dgc_sample_fraction",
        "dgc: fraction of entries sampled for the threshold",
    ),
    (
        "compressor.redsync_max_rounds",
        "redsync: threshold bisection rounds",
    ),
    (
        "compressor.layerwise",
        "compress each layer separately (true | false)",
    ),
    (
        "compressor.error_feedback",
        "static-cf: carry residuals (true | false)",
    ),
    (
        "report.kde_bandwidth",
        "KDE bandwidth on the log10(CF) axis",
    ),
    ("report.kde_points", "KDE grid points"),
    (
        "report.baseline_time",
        "simulated time of a baseline run (empty = none)",
    ),
    (
        "report.target_loss",
        "loss target for time-to-target (empty = none)",
    ),
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.parse::<T>().map_err(|e| GravacError::Config {
        key: key.to_string(),
        message: format!("cannot parse `{value}`: {e}"),
    })
}

fn parse_optional(key: &str, value: &str) -> Result<Option<f64>> {
    if value.is_empty() || value == "none" {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

fn join<T: ToString>(items: &[T]) -> String {
    items
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

fn fmt_optional(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl RunConfig {
    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        if let Some(rest) = key.strip_prefix("cost.latency.") {
            return self.set_latency(key, rest, value);
        }
        match key {
            "seed" => self.seed = parse(key, value)?,
            "iterations" => self.iterations = parse(key, value)?,
            "mode" => self.mode = parse(key, value)?,
            "output" => self.output = PathBuf::from(value),
            "task.kind" => self.task.kind = parse(key, value)?,
            "task.batch" => self.task.batch = parse(key, value)?,
            "task.data_seed" => self.task.data_seed = parse(key, value)?,
            "task.params" => self.task.params = parse(key, value)?,
            "task.curvature_min" => self.task.curvature_min = parse(key, value)?,
            "task.curvature_max" => self.task.curvature_max = parse(key, value)?,
            "task.noise" => self.task.noise = parse(key, value)?,
            "task.widths" => {
                self.task.widths = value
                    .split(',')
                    .map(|w| parse(key, w.trim()))
                    .collect::<Result<_>>()?
            }
            "task.separation" => self.task.separation = parse(key, value)?,
            "task.feature_spread" => self.task.feature_spread = parse(key, value)?,
            "task.test_samples" => self.task.test_samples = parse(key, value)?,
            "optimizer.lr" => self.optimizer.lr = parse(key, value)?,
            "optimizer.momentum" => self.optimizer.momentum = parse(key, value)?,
            "optimizer.weight_decay" => self.optimizer.weight_decay = parse(key, value)?,
            "optimizer.lr_milestones" => {
                self.optimizer.lr_milestones = value
                    .split(',')
                    .map(str::trim)
                    .filter(|m| !m.is_empty())
                    .map(|m| parse(key, m))
                    .collect::<Result<_>>()?
            }
            "optimizer.lr_decay_factor" => self.optimizer.lr_decay_factor = parse(key, value)?,
            "controller.theta_min" => self.controller.theta_min = parse(key, value)?,
            "controller.theta_max" => self.controller.theta_max = parse(key, value)?,
            "controller.epsilon" => self.controller.epsilon = parse(key, value)?,
            "controller.omega" => self.controller.omega = parse(key, value)?,
            "controller.window" => self.controller.window = parse(key, value)?,
            "controller.policy" => self.controller.policy = parse(key, value)?,
            "cost.alpha" => self.cost.alpha = parse(key, value)?,
            "cost.beta" => self.cost.beta = parse(key, value)?,
            "cost.workers" => self.cost.workers = parse(key, value)?,
            "cost.topology" => self.cost.topology = parse(key, value)?,
            "cost.compute_time" => self.cost.compute_time = parse(key, value)?,
            "compressor.kind" => self.compressor.name = parse(key, value)?,
            "compressor.dgc_sample_fraction" => {
                self.compressor.dgc_sample_fraction = parse(key, value)?
            }
            "compressor.redsync_max_rounds" => {
                self.compressor.redsync_max_rounds = parse(key, value)?
            }
            "compressor.layerwise" => self.compressor.layerwise = parse(key, value)?,
            "compressor.error_feedback" => self.compressor.error_feedback = parse(key, value)?,
            "report.kde_bandwidth" => self.report.kde_bandwidth = parse(key, value)?,
            "report.kde_points" => self.report.kde_points = parse(key, value)?,
            "report.baseline_time" => self.report.baseline_time = parse_optional(key, value)?,
            "report.target_loss" => self.report.target_loss = parse_optional(key, value)?,
            _ => {
                return Err(GravacError::Config {
                    key: key.to_string(),
                    message: "unknown key".into(),
                })
            }
        }
        Ok(())
    }

    fn latency_slot(&mut self, name: &str) -> Option<&mut LatencyCoefficients> {
        let l = &mut self.cost.latency;
        match name {
            "topk" => Some(&mut l.topk),
            "dgc" => Some(&mut l.dgc),
            "redsync" => Some(&mut l.redsync),
            "randomk" => Some(&mut l.randomk),
            _ => None,
        }
    }

    fn set_latency(&mut self, key: &str, rest: &str, value: &str) -> Result<()> {
        let unknown = || GravacError::Config {
            key: key.to_string(),
            message: "unknown key".into(),
        };
        let (name, coef) = rest.split_once('.').ok_or_else(unknown)?;
        let v: f64 = parse(key, value)?;
        let slot = self.latency_slot(name).ok_or_else(unknown)?;
        match coef {
            "c0" => slot.c0 = v,
            "c1" => slot.c1 = v,
            "c2" => slot.c2 = v,
            _ => return Err(unknown()),
        }
        Ok(())
    }

    /// All keys with their current values, in `KEYS` order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let l = &self.cost.latency;
        let mut out = vec![
            ("seed", self.seed.to_string()),
            ("iterations", self.iterations.to_string()),
            ("mode", self.mode.to_string()),
            ("output", self.output.display().to_string()),
            ("task.kind", self.task.kind.to_string()),
            ("task.batch", self.task.batch.to_string()),
            ("task.data_seed", self.task.data_seed.to_string()),
            ("task.params", self.task.params.to_string()),
            ("task.curvature_min", self.task.curvature_min.to_string()),
            ("task.curvature_max", self.task.curvature_max.to_string()),
            ("task.noise", self.task.noise.to_string()),
            ("task.widths", join(&self.task.widths)),
            ("task.separation", self.task.separation.to_string()),
            ("task.feature_spread", self.task.feature_spread.to_string()),
            ("task.test_samples", self.task.test_samples.to_string()),
            ("optimizer.lr", self.optimizer.lr.to_string()),
            ("optimizer.momentum", self.optimizer.momentum.to_string()),
            (
                "optimizer.weight_decay",
                self.optimizer.weight_decay.to_string(),
            ),
            (
                "optimizer.lr_milestones",
                join(&self.optimizer.lr_milestones),
            ),
            (
                "optimizer.lr_decay_factor",
                self.optimizer.lr_decay_factor.to_string(),
            ),
            (
                "controller.theta_min",
                self.controller.theta_min.to_string(),
            ),
            (
                "controller.theta_max",
                self.controller.theta_max.to_string(),
            ),
            ("controller.epsilon", self.controller.epsilon.to_string()),
            ("controller.omega", self.controller.omega.to_string()),
            ("controller.window", self.controller.window.to_string()),
            ("controller.policy", self.controller.policy.to_string()),
            ("cost.alpha", self.cost.alpha.to_string()),
            ("cost.beta", self.cost.beta.to_string()),
            ("cost.workers", self.cost.workers.to_string()),
            ("cost.topology", self.cost.topology.to_string()),
            ("cost.compute_time", self.cost.compute_time.to_string()),
        ];
        let latency_keys = KEYS.iter().filter(|(k, _)| k.starts_with("cost.latency."));
        let coeffs = [l.topk, l.dgc, l.redsync, l.randomk]
            .into_iter()
            .flat_map(|c| [c.c0, c.c1, c.c2]);
        out.extend(
            latency_keys
                .zip(coeffs)
                .map(|((k, _), v)| (*k, v.to_string())),
        );
        out.extend([
            ("compressor.kind", self.compressor.name.to_string()),
            (
                "compressor.dgc_sample_fraction",
                self.compressor.dgc_sample_fraction.to_string(),
            ),
            (
                "compressor.redsync_max_rounds",
                self.compressor.redsync_max_rounds.to_string(),
            ),
            (
                "compressor.layerwise",
                self.compressor.layerwise.to_string(),
            ),
            (
                "compressor.error_feedback",
                self.compressor.error_feedback.to_string(),
            ),
            (
                "report.kde_bandwidth",
                self.report.kde_bandwidth.to_string(),
            ),
            ("report.kde_points", self.report.kde_points.to_string()),
            (
                "report.baseline_time",
                fmt_optional(self.report.baseline_time),
            ),
            ("report.target_loss", fmt_optional(self.report.target_loss)),
        ]);
        out
    }

    /// Config file text that parses back to `self`.
    pub fn serialize(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// Applies the assignments in `text` on top of `self`.
    pub fn apply_str(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| GravacError::Config {
                key: format!("line {}", n + 1),
                message: format!("expected `key = value`, got `{line}`"),
            })?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    /// Defaults overlaid with `text`, then validated.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::parse_str(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let checks = [
            self.task.validate(),
            self.optimizer.validate(),
            self.controller.validate(),
            self.cost.validate(),
            self.compressor.kind().validate(),
        ];
        for check in checks {
            check.map_err(to_config_error)?;
        }
        if self.iterations < 1 {
            return Err(config_error("iterations", "must be >= 1"));
        }
        if let Mode::StaticCf(c) = self.mode {
            if !(c >= 1.0 && c.is_finite()) {
                return Err(config_error(
                    "mode",
                    format!("static-cf needs cf >= 1, got {c}"),
                ));
            }
        }
        if !(self.report.kde_bandwidth > 0.0 && self.report.kde_bandwidth.is_finite()) {
            return Err(config_error("report.kde_bandwidth", "must be > 0"));
        }
        if self.report.kde_points < 2 {
            return Err(config_error("report.kde_points", "must be >= 2"));
        }
        Ok(())
    }

    /// Reference listing of every key with its default and description.
    pub fn reference() -> String {
        let defaults = Self::default().entries();
        let mut s =
            String::from("# gravac configuration reference: `key = value`, one per line.\n");
        for ((key, doc), (_, default)) in KEYS.iter().zip(defaults) {
            let _ = writeln!(s, "\n# {doc}\n{key} = {default}");
        }
        s
    }
}

fn config_error(key: &str, message: impl Into<String>) -> GravacError {
    GravacError::Config {
        key: key.to_string(),
        message: message.into(),
    }
}

fn to_config_error(e: GravacError) -> GravacError {
    match e {
        GravacError::InvalidParameter { name, message } => config_error(name, message),
        other => other,
    }
}
