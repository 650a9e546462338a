//! Desk-scale training tasks with hand-written gradients.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::grad::{GradientVector, SeededRng};

const STREAM_SETUP: u64 = 0x7a5c;
const STREAM_INIT: u64 = 0x1417;
const STREAM_TEST: u64 = 0x7e57;
const STREAM_BATCH: u64 = 0xba7c;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    /// `0.5·Σ c_i (w_i − w*_i)²` with additive Gaussian gradient noise.
    Quadratic,
    /// ReLU MLP on Gaussian-blob binary classification.
    Mlp,
}

impl std::str::FromStr for TaskKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "quadratic" => Ok(Self::Quadratic),
            "mlp" => Ok(Self::Mlp),
            other => Err(format!("unknown task `{other}` (expected quadratic|mlp)")),
        }
    }
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Quadratic => "quadratic",
            Self::Mlp => "mlp",
        })
    }
}

/// Task description. Fields not used by the selected kind are ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// Per-worker batch size.
    pub batch: usize,
    pub data_seed: u64,
    /// Quadratic: parameter count.
    pub params: usize,
    pub curvature_min: f64,
    pub curvature_max: f64,
    /// Quadratic: per-sample gradient noise standard deviation.
    pub noise: f64,
    /// MLP layer widths, input first.
    pub widths: Vec<usize>,
    /// MLP: scale of the cluster centres.
    pub separation: f64,
    /// MLP: input feature scales are log-uniform over this many decades.
    pub feature_spread: f64,
    pub test_samples: usize,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            kind: TaskKind::Mlp,
            batch: 32,
            data_seed: 1,
            params: 1000,
            curvature_min: 0.1,
            curvature_max: 1.0,
            noise: 0.0,
            widths: vec![32, 64, 32, 2],
            separation: 5.0,
            feature_spread: 4.0,
            test_samples: 2000,
        }
    }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.batch < 1 {
            return Err(invalid("task.batch", "must be >= 1"));
        }
        match self.kind {
            TaskKind::Quadratic => {
                if self.params < 1 {
                    return Err(invalid("task.params", "must be >= 1"));
                }
                if !(self.curvature_min > 0.0 && self.curvature_max >= self.curvature_min) {
                    return Err(invalid(
                        "task.curvature_min",
                        "need 0 < curvature_min <= curvature_max",
                    ));
                }
                if !(self.noise >= 0.0 && self.noise.is_finite()) {
                    return Err(invalid("task.noise", "must be >= 0"));
                }
            }
            TaskKind::Mlp => {
                if self.widths.len() < 2 || self.widths.contains(&0) {
                    return Err(invalid("task.widths", "need at least two positive widths"));
                }
                if *self.widths.last().unwrap_or(&0) < 2 {
                    return Err(invalid("task.widths", "output width must be >= 2"));
                }
                if !(self.feature_spread >= 0.0 && self.feature_spread.is_finite()) {
                    return Err(invalid("task.feature_spread", "must be >= 0"));
                }
                if self.test_samples < 1 {
                    return Err(invalid("task.test_samples", "must be >= 1"));
                }
            }
        }
        Ok(())
    }
}

/// Held-out evaluation of the current weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone)]
pub enum Task {
    Quadratic(QuadraticBowl),
    Mlp(SyntheticMlp),
}

impl Task {
    pub fn build(spec: &TaskSpec) -> Result<Self> {
        spec.validate()?;
        Ok(match spec.kind {
            TaskKind::Quadratic => Self::Quadratic(QuadraticBowl::new(spec)),
            TaskKind::Mlp => Self::Mlp(SyntheticMlp::new(spec)),
        })
    }

    pub fn param_count(&self) -> usize {
        match self {
            Self::Quadratic(q) => q.curvature.len(),
            Self::Mlp(m) => m.param_count(),
        }
    }

    pub fn layer_offsets(&self) -> Vec<usize> {
        match self {
            Self::Quadratic(_) => vec![0],
            Self::Mlp(m) => m.layer_offsets(),
        }
    }

    pub fn initial_weights(&self) -> Vec<f32> {
        match self {
            Self::Quadratic(q) => vec![0.0; q.curvature.len()],
            Self::Mlp(m) => m.initial_weights(),
        }
    }

    /// Mean mini-batch gradient and loss for `worker` at `iteration`.
    pub fn local_gradient(
        &self,
        w: &[f32],
        worker: usize,
        iteration: u64,
    ) -> (GradientVector, f64) {
        let (grad, loss) = match self {
            Self::Quadratic(q) => q.gradient(w, worker, iteration),
            Self::Mlp(m) => m.gradient(w, worker, iteration),
        };
        let values = grad.into_iter().map(|v| v as f32).collect();
        let g = GradientVector::with_layers(values, self.layer_offsets())
            .unwrap_or_else(|_| unreachable!("task layouts are valid"));
        (g, loss)
    }

    pub fn evaluate(&self, w: &[f32]) -> Evaluation {
        match self {
            Self::Quadratic(q) => Evaluation {
                loss: q.loss(&to_f64(w)),
                accuracy: None,
            },
            Self::Mlp(m) => m.evaluate(w),
        }
    }
}

fn to_f64(w: &[f32]) -> Vec<f64> {
    w.iter().map(|&v| f64::from(v)).collect()
}

#[derive(Debug, Clone)]
pub struct QuadraticBowl {
    pub curvature: Vec<f64>,
    pub optimum: Vec<f64>,
    noise: f64,
    batch: usize,
    data_seed: u64,
}

impl QuadraticBowl {
    fn new(spec: &TaskSpec) -> Self {
        let mut rng = SeededRng::stream(spec.data_seed, &[STREAM_SETUP]);
        let (lo, hi) = (spec.curvature_min.ln(), spec.curvature_max.ln());
        let curvature = (0..spec.params)
            .map(|_| (lo + (hi - lo) * rng.uniform()).exp())
            .collect();
        let optimum = (0..spec.params).map(|_| rng.normal()).collect();
        Self {
            curvature,
            optimum,
            noise: spec.noise,
            batch: spec.batch,
            data_seed: spec.data_seed,
        }
    }

    pub fn loss(&self, w: &[f64]) -> f64 {
        w.iter()
            .zip(&self.curvature)
            .zip(&self.optimum)
            .map(|((&w, &c), &o)| 0.5 * c * (w - o).powi(2))
            .sum()
    }

    /// Noise-free gradient `c ⊙ (w − w*)`.
    pub fn exact_gradient(&self, w: &[f64]) -> Vec<f64> {
        w.iter()
            .zip(&self.curvature)
            .zip(&self.optimum)
            .map(|((&w, &c), &o)| c * (w - o))
            .collect()
    }

    fn gradient(&self, w: &[f32], worker: usize, iteration: u64) -> (Vec<f64>, f64) {
        let w = to_f64(w);
        let mut g = self.exact_gradient(&w);
        if self.noise > 0.0 {
            let mut rng =
                SeededRng::stream(self.data_seed, &[STREAM_BATCH, worker as u64, iteration]);
            // Mean of `batch` per-sample noises.
            let scale = self.noise / (self.batch as f64).sqrt();
            g.iter_mut().for_each(|v| *v += scale * rng.normal());
        }
        (g, self.loss(&w))
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticMlp {
    widths: Vec<usize>,
    /// `centres[class][cluster]`, two clusters per class.
    centres: Vec<[Vec<f64>; 2]>,
    feature_scale: Vec<f64>,
    batch: usize,
    data_seed: u64,
    test_x: Vec<Vec<f64>>,
    test_y: Vec<usize>,
}

impl SyntheticMlp {
    fn new(spec: &TaskSpec) -> Self {
        let dim = spec.widths[0];
        let classes = *spec.widths.last().unwrap_or(&2);
        let mut rng = SeededRng::stream(spec.data_seed, &[STREAM_SETUP]);
        let scale = spec.separation / (dim as f64).sqrt();
        let mut centre = || (0..dim).map(|_| scale * rng.normal()).collect::<Vec<f64>>();
        let centres = (0..classes).map(|_| [centre(), centre()]).collect();
        let feature_scale = (0..dim)
            .map(|_| 10f64.powf(-spec.feature_spread * rng.uniform()))
            .collect();
        let mut mlp = Self {
            widths: spec.widths.clone(),
            centres,
            feature_scale,
            batch: spec.batch,
            data_seed: spec.data_seed,
            test_x: Vec::new(),
            test_y: Vec::new(),
        };
        let mut test_rng = SeededRng::stream(spec.data_seed, &[STREAM_TEST]);
        let (xs, ys) = mlp.sample(spec.test_samples, &mut test_rng);
        mlp.test_x = xs;
        mlp.test_y = ys;
        mlp
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn param_count(&self) -> usize {
        self.widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// One offset per weight matrix and per bias vector.
    pub fn layer_offsets(&self) -> Vec<usize> {
        let mut offsets = Vec::new();
        let mut at = 0;
        for w in self.widths.windows(2) {
            offsets.push(at);
            at += w[0] * w[1];
            offsets.push(at);
            at += w[1];
        }
        offsets
    }

    fn initial_weights(&self) -> Vec<f32> {
        let mut rng = SeededRng::stream(self.data_seed, &[STREAM_INIT]);
        let mut w = Vec::with_capacity(self.param_count());
        for pair in self.widths.windows(2) {
            let bound = (6.0 / pair[0] as f64).sqrt();
            w.extend((0..pair[0] * pair[1]).map(|_| ((2.0 * rng.uniform() - 1.0) * bound) as f32));
            w.extend(std::iter::repeat_n(0.0f32, pair[1]));
        }
        w
    }

    pub fn sample(&self, n: usize, rng: &mut SeededRng) -> (Vec<Vec<f64>>, Vec<usize>) {
        let classes = self.centres.len();
        let mut xs = Vec::with_capacity(n);
        let mut ys = Vec::with_capacity(n);
        for _ in 0..n {
            let class = rng.below(classes);
            let centre = &self.centres[class][rng.below(2)];
            xs.push(
                centre
                    .iter()
                    .zip(&self.feature_scale)
                    .map(|(&c, &s)| s * (c + rng.normal()))
                    .collect(),
            );
            ys.push(class);
        }
        (xs, ys)
    }

    fn gradient(&self, w: &[f32], worker: usize, iteration: u64) -> (Vec<f64>, f64) {
        let mut rng = SeededRng::stream(self.data_seed, &[STREAM_BATCH, worker as u64, iteration]);
        let (xs, ys) = self.sample(self.batch, &mut rng);
        self.loss_and_gradient(&to_f64(w), &xs, &ys)
    }

    fn evaluate(&self, w: &[f32]) -> Evaluation {
        let w = to_f64(w);
        let mut loss = 0.0;
        let mut correct = 0usize;
        for (x, &y) in self.test_x.iter().zip(&self.test_y) {
            let acts = self.forward(&w, x);
            let logits = acts.last().map(Vec::as_slice).unwrap_or(&[]);
            let (l, _) = softmax_xent(logits, y);
            loss += l;
            let pred = logits
                .iter()
                .enumerate()
                .fold(
                    (0, f64::NEG_INFINITY),
                    |b, (i, &v)| if v > b.1 { (i, v) } else { b },
                )
                .0;
            correct += usize::from(pred == y);
        }
        let n = self.test_y.len() as f64;
        Evaluation {
            loss: loss / n,
            accuracy: Some(correct as f64 / n),
        }
    }

    /// Activations of every layer; hidden layers are post-ReLU, the last is logits.
    fn forward(&self, w: &[f64], x: &[f64]) -> Vec<Vec<f64>> {
        let mut acts = vec![x.to_vec()];
        let mut at = 0;
        let last = self.widths.len() - 2;
        for (l, pair) in self.widths.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let weights = &w[at..at + fan_in * fan_out];
            let bias = &w[at + fan_in * fan_out..at + fan_in * fan_out + fan_out];
            at += fan_in * fan_out + fan_out;
            let input = &acts[l];
            let out: Vec<f64> = (0..fan_out)
                .map(|o| {
                    let row = &weights[o * fan_in..(o + 1) * fan_in];
                    let z = bias[o] + row.iter().zip(input).map(|(a, b)| a * b).sum::<f64>();
                    if l == last {
                        z
                    } else {
                        z.max(0.0)
                    }
                })
                .collect();
            acts.push(out);
        }
        acts
    }

    /// Mean cross-entropy over the batch and its gradient by backpropagation.
    pub fn loss_and_gradient(&self, w: &[f64], xs: &[Vec<f64>], ys: &[usize]) -> (Vec<f64>, f64) {
        let mut grad = vec![0.0; w.len()];
        let mut loss = 0.0;
        let inv_n = 1.0 / xs.len() as f64;
        let starts: Vec<usize> = self
            .widths
            .windows(2)
            .scan(0, |at, p| {
                let s = *at;
                *at += p[0] * p[1] + p[1];
                Some(s)
            })
            .collect();
        for (x, &y) in xs.iter().zip(ys) {
            let acts = self.forward(w, x);
            let (l, mut delta) = softmax_xent(acts.last().map(Vec::as_slice).unwrap_or(&[]), y);
            loss += l;
            for layer in (0..self.widths.len() - 1).rev() {
                let (fan_in, fan_out) = (self.widths[layer], self.widths[layer + 1]);
                let start = starts[layer];
                let input = &acts[layer];
                for o in 0..fan_out {
                    let d = delta[o] * inv_n;
                    if d == 0.0 {
                        continue;
                    }
                    let row = &mut grad[start + o * fan_in..start + (o + 1) * fan_in];
                    for (g, &a) in row.iter_mut().zip(input) {
                        *g += d * a;
                    }
                    grad[start + fan_in * fan_out + o] += d;
                }
                if layer > 0 {
                    let weights = &w[start..start + fan_in * fan_out];
                    let mut prev = vec![0.0; fan_in];
                    for (o, &d) in delta.iter().enumerate() {
                        if d == 0.0 {
                            continue;
                        }
                        for (p, &wt) in prev.iter_mut().zip(&weights[o * fan_in..(o + 1) * fan_in])
                        {
                            *p += wt * d;
                        }
                    }
                    // ReLU derivative from the post-activation value.
                    for (p, &a) in prev.iter_mut().zip(input) {
                        if a <= 0.0 {
                            *p = 0.0;
                        }
                    }
                    delta = prev;
                }
            }
        }
        (grad, loss * inv_n)
    }

    /// Mean loss only; used by finite-difference checks.
    pub fn batch_loss(&self, w: &[f64], xs: &[Vec<f64>], ys: &[usize]) -> f64 {
        xs.iter()
            .zip(ys)
            .map(|(x, &y)| {
                softmax_xent(
                    self.forward(w, x).last().map(Vec::as_slice).unwrap_or(&[]),
                    y,
                )
                .0
            })
            .sum::<f64>()
            / xs.len() as f64
    }
}

/// Loss and `softmax − onehot`.
fn softmax_xent(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = sum.ln() - (logits[label] - max);
    let mut grad: Vec<f64> = exps.iter().map(|e| e / sum).collect();
    grad[label] -= 1.0;
    (loss, grad)
}
