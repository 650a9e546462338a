//! α-β communication cost model and modeled compressor latency.
//!
//! All times are simulated seconds. Nothing in here reads a clock, so every
//! throughput number derived from it is reproducible across machines.

use serde::{Deserialize, Serialize};

use crate::compress::{CompressorKind, SparseGradient};
use crate::controller::CfChoice;
use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Topology {
    Ring,
    Tree,
}

impl std::str::FromStr for Topology {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "ring" => Ok(Self::Ring),
            "tree" => Ok(Self::Tree),
            other => Err(format!("unknown topology `{other}` (expected ring|tree)")),
        }
    }
}

impl std::fmt::Display for Topology {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Ring => "ring",
            Self::Tree => "tree",
        })
    }
}

/// Latency of one compression pass: `c0 + c1·n + c2·k·log2(max(k, 2))`,
/// where `n` is the input length and `k` the retained count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyCoefficients {
    pub c0: f64,
    pub c1: f64,
    pub c2: f64,
}

impl LatencyCoefficients {
    pub const fn new(c0: f64, c1: f64, c2: f64) -> Self {
        Self { c0, c1, c2 }
    }

    pub fn seconds(&self, input_len: usize, retained: usize) -> f64 {
        let k = retained.max(2) as f64;
        self.c0 + self.c1 * input_len as f64 + self.c2 * retained as f64 * k.log2()
    }

    pub fn validate(&self) -> Result<()> {
        if [self.c0, self.c1, self.c2]
            .iter()
            .all(|c| c.is_finite() && *c >= 0.0)
        {
            Ok(())
        } else {
            Err(invalid("latency", "coefficients must be finite and >= 0"))
        }
    }
}

/// Per-compressor latency coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyModel {
    pub topk: LatencyCoefficients,
    pub dgc: LatencyCoefficients,
    pub redsync: LatencyCoefficients,
    pub randomk: LatencyCoefficients,
}

impl Default for LatencyModel {
    fn default() -> Self {
        // Relative ordering follows the measured compressor costs: a full
        // heap-based top-k is the most expensive, random selection the least.
        Self {
            topk: LatencyCoefficients::new(1e-4, 2e-8, 5e-9),
            dgc: LatencyCoefficients::new(1e-4, 6e-9, 2e-9),
            redsync: LatencyCoefficients::new(1e-4, 4e-9, 1e-9),
            randomk: LatencyCoefficients::new(5e-5, 1e-9, 1e-9),
        }
    }
}

impl LatencyModel {
    pub fn for_kind(&self, kind: &CompressorKind) -> LatencyCoefficients {
        match kind {
            CompressorKind::TopK => self.topk,
            CompressorKind::Dgc { .. } => self.dgc,
            CompressorKind::Redsync { .. } => self.redsync,
            CompressorKind::RandomK => self.randomk,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.topk.validate()?;
        self.dgc.validate()?;
        self.redsync.validate()?;
        self.randomk.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostModelParams {
    /// Per-message latency in seconds.
    pub alpha: f64,
    /// Seconds per 32-bit word.
    pub beta: f64,
    pub workers: usize,
    pub topology: Topology,
    /// Modeled forward/backward time per iteration.
    pub compute_time: f64,
    pub latency: LatencyModel,
}

impl Default for CostModelParams {
    fn default() -> Self {
        Self {
            alpha: 10e-6,
            // 32 bits over a 10 Gbps link.
            beta: 32.0 / 10e9,
            workers: 4,
            topology: Topology::Ring,
            compute_time: 0.01,
            latency: LatencyModel::default(),
        }
    }
}

impl CostModelParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("cost.alpha", self.alpha),
            ("cost.beta", self.beta),
            ("cost.compute_time", self.compute_time),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(invalid(name, format!("{v} must be >= 0")));
            }
        }
        if self.workers < 1 {
            return Err(invalid("cost.workers", "must be at least 1"));
        }
        self.latency.validate()
    }

    /// Allreduce time for a message of `words` 32-bit words.
    pub fn allreduce_time(&self, words: usize) -> f64 {
        allreduce_time(words, self.alpha, self.beta, self.workers, self.topology)
    }

    /// Modeled latency of compressing `input_len` entries down to `retained`.
    pub fn compression_time(
        &self,
        kind: &CompressorKind,
        input_len: usize,
        retained: usize,
    ) -> f64 {
        self.latency.for_kind(kind).seconds(input_len, retained)
    }
}

/// Tree: `2α·log2 N + 2·M·log2 N·β`. Ring: `2(N−1)α + 2Mβ(N−1)/N`.
pub fn allreduce_time(
    words: usize,
    alpha: f64,
    beta: f64,
    workers: usize,
    topology: Topology,
) -> f64 {
    if workers <= 1 {
        return 0.0;
    }
    let n = workers as f64;
    let m = words as f64;
    match topology {
        Topology::Tree => {
            let log_n = n.log2();
            2.0 * alpha * log_n + 2.0 * m * log_n * beta
        }
        Topology::Ring => 2.0 * (n - 1.0) * alpha + 2.0 * m * beta * (n - 1.0) / n,
    }
}

/// Wire size of a sparse message: one index word plus one value word per entry.
pub fn sparse_message_words(s: &SparseGradient) -> usize {
    2 * s.nnz()
}

pub fn dense_message_words(len: usize) -> usize {
    len
}

/// Dense iterations skip compression time; compressed ones pay it.
pub fn iteration_time(choice: CfChoice, compute: f64, compress: f64, sync: f64) -> f64 {
    match choice {
        CfChoice::Dense => compute + sync,
        CfChoice::Candidate | CfChoice::Minimum => compute + compress + sync,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn single_worker_is_free() {
        assert_eq!(allreduce_time(1_000_000, 1.0, 1.0, 1, Topology::Ring), 0.0);
        assert_eq!(allreduce_time(1_000_000, 1.0, 1.0, 1, Topology::Tree), 0.0);
    }

    #[test]
    fn ring_bandwidth_term() {
        let t = allreduce_time(1_000_000, 0.0, 1e-9, 4, Topology::Ring);
        assert_relative_eq!(t, 1.5e-3, max_relative = 1e-12);
    }

    #[test]
    fn tree_latency_term() {
        for m in [1, 10, 1_000_000] {
            let t = allreduce_time(m, 1e-4, 0.0, 8, Topology::Tree);
            assert_relative_eq!(t, 6e-4, max_relative = 1e-12);
        }
    }

    #[test]
    fn message_words() {
        let s = SparseGradient::new((0..100).collect(), vec![1.0; 100], 1000).unwrap();
        assert_eq!(sparse_message_words(&s), 200);
        assert_eq!(dense_message_words(1_000_000), 1_000_000);
        let k = crate::compress::retained_count(1_000_000, 10.0).unwrap();
        assert_eq!(2 * k, 200_000);
    }

    #[test]
    fn iteration_time_paths() {
        assert_relative_eq!(iteration_time(CfChoice::Dense, 0.1, 5.0, 0.2), 0.3);
        assert_relative_eq!(iteration_time(CfChoice::Minimum, 0.1, 0.05, 0.2), 0.35);
        assert_relative_eq!(iteration_time(CfChoice::Candidate, 0.1, 0.05, 0.2), 0.35);
    }

    #[test]
    fn multilevel_latency_beats_direct_on_grid() {
        let m = 1_000_000;
        let k1 = m / 10;
        let k2 = m / 1000;
        for c0 in [0.0, 1e-4, 1e-2] {
            for c1 in [1e-10, 1e-8, 1e-6] {
                for c2 in [0.0, 1e-9, 1e-7] {
                    let lat = LatencyCoefficients::new(c0, c1, c2);
                    let multi = lat.seconds(m, k1) + lat.seconds(k1, k2);
                    let direct = lat.seconds(m, k1) + lat.seconds(m, k2);
                    assert!(multi < direct, "c=({c0},{c1},{c2})");
                }
            }
        }
    }

    proptest! {
        #[test]
        fn allreduce_monotone(
            words in 1usize..10_000_000,
            extra in 1usize..1000,
            alpha in 0.0f64..1e-3,
            beta in 0.0f64..1e-8,
            n in 1usize..512,
        ) {
            for topo in [Topology::Ring, Topology::Tree] {
                let base = allreduce_time(words, alpha, beta, n, topo);
                prop_assert!(allreduce_time(words + extra, alpha, beta, n, topo) >= base);
                prop_assert!(allreduce_time(words, alpha * 2.0, beta, n, topo) >= base);
                prop_assert!(allreduce_time(words, alpha, beta * 2.0, n, topo) >= base);
                prop_assert!(allreduce_time(words, alpha, beta, n + 1, topo) >= base);
            }
        }
    }
}
