#![allow(clippy::field_reassign_with_default)]

//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion.

use std::collections::BTreeSet;
use std::time::Instant;

use gravac_core::compress::{compress, compress_further, retained_count};
use gravac_core::config::CompressorName;
use gravac_core::costmodel::{allreduce_time, LatencyCoefficients};
use gravac_core::experiment::{run_experiment, TRACE_FILE};
use gravac_core::kde::{cf_usage_samples, default_grid, gaussian_kde, trapezoid};
use gravac_core::metrics::compression_gain;
use gravac_core::sim::TaskKind;
use gravac_core::{
    run_training, CompressorKind, Controller, ControllerConfig, GradientVector, Mode,
    ResidualStore, RunConfig, ScalingPolicy, SeededRng, Topology,
};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

const KINDS: [CompressorKind; 4] = [
    CompressorKind::TopK,
    CompressorKind::Dgc {
        sample_fraction: 0.01,
    },
    CompressorKind::Redsync { max_rounds: 20 },
    CompressorKind::RandomK,
];

fn exact_top_k(values: &[f32], k: usize) -> Vec<u32> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].abs().total_cmp(&values[a].abs()).then(a.cmp(&b)));
    let mut top: Vec<u32> = order[..k].iter().map(|&i| i as u32).collect();
    top.sort_unstable();
    top
}

fn compressor_exactness() -> Outcome {
    let started = Instant::now();
    let mut rng = SeededRng::new(1);
    for case in 0..1000 {
        let m = 1 + rng.below(5000);
        let cf = 1.0 + rng.uniform() * (2.0 * m as f64);
        let g = rng.normal_gradient(m);
        let k = ((m as f64 / cf).floor() as usize).max(1);
        for kind in &KINDS {
            let s = compress(kind, &g, cf, &mut rng).map_err(|e| e.to_string())?;
            ensure(s.nnz() == k, || {
                format!(
                    "case {case}: {} kept {} of M={m}, cf={cf}, expected {k}",
                    kind.name(),
                    s.nnz()
                )
            })?;
        }
        let s = compress(&CompressorKind::TopK, &g, cf, &mut rng).map_err(|e| e.to_string())?;
        ensure(s.indices() == exact_top_k(g.values(), k).as_slice(), || {
            format!("case {case}: TopK support differs from sort oracle")
        })?;
    }
    let secs = started.elapsed().as_secs_f64();
    ensure(secs < 5.0, || format!("took {secs:.2}s"))?;
    Ok(format!("1000 cases in {secs:.2}s"))
}

fn multilevel_equivalence() -> Outcome {
    let mut rng = SeededRng::new(2);
    let m = 10_000;
    for case in 0..100 {
        // Distinct magnitudes: a shuffled ramp with random signs.
        let mut mags: Vec<f32> = (1..=m).map(|i| i as f32 * 1e-3).collect();
        for i in (1..m).rev() {
            mags.swap(i, rng.below(i + 1));
        }
        let values: Vec<f32> = mags
            .into_iter()
            .map(|v| if rng.uniform() < 0.5 { -v } else { v })
            .collect();
        let g = GradientVector::new(values);
        let first =
            compress(&CompressorKind::TopK, &g, 10.0, &mut rng).map_err(|e| e.to_string())?;
        let two_level = compress_further(&CompressorKind::TopK, &first, 100.0, &mut rng)
            .map_err(|e| e.to_string())?;
        let direct =
            compress(&CompressorKind::TopK, &g, 1000.0, &mut rng).map_err(|e| e.to_string())?;
        ensure(two_level.indices() == direct.indices(), || {
            format!("case {case}: supports differ")
        })?;
        ensure(two_level.values() == direct.values(), || {
            format!("case {case}: values differ")
        })?;
    }
    let (k1, k2) = (
        retained_count(m, 10.0).unwrap_or(1),
        retained_count(m, 1000.0).unwrap_or(1),
    );
    let mut points = 0;
    for c0 in [0.0, 1e-5, 1e-4, 1e-3] {
        for c1 in [1e-10, 1e-9, 1e-8, 1e-7] {
            for c2 in [0.0, 1e-10, 1e-9, 1e-8] {
                let lat = LatencyCoefficients { c0, c1, c2 };
                let multi = lat.seconds(m, k1) + lat.seconds(k1, k2);
                let direct = lat.seconds(m, k1) + lat.seconds(m, k2);
                ensure(multi <= direct, || {
                    format!("c0={c0} c1={c1} c2={c2}: {multi} > {direct}")
                })?;
                points += 1;
            }
        }
    }
    Ok(format!(
        "100 vectors identical, {points} latency grid points"
    ))
}

fn gain_bounds() -> Outcome {
    let mut rng = SeededRng::new(3);
    for case in 0..10_000 {
        let kind = &KINDS[case % KINDS.len()];
        let m = 2 + rng.below(300);
        let g = rng.normal_gradient(m);
        let cf = 1.0 + rng.uniform() * m as f64;
        let s = compress(kind, &g, cf, &mut rng).map_err(|e| e.to_string())?;
        let gain = compression_gain(&s, &g).map_err(|e| e.to_string())?;
        ensure(gain > 0.0 && gain <= 1.0, || {
            format!("case {case}: {} gain {gain}", kind.name())
        })?;
        let full = compress(kind, &g, 1.0, &mut rng).map_err(|e| e.to_string())?;
        let unit = compression_gain(&full, &g).map_err(|e| e.to_string())?;
        ensure(unit == 1.0, || {
            format!("case {case}: {} gain at cf=1 is {unit}", kind.name())
        })?;
    }
    for case in 0..200 {
        let g = rng.normal_gradient(1000);
        let mut last = 1.0;
        for cf in [1.0, 1.5, 2.0, 5.0, 10.0, 33.0, 100.0, 500.0, 1000.0] {
            let s = compress(&CompressorKind::TopK, &g, cf, &mut rng).map_err(|e| e.to_string())?;
            let gain = compression_gain(&s, &g).map_err(|e| e.to_string())?;
            ensure(gain <= last, || {
                format!("case {case}: gain rose at cf={cf}")
            })?;
            last = gain;
        }
    }
    Ok("10000 triples in (0,1], 200 monotone TopK sweeps".into())
}

fn feedback_conservation() -> Outcome {
    let m = 2000;
    let mut rng = SeededRng::new(4);
    let mut store = ResidualStore::new(m);
    let mut raw_sum = vec![0.0f64; m];
    let mut sent_sum = vec![0.0f64; m];
    for _ in 0..500 {
        let raw = rng.normal_gradient(m);
        let g_ef = store.apply_feedback(&raw).map_err(|e| e.to_string())?;
        let s =
            compress(&CompressorKind::TopK, &g_ef, 20.0, &mut rng).map_err(|e| e.to_string())?;
        store.update(&g_ef, &s).map_err(|e| e.to_string())?;
        raw.values()
            .iter()
            .zip(&mut raw_sum)
            .for_each(|(&v, a)| *a += f64::from(v));
        for (&i, &v) in s.indices().iter().zip(s.values()) {
            sent_sum[i as usize] += f64::from(v);
        }
    }
    let scale = raw_sum.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let err = raw_sum
        .iter()
        .zip(&sent_sum)
        .zip(store.residual().values())
        .map(|((r, s), &e)| (s + f64::from(e) - r).abs())
        .fold(0.0f64, f64::max);
    let rel = err / scale;
    ensure(rel <= 1e-4, || format!("relative error {rel:e}"))?;
    Ok(format!("max relative error {rel:.2e}"))
}

fn schedule_replay() -> Outcome {
    let visit = |policy: ScalingPolicy, theta_max: f64| -> Result<BTreeSet<u64>, String> {
        let cfg = ControllerConfig {
            theta_min: 10.0,
            theta_max,
            window: 1,
            policy,
            ..ControllerConfig::default()
        };
        let mut c = Controller::new(cfg, 4, 32).map_err(|e| e.to_string())?;
        let mut seen = BTreeSet::new();
        for i in 1..=20 {
            seen.insert(c.candidate_cf() as u64);
            // Gains far apart: θ_min never escalates.
            c.observe_gains(0.95, 0.5).map_err(|e| e.to_string())?;
            c.check_gravac(i);
        }
        Ok(seen)
    };
    let exp = visit(ScalingPolicy::Exponential, 1000.0)?;
    ensure(exp == BTreeSet::from([10, 20, 40, 160, 1000]), || {
        format!("exponential visited {exp:?}")
    })?;
    let geo = visit(ScalingPolicy::Geometric, 2000.0)?;
    let expected: BTreeSet<u64> = [10, 20, 40, 80, 160, 320, 640, 1280, 2000].into();
    ensure(geo == expected, || format!("geometric visited {geo:?}"))?;

    // Escalation iff ω ≥ |δ_min − δ_c| / δ_min on the smoothed gains.
    let mut rng = SeededRng::new(5);
    for case in 0..500 {
        let cfg = ControllerConfig {
            window: 1,
            omega: 0.01 + 0.2 * rng.uniform(),
            ..ControllerConfig::default()
        };
        let omega = cfg.omega;
        let mut c = Controller::new(cfg, 4, 32).map_err(|e| e.to_string())?;
        c.observe_gains(0.5, 0.5).map_err(|e| e.to_string())?;
        c.check_gravac(1);
        let before = (c.theta_min(), c.candidate_cf());
        let d_min = 0.3 + 0.7 * rng.uniform();
        let d_c = d_min * (1.0 - 0.4 * rng.uniform());
        let (d_min, d_c) = c.observe_gains(d_min, d_c).map_err(|e| e.to_string())?;
        c.check_gravac(2);
        let fires = omega >= (d_min - d_c).abs() / d_min;
        let escalated = c.theta_min() > before.0;
        ensure(fires == escalated, || {
            format!("case {case}: ω={omega} δ_min={d_min} δ_c={d_c} escalated={escalated}")
        })?;
        if escalated {
            ensure(c.theta_min() == before.1, || {
                format!("case {case}: θ_min {} != {}", c.theta_min(), before.1)
            })?;
        }
    }

    let cfg = ControllerConfig {
        policy: ScalingPolicy::Geometric,
        theta_max: 2000.0,
        window: 1,
        ..ControllerConfig::default()
    };
    let mut c = Controller::new(cfg, 4, 32).map_err(|e| e.to_string())?;
    c.table_mut().set_compression(1280.0, 1029.9);
    c.table_mut().set_compression(2000.0, 1035.4);
    let event = c.check_gravac(1).ok_or("no window event")?;
    let sat = event.saturation.ok_or("no saturation detected")?;
    ensure(sat.ideal_cf == 1280.0 && c.candidate_cf() == 1280.0, || {
        format!("chose {}", sat.ideal_cf)
    })?;
    ensure(c.is_frozen() && c.check_gravac(2).is_none(), || {
        "did not freeze".into()
    })?;
    Ok(
        "exponential {10,20,40,160,1000}, geometric {10..2000}, 500 escalation cases, 1280x chosen"
            .into(),
    )
}

fn cost_model() -> Outcome {
    let mut rng = SeededRng::new(6);
    for case in 0..50 {
        let alpha = 1e-6 + rng.uniform() * 1e-3;
        let beta = 1e-11 + rng.uniform() * 1e-8;
        let n = 2 + rng.below(255);
        let m = 1 + rng.below(10_000_000);
        let (nf, mf) = (n as f64, m as f64);
        let tree = 2.0 * alpha * nf.log2() + 2.0 * mf * nf.log2() * beta;
        let ring = 2.0 * (nf - 1.0) * alpha + 2.0 * mf * beta * (nf - 1.0) / nf;
        for (topo, want) in [(Topology::Tree, tree), (Topology::Ring, ring)] {
            let got = allreduce_time(m, alpha, beta, n, topo);
            ensure(((got - want) / want).abs() <= 1e-12, || {
                format!("case {case} {topo}: {got} vs {want}")
            })?;
        }
    }
    for case in 0..2000 {
        let alpha = rng.uniform() * 1e-3;
        let beta = rng.uniform() * 1e-8;
        let n = 1 + rng.below(128);
        let m = rng.below(1_000_000);
        for topo in [Topology::Ring, Topology::Tree] {
            let base = allreduce_time(m, alpha, beta, n, topo);
            let bumps = [
                allreduce_time(m + 1 + rng.below(1000), alpha, beta, n, topo),
                allreduce_time(m, alpha * 1.5, beta, n, topo),
                allreduce_time(m, alpha, beta * 1.5, n, topo),
                allreduce_time(m, alpha, beta, n + 1, topo),
            ];
            ensure(bumps.iter().all(|&b| b >= base), || {
                format!("case {case} {topo}: not monotone")
            })?;
        }
    }
    Ok("50 formula checks, 2000 monotonicity cases".into())
}

fn convergence_parity() -> Outcome {
    let started = Instant::now();
    let mut cfg = RunConfig::default();
    cfg.controller = ControllerConfig {
        theta_min: 10.0,
        theta_max: 1000.0,
        epsilon: 0.9,
        window: 50,
        ..ControllerConfig::default()
    };
    cfg.mode = Mode::Dense;
    let dense = run_training(&cfg).map_err(|e| e.to_string())?;
    cfg.mode = Mode::Gravac;
    let gravac = run_training(&cfg).map_err(|e| e.to_string())?;
    let secs = started.elapsed().as_secs_f64();
    let acc = |r: &gravac_core::sim::RunResult| r.evaluation.accuracy.unwrap_or(0.0);
    let floats =
        |r: &gravac_core::sim::RunResult| r.trace.iter().map(|t| t.floats_sent).sum::<u64>() as f64;
    let (ad, ag) = (acc(&dense), acc(&gravac));
    let reduction = floats(&dense) / floats(&gravac);
    let summary = format!(
        "dense {:.2}% vs gravac {:.2}%, {reduction:.2}x fewer floats, {} params, {secs:.1}s",
        100.0 * ad,
        100.0 * ag,
        dense.param_count
    );
    ensure((ad - ag).abs() <= 0.02, || summary.clone())?;
    ensure(reduction >= 5.0, || summary.clone())?;
    ensure(secs < 120.0, || summary.clone())?;
    Ok(summary)
}

fn random_k_rescue() -> Outcome {
    let mut cfg = RunConfig::default();
    cfg.task.kind = TaskKind::Quadratic;
    cfg.task.params = 1000;
    cfg.iterations = 1000;
    cfg.optimizer.lr = 0.05;
    cfg.optimizer.momentum = 0.0;
    cfg.compressor.name = CompressorName::RandomK;
    cfg.controller.theta_min = 1.5;
    let initial = {
        let task = gravac_core::sim::Task::build(&cfg.task).map_err(|e| e.to_string())?;
        task.evaluate(&task.initial_weights()).loss
    };
    cfg.mode = Mode::StaticCf(cfg.task.params as f64 / 2.0);
    let stalled = run_training(&cfg)
        .map_err(|e| e.to_string())?
        .evaluation
        .loss;
    cfg.mode = Mode::Gravac;
    let rescued = run_training(&cfg)
        .map_err(|e| e.to_string())?
        .evaluation
        .loss;
    let summary = format!(
        "initial {initial:.2}, static RandomK cf=M/2 {:.3}x, GraVAC {:.2e}x",
        stalled / initial,
        rescued / initial
    );
    ensure(stalled > 0.5 * initial && rescued < 0.01 * initial, || {
        summary.clone()
    })?;
    Ok(summary)
}

fn determinism() -> Outcome {
    let dir = std::env::temp_dir().join(format!("gravac-acceptance-{}", std::process::id()));
    let mut checked = 0;
    for (name, kind) in [
        ("randomk", CompressorName::RandomK),
        ("dgc", CompressorName::Dgc),
    ] {
        let mut cfg = RunConfig::default();
        cfg.iterations = 400;
        cfg.controller.window = 20;
        cfg.compressor.name = kind;
        let mut traces = Vec::new();
        for rep in 0..2 {
            cfg.output = dir.join(format!("{name}-{rep}"));
            run_experiment(&cfg).map_err(|e| e.to_string())?;
            traces.push(std::fs::read(cfg.output.join(TRACE_FILE)).map_err(|e| e.to_string())?);
        }
        ensure(traces[0] == traces[1], || format!("{name} traces differ"))?;
        checked += 1;
    }
    let _ = std::fs::remove_dir_all(&dir);
    Ok(format!("{checked} repeated runs byte-identical"))
}

fn kde_sanity() -> Outcome {
    let mut cfg = RunConfig::default();
    cfg.iterations = 600;
    let gravac = run_training(&cfg).map_err(|e| e.to_string())?;
    cfg.mode = Mode::Dense;
    let dense = run_training(&cfg).map_err(|e| e.to_string())?;
    let grid = default_grid(cfg.controller.theta_max, 0.1, 4001);
    let mut report = Vec::new();
    for (name, run) in [("gravac", &gravac), ("dense", &dense)] {
        let samples = cf_usage_samples(&run.trace).map_err(|e| e.to_string())?;
        let density = gaussian_kde(&samples, 0.1, &grid).map_err(|e| e.to_string())?;
        let mass = trapezoid(&grid, &density);
        ensure((mass - 1.0).abs() <= 1e-3, || format!("{name} mass {mass}"))?;
        report.push(format!("{name} mass {mass:.5}"));
        if name == "dense" {
            let peak = density
                .iter()
                .enumerate()
                .fold((0, f64::MIN), |b, (i, &d)| if d > b.1 { (i, d) } else { b })
                .0;
            ensure(grid[peak].abs() < 0.01, || {
                format!("dense peak at {}", grid[peak])
            })?;
            report.push(format!("dense peak at log10 cf = {:.3}", grid[peak]));
        }
    }
    Ok(report.join(", "))
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 10] = [
        ("compressor exactness", compressor_exactness),
        ("multi-level equivalence", multilevel_equivalence),
        ("gain bounds", gain_bounds),
        ("error-feedback conservation", feedback_conservation),
        ("controller schedule replay", schedule_replay),
        ("cost-model formulas", cost_model),
        ("convergence parity", convergence_parity),
        ("random-k rescue", random_k_rescue),
        ("determinism", determinism),
        ("kde sanity", kde_sanity),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        match check() {
            Ok(detail) => println!("criterion {:>2} {name}: PASS ({detail})", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {:>2} {name}: FAIL ({detail})", i + 1);
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        criteria.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
