use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::Context;
use clap::{Parser, Subcommand};
use gravac_core::experiment::{
    compare_runs, kde_report, read_trace, run_experiment, HISTOGRAM_FILE, KDE_FILE,
};
use gravac_core::{GravacError, Mode, RunConfig};

/// Adaptive gradient compression experiments.
#[derive(Parser)]
#[command(name = "gravac", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train with the simulator and write trace, summary and CF reports.
    Run(RunArgs),
    /// Compare two traces: time-to-target, volume and final loss.
    Compare {
        a: PathBuf,
        b: PathBuf,
        /// Loss threshold for time-to-target; defaults to whole runs.
        #[arg(long)]
        target_loss: Option<f64>,
    },
    /// Recompute the CF-usage KDE and histogram from a trace.
    Kde {
        trace: PathBuf,
        #[arg(long, default_value_t = gravac_core::kde::DEFAULT_BANDWIDTH)]
        bandwidth: f64,
        #[arg(long, default_value_t = gravac_core::kde::DEFAULT_GRID_POINTS)]
        points: usize,
        /// Upper end of the CF axis.
        #[arg(long, default_value_t = 1000.0)]
        theta_max: f64,
        /// Directory for kde.csv and histogram.csv; stdout if omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print every configuration key with its default.
    PrintConfig,
}

#[derive(clap::Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// gravac | dense | static-cf:<cf>
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    iters: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Extra `key=value` assignment; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl RunArgs {
    fn resolve(&self) -> gravac_core::Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path)?;
            cfg.apply_str(&text)?;
        }
        if let Ok(seed) = std::env::var("GRAVAC_SEED") {
            cfg.set("seed", &seed)?;
        }
        for kv in &self.overrides {
            let (k, v) = kv.split_once('=').ok_or_else(|| GravacError::Config {
                key: kv.clone(),
                message: "expected KEY=VALUE".into(),
            })?;
            cfg.set(k.trim(), v)?;
        }
        if let Some(mode) = self.mode {
            cfg.mode = mode;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(iters) = self.iters {
            cfg.iterations = iters;
        }
        if let Some(out) = &self.out {
            cfg.output = out.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run(args: &RunArgs) -> gravac_core::Result<()> {
    let cfg = args.resolve()?;
    let started = Instant::now();
    let out = run_experiment(&cfg)?;
    let s = &out.summary;
    println!("mode            {}", s.mode);
    println!("iterations      {}", s.iterations);
    println!("final loss      {:.6}", s.final_loss);
    if let Some(acc) = s.final_accuracy {
        println!("final accuracy  {:.4}", acc);
    }
    println!(
        "floats sent     {} ({:.2}x less than dense)",
        s.total_floats_sent, s.comm_reduction
    );
    println!(
        "words sent      {} ({:.2}x less than dense)",
        s.total_words_sent, s.comm_reduction_words
    );
    println!("simulated time  {:.4} s", s.total_time);
    if let Some(cf) = s.ideal_cf {
        println!("ideal cf        {cf}");
    }
    println!("output          {}", cfg.output.display());
    eprintln!("wall clock      {:.2} s", started.elapsed().as_secs_f64());
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<GravacError>() {
        Some(GravacError::Config { .. } | GravacError::InvalidParameter { .. }) => 2,
        Some(GravacError::Divergence { .. }) => 3,
        _ => 1,
    }
}

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Run(args) => run(&args)?,
        Command::Compare { a, b, target_loss } => {
            let ta = read_trace(&a)?;
            let tb = read_trace(&b)?;
            let report = compare_runs(&ta, &tb, target_loss)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Kde {
            trace,
            bandwidth,
            points,
            theta_max,
            out,
        } => {
            let t = read_trace(&trace)?;
            let (kde, hist) = kde_report(&t, bandwidth, points, theta_max)?;
            match out {
                Some(dir) => {
                    std::fs::create_dir_all(&dir)
                        .with_context(|| format!("creating {}", dir.display()))?;
                    std::fs::write(dir.join(KDE_FILE), kde)?;
                    std::fs::write(dir.join(HISTOGRAM_FILE), hist)?;
                }
                None => print!("{hist}\n{kde}"),
            }
        }
        Command::PrintConfig => print!("{}", RunConfig::reference()),
    }
    Ok(())
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
