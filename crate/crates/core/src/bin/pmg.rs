use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use pmg::bench::{
    correlate_items_csv, generate_benchmark, run_ablation, run_experiment, write_ablation_csv, write_benchmark_csv,
    write_items_csv, write_report, Ablation, BenchError, Pipeline, RunConfig,
};

#[derive(Parser)]
#[command(name = "pmg", version, about = "Perceptual manifold guidance lab")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run config; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Overrides the sampler and split seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Start the chain from the clean encoding without re-noising.
    #[arg(long, global = true)]
    strict_alg1: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train the score network and write score.pmgl + score.json.
    TrainScore,
    /// Write the synthetic benchmark to benchmark.csv.
    GenBench,
    /// Extract features, fit heads, write report.json and items.csv.
    Run,
    /// Run one ablation sweep and write ablation_<which>.csv.
    Ablate {
        #[arg(long, value_enum)]
        which: Which,
    },
    /// Recompute PLCC/SRCC from items.csv into correlation.json.
    EvalCorr {
        /// Defaults to <out>/items.csv.
        #[arg(long)]
        items: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Which {
    Zeta2,
    Steps,
    TimeRange,
    Layers,
}

impl From<Which> for Ablation {
    fn from(w: Which) -> Self {
        match w {
            Which::Zeta2 => Ablation::Zeta2,
            Which::Steps => Ablation::Steps,
            Which::TimeRange => Ablation::TimeRange,
            Which::Layers => Ablation::Layers,
        }
    }
}

fn load_config(c: &Common) -> Result<RunConfig, BenchError> {
    let mut cfg = match &c.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = c.seed {
        cfg = cfg.with_seed(seed);
    }
    if c.strict_alg1 {
        cfg.sampler.renoise = false;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn checkpoint(out: &Path) -> PathBuf {
    out.join("score.pmgl")
}

fn execute(cli: Cli) -> Result<(), BenchError> {
    let cfg = load_config(&cli.common)?;
    let out = &cli.common.out;
    std::fs::create_dir_all(out)?;
    match cli.command {
        Command::TrainScore => {
            let (p, curve) = Pipeline::train(&cfg)?;
            let ckpt = cfg.score.checkpoint.clone().unwrap_or_else(|| checkpoint(out));
            p.net
                .save(&ckpt, &ckpt.with_extension("json"), cfg.schedule, cfg.score.net.seed)
                .map_err(|e| BenchError::Io(std::io::Error::other(e)))?;
            eprintln!("final DSM loss {:.6}; wrote {}", curve.last().copied().unwrap_or(f64::NAN), ckpt.display());
        }
        Command::GenBench => {
            let (manifold, latent) = cfg.testbed.build().map_err(|e| BenchError::Config(e.to_string()))?;
            let bench = generate_benchmark(&cfg.benchmark, &manifold, &latent)?;
            let path = write_benchmark_csv(out, &bench, &cfg.hash(), cfg.benchmark.seed)?;
            eprintln!("{} items; wrote {}", bench.items.len(), path.display());
        }
        Command::Run => {
            let p = Pipeline::from_checkpoint(&cfg, Some(checkpoint(out)))?;
            let result = run_experiment(&p, &cfg)?;
            write_report(out, &result.report)?;
            write_items_csv(out, &result)?;
            println!(
                "SRCC {:.4}  PLCC {:.4}  (baseline SRCC {:.4})",
                result.report.median_srcc, result.report.median_plcc, result.report.baseline.median_srcc
            );
        }
        Command::Ablate { which } => {
            let p = Pipeline::from_checkpoint(&cfg, Some(checkpoint(out)))?;
            let table = run_ablation(&p, &cfg, which.into())?;
            let path = write_ablation_csv(out, &table)?;
            for r in &table.rows {
                println!("{:>10}  SRCC {:.4}  PLCC {:.4}", r.setting, r.srcc, r.plcc);
            }
            eprintln!("wrote {}", path.display());
        }
        Command::EvalCorr { items } => {
            let path = items.unwrap_or_else(|| out.join("items.csv"));
            let corr = correlate_items_csv(&path)?;
            let text = serde_json::to_string_pretty(&corr).map_err(|e| BenchError::Io(std::io::Error::other(e)))?;
            std::fs::write(out.join("correlation.json"), text + "\n")?;
            println!("SRCC {:.4}  PLCC {:.4}  n = {}", corr.overall.srcc, corr.overall.plcc, corr.overall.n);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("pmg: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
