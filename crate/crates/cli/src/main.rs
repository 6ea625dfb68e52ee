use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use riskguard_core::pipeline::{load_config, run_dir_for, Pipeline, Stage};

/// Risk profiling of glucose forecasters under evasion attack, and selective
/// training of anomaly detectors on the less vulnerable patients.
#[derive(Parser)]
#[command(name = "riskguard", version, about)]
struct Cli {
    /// TOML config; omitted keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Parent of content-addressed run directories.
    #[arg(long, global = true, env = "RISKGUARD_OUT_DIR", default_value = "runs")]
    out_dir: PathBuf,

    /// Use this run directory instead of `<out-dir>/<config hash>`.
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,

    /// Root seed; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate or ingest the cohort.
    Synth,
    /// Fit the aggregate and per-patient forecasters.
    FitPredictor,
    /// Attack every test window.
    Attack,
    /// Build per-patient risk profiles.
    Risk,
    /// Cluster risk profiles into less and more vulnerable groups.
    Cluster,
    /// Fit detectors under each training strategy.
    FitDetector,
    /// Score detectors on the shared test pool.
    Evaluate,
    /// Write the report and plot data.
    Report,
    /// Run every stage in order, reusing cached results.
    RunAll,
    /// Print the resolved config as TOML.
    ValidateConfig,
    /// Re-hash every recorded artifact and check the manifest chain.
    Verify,
}

fn stage_of(c: &Command) -> Option<Stage> {
    Some(match c {
        Command::Synth => Stage::Synth,
        Command::FitPredictor => Stage::FitPredictor,
        Command::Attack => Stage::Attack,
        Command::Risk => Stage::Risk,
        Command::Cluster => Stage::Cluster,
        Command::FitDetector => Stage::FitDetector,
        Command::Evaluate => Stage::Evaluate,
        Command::Report => Stage::Report,
        _ => return None,
    })
}

fn run(cli: Cli) -> Result<()> {
    if let Some(jobs) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .context("configuring the worker pool")?;
    }
    let mut resolved = load_config(cli.config.as_deref()).context("config validation failed")?;
    if let Some(seed) = cli.seed {
        resolved = resolved.with_seed(seed);
    }
    if let Command::ValidateConfig = cli.command {
        print!("{}", toml::to_string(&resolved.config)?);
        return Ok(());
    }
    let dir = cli.run_dir.unwrap_or_else(|| run_dir_for(&cli.out_dir, &resolved.config));
    let mut pipeline = Pipeline::open(&dir, resolved)?;
    let runs = match &cli.command {
        Command::RunAll => pipeline.run_all().context("run-all failed")?,
        Command::Verify => {
            let problems = pipeline.verify();
            if problems.is_empty() {
                println!("{}: manifest chain intact", dir.display());
                return Ok(());
            }
            for p in &problems {
                println!("{p}");
            }
            anyhow::bail!("{} problem(s) in {}", problems.len(), dir.display());
        }
        c => {
            let stage = stage_of(c).expect("stage command");
            vec![pipeline.run_stage(stage).with_context(|| format!("stage `{stage}` failed"))?]
        }
    };
    for r in runs {
        println!("{:14} {}", r.stage.name(), if r.cached { "cached" } else { "done" });
    }
    println!("run directory: {}", dir.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
