use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use ensmooth_cli::cases::build_case;
use ensmooth_cli::config::{merge, resolve, Preset, SeedBundle};
use ensmooth_cli::experiment::{gen_prior, metrics, read_manifest, run};
use ensmooth_core::io::{load_ensemble, save_ensemble};
use ensmooth_core::smoother::{evaluate_ensemble, Method};

#[derive(Parser)]
#[command(name = "ensmooth", version, about = "Ensemble smoother experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Setup {
    #[arg(long, value_enum, default_value = "gaussian_case1_desk")]
    preset: Preset,
    /// JSON file whose keys override the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Use seeds (1000n+1, ..., 1000n+4) for truth, prior, noise and training.
    #[arg(long)]
    seed_bundle: Option<u64>,
    /// Forward-model worker threads; defaults to all cores.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Build a case, assimilate, and write artifacts and metrics.
    Run {
        #[command(flatten)]
        setup: Setup,
        #[arg(long, value_enum)]
        method: Option<MethodArg>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Recompute summary.csv and the plot tables of a finished run.
    Metrics { dir: PathBuf },
    /// Write the reference truth, observations and prior ensemble of a case.
    GenPrior {
        #[command(flatten)]
        setup: Setup,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate the forward model of a run directory's case on an ensemble.
    Forward {
        /// Directory holding the run manifest (from `run` or `gen-prior`).
        #[arg(long)]
        case_dir: PathBuf,
        #[arg(long)]
        ensemble: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        workers: Option<usize>,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum MethodArg {
    Kalman,
    Dl,
}

fn overrides(setup: &Setup, method: Option<MethodArg>, out: Option<&Path>) -> Result<Value> {
    let mut v = match &setup.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
            serde_json::from_str(&text).with_context(|| format!("{} is not valid JSON", path.display()))?
        }
        None => json!({}),
    };
    let mut cli = json!({});
    if let Some(n) = setup.seed_bundle {
        cli["seeds"] = serde_json::to_value(SeedBundle::from_index(n))?;
    }
    if let Some(m) = method {
        let m = match m {
            MethodArg::Kalman => Method::Kalman,
            MethodArg::Dl => Method::Dl,
        };
        cli["method"] = serde_json::to_value(m)?;
    }
    if let Some(out) = out {
        cli["output_dir"] = json!(out);
    }
    merge(&mut v, &cli);
    Ok(v)
}

fn pool(workers: Option<usize>) -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = workers {
        b = b.num_threads(n.max(1));
    }
    Ok(b.build()?)
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { setup, method, out } => {
            let ov = overrides(&setup, method, out.as_deref())?;
            let cfg = resolve(setup.preset, &ov)?;
            let dir = cfg
                .output_dir
                .clone()
                .unwrap_or_else(|| PathBuf::from(format!("runs/{}_{}", cfg.preset.name(), cfg.method.name())));
            let rows = pool(setup.workers)?.install(|| run(&cfg, ov, setup.seed_bundle, &dir))?;
            for r in &rows {
                println!(
                    "{} {:>9} iter {} field_rmse {:.4} source_rmsre {} bimodality {:.3} median_head_misfit {:.4e}",
                    r.method,
                    r.stage,
                    r.iteration,
                    r.field_rmse,
                    r.source_rmsre.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into()),
                    r.bimodality,
                    r.median_head_misfit
                );
            }
            println!("artifacts in {}", dir.display());
        }
        Command::Metrics { dir } => {
            let rows = metrics(&dir)?;
            println!("recomputed {} summary rows in {}", rows.len(), dir.join("summary.csv").display());
        }
        Command::GenPrior { setup, out } => {
            let ov = overrides(&setup, None, None)?;
            let cfg = resolve(setup.preset, &ov)?;
            let path = pool(setup.workers)?.install(|| gen_prior(&cfg, ov, setup.seed_bundle, &out))?;
            println!("prior ensemble written to {}", path.display());
        }
        Command::Forward {
            case_dir,
            ensemble,
            out,
            workers,
        } => {
            let manifest = read_manifest(&case_dir)?;
            let case = build_case(&manifest.config)?;
            let mut e = load_ensemble(&ensemble)?;
            pool(workers)?.install(|| evaluate_ensemble(&mut e, case.model.as_ref()))?;
            save_ensemble(&e, &out)?;
            println!("evaluated {} members into {}", e.n_members(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
