//! Command-line front end: `simulate`, `estimate`, `fisher` and `study`.

pub mod config;
pub mod output;

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Serialize;

use crate::asymptotics::{constant_drift_fisher, gamma_matrix, FisherReport};
use crate::error::{Error, Result};
use crate::estimator::{maximize_likelihood, EstimationResult};
use crate::experiment::{run_study, SamplerKind};
use crate::fbm::{CholeskyFbm, CirculantFbm, HurstIndex, RngSeed};
use crate::likelihood::LikelihoodContext;
use crate::model::{simulate_sde, DriftFamily};

pub use config::RunConfig;
use config::Format;

#[derive(Debug, Parser)]
#[command(name = "fracmle", version, about = "MLE of the drift of an SDE driven by small fractional Brownian motion")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, clap::Args)]
pub struct CommonArgs {
    /// TOML run configuration
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory (overrides `output.directory`)
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Master seed (overrides the seed in the configuration)
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate paths at θ0 and write t, X, BH as CSV
    Simulate(CommonArgs),
    /// Estimate θ from a CSV path with columns t, X
    Estimate {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        data: PathBuf,
    },
    /// Write Γ_H(θ0), its inverse and eigenvalues
    Fisher(CommonArgs),
    /// Run the Monte Carlo study of the normalised estimation error
    Study(CommonArgs),
}

/// 0 on success, 1 for invalid input, 2 for numerical failure.
pub fn exit_code(err: &Error) -> i32 {
    if err.is_validation() || matches!(err, Error::Io(_)) {
        1
    } else {
        2
    }
}

fn output_dir(cfg: &RunConfig, args: &CommonArgs) -> Result<PathBuf> {
    let dir = args
        .out
        .clone()
        .or_else(|| cfg.output.directory.clone())
        .unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

pub fn cmd_simulate(args: &CommonArgs) -> Result<Vec<PathBuf>> {
    let cfg = RunConfig::load(&args.config)?;
    let model = cfg.drift_model()?;
    let theta0 = cfg.theta0()?;
    let hurst = HurstIndex::new(cfg.noise.hurst)?;
    let sde = cfg.sde_config(hurst, cfg.epsilon()?)?;
    let seed = args
        .seed
        .or(cfg.simulate.seed)
        .or(cfg.study.as_ref().and_then(|s| s.seed))
        .ok_or_else(|| Error::Config("missing key simulate.seed (or pass --seed)".into()))?;
    let dir = output_dir(&cfg, args)?;
    let sample: Box<dyn Fn(RngSeed) -> crate::grid::SampledPath> = match cfg.simulate.sampler {
        SamplerKind::Cholesky => {
            let s = CholeskyFbm::new(sde.grid, hurst)?;
            Box::new(move |r| s.sample(r))
        }
        SamplerKind::Circulant => {
            let s = CirculantFbm::new(sde.grid, hurst)?;
            Box::new(move |r| s.sample(r))
        }
    };
    let paths = cfg.simulate.paths;
    let mut written = Vec::with_capacity(paths);
    for k in 0..paths {
        let noise = sample(RngSeed::for_replicate(seed, k as u64));
        let x = simulate_sde(&model, &theta0, &sde, &noise)?;
        let name = if paths == 1 { "path.csv".to_string() } else { format!("path_{k:04}.csv") };
        let p = dir.join(name);
        output::write_path_csv(&p, &x, &noise)?;
        written.push(p);
    }
    Ok(written)
}

#[derive(Debug, Serialize)]
struct EstimateFile<'a> {
    model: DriftFamily,
    hurst: f64,
    epsilon: f64,
    horizon: f64,
    steps: usize,
    data: &'a Path,
    #[serde(flatten)]
    result: EstimationResult,
}

pub fn cmd_estimate(args: &CommonArgs, data: &Path) -> Result<Vec<PathBuf>> {
    let cfg = RunConfig::load(&args.config)?;
    let model = cfg.drift_model()?;
    let hurst = cfg.estimation_hurst()?;
    let eps = cfg.epsilon()?;
    let sde = cfg.sde_config(hurst, eps)?;
    let bounds = cfg.bounds()?;
    let observed = output::read_path_csv(data, sde.grid)?;
    if (observed.values()[0] - sde.x0).abs() > 1e-12 * (1.0 + sde.x0.abs()) {
        return Err(Error::Config(format!(
            "data start at X = {} but model.x0 = {}",
            observed.values()[0],
            sde.x0
        )));
    }
    let ctx = LikelihoodContext::new(observed, sde, model)?;
    let mut result = maximize_likelihood(&ctx, &bounds, &cfg.optimizer)?;
    if let Some(theta0) = &cfg.model.theta0 {
        result = result.with_truth(theta0, eps);
    }
    let dir = output_dir(&cfg, args)?;
    let p = dir.join("estimate.json");
    output::write_json(
        &p,
        &EstimateFile {
            model: model.family(),
            hurst: hurst.value(),
            epsilon: eps,
            horizon: sde.grid.horizon(),
            steps: sde.grid.steps(),
            data,
            result,
        },
    )?;
    Ok(vec![p])
}

#[derive(Debug, Serialize)]
struct FisherFile {
    model: DriftFamily,
    theta0: Vec<f64>,
    hurst: f64,
    horizon: f64,
    steps: usize,
    #[serde(flatten)]
    fisher: FisherReport,
    /// Closed-form value for the constant drift.
    #[serde(skip_serializing_if = "Option::is_none")]
    closed_form: Option<f64>,
}

pub fn cmd_fisher(args: &CommonArgs) -> Result<Vec<PathBuf>> {
    let cfg = RunConfig::load(&args.config)?;
    let model = cfg.drift_model()?;
    let hurst = cfg.estimation_hurst()?;
    let theta0 = cfg.theta0()?;
    let sde = cfg.sde_config(hurst, cfg.noise.epsilon.unwrap_or(1.0))?;
    let fisher = gamma_matrix(&model, &theta0, &sde)?.to_report();
    let closed_form = match model.family() {
        DriftFamily::Constant => Some(constant_drift_fisher(hurst, sde.grid.horizon())?),
        _ => None,
    };
    let dir = output_dir(&cfg, args)?;
    let mut written = Vec::new();
    if cfg.output.wants(Format::Json) {
        let p = dir.join("fisher.json");
        output::write_json(
            &p,
            &FisherFile {
                model: model.family(),
                theta0,
                hurst: hurst.value(),
                horizon: sde.grid.horizon(),
                steps: sde.grid.steps(),
                fisher: fisher.clone(),
                closed_form,
            },
        )?;
        written.push(p);
    }
    if cfg.output.wants(Format::Csv) {
        let p = dir.join("fisher.csv");
        output::write_fisher_csv(&p, &fisher)?;
        written.push(p);
    }
    Ok(written)
}

pub fn cmd_study(args: &CommonArgs) -> Result<Vec<PathBuf>> {
    let cfg = RunConfig::load(&args.config)?;
    let study = cfg.study_config(args.seed)?;
    let report = run_study(&study)?;
    let dir = output_dir(&cfg, args)?;
    output::write_study(
        &dir,
        &report,
        cfg.output.wants(Format::Json),
        cfg.output.wants(Format::Csv),
    )
}

pub fn run(cli: &Cli) -> Result<Vec<PathBuf>> {
    match &cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Estimate { common, data } => cmd_estimate(common, data),
        Command::Fisher(a) => cmd_fisher(a),
        Command::Study(a) => cmd_study(a),
    }
}

/// Parses the process arguments, runs the command and returns the exit code.
pub fn main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(&cli) {
        Ok(files) => {
            for f in files {
                println!("{}", f.display());
            }
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
