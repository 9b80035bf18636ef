//! Flag and config-file resolution. A flag beats the `--config` file, which
//! beats the built-in default of the subcommand.

use std::path::{Path, PathBuf};

use clap::Args;
use coral_core::pipelines::{HomographyTask, Method, PlaneTask};
use coral_core::simworld::SweepConfig;
use coral_core::solver::SolverConfig;
use serde::Deserialize;
use serde_json::{json, Value};

use crate::CliError;

#[derive(Args, Debug, Clone, Default)]
pub struct SolverArgs {
    /// Seed for every random choice [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads, 0 = one per core; outputs do not depend on it [default: 0]
    #[arg(long)]
    pub threads: Option<usize>,
    /// Smoothness weight [default: 0.5 fit-homography, 1 fit-planes, 1 sim]
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Label cost per model [default: 100 fit-homography, 5000 fit-planes, 300 sim]
    #[arg(long)]
    pub beta: Option<f64>,
    /// Outlier cost per point [default: 20 fit-homography, 9 fit-planes, 20 sim]
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Sampled model proposals [default: 100 fit-homography, 200 fit-planes, 300 sim]
    #[arg(long)]
    pub proposals: Option<usize>,
    /// Primal-dual iterations per outer iteration [default: 500]
    #[arg(long)]
    pub inner_iters: Option<usize>,
    /// Outer iterations (solve, threshold, merge, refit) [default: 20]
    #[arg(long)]
    pub max_outer: Option<usize>,
    /// Fitting method, coral or ransac [default: coral; sim runs both]
    #[arg(long, value_parser = parse_method)]
    pub method: Option<Method>,
    /// Output directory [default: out]
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// TOML file with any setting of this command, keys spelled with underscores
    #[arg(long)]
    pub config: Option<PathBuf>,
}

pub fn parse_method(s: &str) -> Result<Method, String> {
    match s {
        "coral" => Ok(Method::Coral),
        "ransac" => Ok(Method::Ransac),
        _ => Err(format!("unknown method {s:?}, expected coral or ransac")),
    }
}

/// Every key accepted in a `--config` file.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub lambda: Option<f64>,
    pub beta: Option<f64>,
    pub gamma: Option<f64>,
    pub proposals: Option<usize>,
    pub inner_iters: Option<usize>,
    pub max_outer: Option<usize>,
    pub method: Option<Method>,
    pub out: Option<PathBuf>,
    // sim
    pub sweep: Option<String>,
    pub sigmas: Option<Vec<f64>>,
    pub ratios: Option<Vec<f64>>,
    pub outlier_sigma: Option<f64>,
    pub trials: Option<usize>,
    pub points_per_plane: Option<usize>,
    pub min_sigma_pixel: Option<f64>,
    // fit-homography
    pub sigma_pixel: Option<f64>,
    pub k: Option<usize>,
    // fit-planes
    pub sigma_xi: Option<f64>,
    pub edge_alpha: Option<f64>,
    pub local_radius: Option<f64>,
    pub min_inliers: Option<usize>,
    pub merge_tol: Option<f64>,
}

pub fn load_file(path: Option<&Path>) -> Result<FileConfig, CliError> {
    let Some(path) = path else { return Ok(FileConfig::default()) };
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone, Copy)]
pub struct Defaults {
    pub lambda: f64,
    pub beta: f64,
    pub gamma: f64,
    pub proposals: usize,
}

pub const HOMOGRAPHY: Defaults = Defaults {
    lambda: HomographyTask::DEFAULT_LAMBDA,
    beta: HomographyTask::DEFAULT_BETA,
    gamma: HomographyTask::DEFAULT_GAMMA,
    proposals: HomographyTask::DEFAULT_PROPOSALS,
};

pub const PLANES: Defaults = Defaults {
    lambda: PlaneTask::DEFAULT_LAMBDA,
    beta: PlaneTask::DEFAULT_BETA,
    gamma: PlaneTask::DEFAULT_GAMMA,
    proposals: PlaneTask::DEFAULT_PROPOSALS,
};

pub const SIM: Defaults = Defaults {
    lambda: SweepConfig::DEFAULT_LAMBDA,
    beta: SweepConfig::DEFAULT_BETA,
    gamma: HomographyTask::DEFAULT_GAMMA,
    proposals: SweepConfig::DEFAULT_PROPOSALS,
};

#[derive(Debug, Clone)]
pub struct Resolved {
    pub seed: u64,
    pub threads: usize,
    pub solver: SolverConfig,
    pub proposals: usize,
    pub method: Option<Method>,
    pub out: PathBuf,
}

impl Resolved {
    pub fn params(&self) -> Value {
        json!({
            "seed": self.seed,
            "lambda": self.solver.lambda,
            "beta": self.solver.beta,
            "gamma": self.solver.gamma,
            "proposals": self.proposals,
            "inner_iterations": self.solver.inner_iterations,
            "max_outer": self.solver.max_outer,
        })
    }
}

/// Resolves the settings and sizes the global thread pool.
pub fn resolve(args: &SolverArgs, file: &FileConfig, d: Defaults) -> Result<Resolved, CliError> {
    let r = resolve_without_pool(args, file, d)?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(r.threads)
        .build_global()
        .map_err(|e| CliError::Runtime(format!("thread pool: {e}")))?;
    Ok(r)
}

pub fn resolve_without_pool(args: &SolverArgs, file: &FileConfig, d: Defaults) -> Result<Resolved, CliError> {
    let base = SolverConfig::default();
    let seed = args.seed.or(file.seed).unwrap_or(0);
    let solver = SolverConfig {
        lambda: args.lambda.or(file.lambda).unwrap_or(d.lambda),
        beta: args.beta.or(file.beta).unwrap_or(d.beta),
        gamma: args.gamma.or(file.gamma).unwrap_or(d.gamma),
        inner_iterations: args.inner_iters.or(file.inner_iters).unwrap_or(base.inner_iterations),
        max_outer: args.max_outer.or(file.max_outer).unwrap_or(base.max_outer),
        seed,
        ..base
    };
    solver.validate().map_err(|e| CliError::Input(e.to_string()))?;
    let proposals = args.proposals.or(file.proposals).unwrap_or(d.proposals);
    if proposals == 0 {
        return Err(CliError::Input("--proposals must be at least 1".into()));
    }
    if solver.inner_iterations == 0 || solver.max_outer == 0 {
        return Err(CliError::Input("--inner-iters and --max-outer must be at least 1".into()));
    }
    Ok(Resolved {
        seed,
        threads: args.threads.or(file.threads).unwrap_or(0),
        solver,
        proposals,
        method: args.method.or(file.method),
        out: args.out.clone().or(file.out.clone()).unwrap_or_else(|| PathBuf::from("out")),
    })
}

pub fn positive(name: &str, v: f64) -> Result<f64, CliError> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(CliError::Input(format!("{name} must be positive and finite, got {v}")))
    }
}

/// The default table of every subcommand, recorded in each summary.
pub fn defaults_json() -> Value {
    let base = SolverConfig::default();
    let row = |d: Defaults| {
        json!({
            "lambda": d.lambda,
            "beta": d.beta,
            "gamma": d.gamma,
            "proposals": d.proposals,
            "inner_iterations": base.inner_iterations,
            "max_outer": base.max_outer,
        })
    };
    let mut homography = row(HOMOGRAPHY);
    homography["k"] = json!(HomographyTask::DEFAULT_K);
    homography["sigma_pixel"] = json!(1.0);
    let mut planes = row(PLANES);
    planes["edge_alpha"] = json!(PlaneTask::DEFAULT_EDGE_ALPHA);
    planes["sigma_xi"] = json!(PlaneTask::sigma_xi_for(
        PlaneTask::DEFAULT_SIGMA_DEPTH,
        PlaneTask::DEFAULT_MEAN_DEPTH
    ));
    let sweep = SweepConfig::default();
    let mut sim = row(SIM);
    sim["trials"] = json!(sweep.trials);
    sim["min_sigma_pixel"] = json!(sweep.min_sigma_pixel);
    json!({ "homography": homography, "planes": planes, "sim": sim })
}
