use clap::Args;
use coral_core::pipelines::Method;
use coral_core::simworld::{run_noise_sweep, run_outlier_sweep, summarize, SimConfig, SweepConfig, SweepRow};
use serde_json::{json, Value};

use crate::config::{self, SolverArgs};
use crate::output::Outputs;
use crate::CliError;

pub const SWEEP_HEADER: &str = "sweep,method,sweep_value,trial,me";

#[derive(Args, Debug)]
pub struct SimArgs {
    #[command(flatten)]
    pub common: SolverArgs,
    /// Which sweep to run: noise, outliers or both [default: both]
    #[arg(long, value_parser = ["noise", "outliers", "both"])]
    pub sweep: Option<String>,
    /// Pixel noise levels of the noise sweep [default: 0.5,1.0,1.5]
    #[arg(long, value_delimiter = ',')]
    pub sigmas: Option<Vec<f64>>,
    /// Outliers per inlier in the outlier sweep [default: 0,0.2,0.4,0.6]
    #[arg(long, value_delimiter = ',')]
    pub ratios: Option<Vec<f64>>,
    /// Pixel noise during the outlier sweep [default: 1.0]
    #[arg(long)]
    pub outlier_sigma: Option<f64>,
    /// Simulated scenes per sweep value and method [default: 10]
    #[arg(long)]
    pub trials: Option<usize>,
    /// Correspondences on each of the three planes [default: 100]
    #[arg(long)]
    pub points_per_plane: Option<usize>,
    /// Smallest pixel noise assumed by the fitting cost [default: 0.5]
    #[arg(long)]
    pub min_sigma_pixel: Option<f64>,
}

fn check_values(name: &str, values: &[f64]) -> Result<(), CliError> {
    if values.is_empty() || values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(CliError::Input(format!("--{name} needs nonnegative finite values")));
    }
    Ok(())
}

pub fn run(args: SimArgs) -> Result<(), CliError> {
    let file = config::load_file(args.common.config.as_deref())?;
    let r = config::resolve(&args.common, &file, config::SIM)?;
    let defaults = SweepConfig::default();
    let sweep = args.sweep.or(file.sweep).unwrap_or_else(|| "both".into());
    if !matches!(sweep.as_str(), "noise" | "outliers" | "both") {
        return Err(CliError::Input(format!("unknown sweep {sweep:?}")));
    }
    let sigmas = args.sigmas.or(file.sigmas).unwrap_or_else(|| vec![0.5, 1.0, 1.5]);
    let ratios = args.ratios.or(file.ratios).unwrap_or_else(|| vec![0.0, 0.2, 0.4, 0.6]);
    let outlier_sigma = args.outlier_sigma.or(file.outlier_sigma).unwrap_or(1.0);
    check_values("sigmas", &sigmas)?;
    check_values("ratios", &ratios)?;
    check_values("outlier-sigma", &[outlier_sigma])?;
    let trials = args.trials.or(file.trials).unwrap_or(defaults.trials);
    let points_per_plane = args.points_per_plane.or(file.points_per_plane).unwrap_or(100);
    let min_sigma_pixel = config::positive(
        "--min-sigma-pixel",
        args.min_sigma_pixel.or(file.min_sigma_pixel).unwrap_or(defaults.min_sigma_pixel),
    )?;
    if trials == 0 || points_per_plane < 4 {
        return Err(CliError::Input("--trials must be >= 1 and --points-per-plane >= 4".into()));
    }
    let methods = match r.method {
        Some(m) => vec![m],
        None => vec![Method::Coral, Method::Ransac],
    };
    let mut cfg = SweepConfig {
        scene: SimConfig {
            points_per_plane,
            ..Default::default()
        },
        trials,
        methods: methods.clone(),
        seed: r.seed,
        lambda: r.solver.lambda,
        beta: r.solver.beta,
        gamma: r.solver.gamma,
        proposals: r.proposals,
        inner_iterations: r.solver.inner_iterations,
        max_outer: r.solver.max_outer,
        min_sigma_pixel,
    };

    let runtime = |e: coral_core::simworld::SimError| CliError::Runtime(e.to_string());
    let mut tagged: Vec<(&str, Vec<SweepRow>)> = Vec::new();
    if sweep != "outliers" {
        tagged.push(("noise", run_noise_sweep(&sigmas, &cfg).map_err(runtime)?));
    }
    if sweep != "noise" {
        cfg.scene.sigma_pixel = outlier_sigma;
        tagged.push(("outliers", run_outlier_sweep(&ratios, &cfg).map_err(runtime)?));
    }

    let mut rows = Vec::new();
    let mut cells = Vec::new();
    for (name, table) in &tagged {
        for row in table {
            rows.push(format!("{name},{},{},{},{}", row.method, row.sweep_value, row.trial, row.me));
        }
        for c in summarize(table) {
            cells.push(json!({
                "sweep": name,
                "method": c.method,
                "sweep_value": c.sweep_value,
                "trials": c.trials,
                "mean": c.mean,
                "std": c.std,
            }));
        }
    }
    let mut params: Value = r.params();
    params["sweep"] = json!(sweep);
    params["methods"] = json!(methods);
    params["trials"] = json!(trials);
    params["points_per_plane"] = json!(points_per_plane);
    params["min_sigma_pixel"] = json!(min_sigma_pixel);
    params["scene"] = json!(cfg.scene);
    if sweep != "outliers" {
        params["sigmas"] = json!(sigmas);
    }
    if sweep != "noise" {
        params["ratios"] = json!(ratios);
        params["outlier_sigma"] = json!(outlier_sigma);
    }

    let mut out = Outputs::default();
    out.csv("sweep.csv", SWEEP_HEADER, &rows);
    out.json(
        "summary.json",
        json!({
            "command": "sim",
            "params": params,
            "defaults": config::defaults_json(),
            "cells": cells,
        }),
        &["command", "params", "defaults", "cells"],
    );
    out.commit(&r.out)?;
    for c in &cells {
        eprintln!(
            "{} {} {} mean ME {:.4} (std {:.4})",
            c["sweep"].as_str().unwrap_or(""),
            c["method"].as_str().unwrap_or(""),
            c["sweep_value"],
            c["mean"].as_f64().unwrap_or(f64::NAN),
            c["std"].as_f64().unwrap_or(f64::NAN)
        );
    }
    Ok(())
}
