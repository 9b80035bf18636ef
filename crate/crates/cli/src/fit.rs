use std::path::{Path, PathBuf};

use clap::Args;
use coral_core::geometry::{Homography, InverseDepthPlane};
use coral_core::ingest::{
    build_nyu_ground_truth, grid_labels, label_grid, load_correspondences, load_grid, load_rgbd, CorrespondenceData,
    GroundTruthConfig, IngestError, PgmEncoding, RgbdFrame,
};
use coral_core::pipelines::{
    run_homography_segmentation, run_plane_segmentation, HomographyTask, Method, PipelineError, PlaneTask,
};
use coral_core::simworld::matched_agreement;
use coral_core::solver::{FitResult, Label};
use serde_json::{json, Value};

use crate::config::{self, FileConfig, Resolved, SolverArgs};
use crate::output::{trace_rows, Outputs, TRACE_HEADER};
use crate::CliError;

pub fn ingest_error(e: IngestError) -> CliError {
    CliError::Input(e.to_string())
}

pub fn pipeline_error(e: PipelineError) -> CliError {
    match e {
        PipelineError::Fit(f) => CliError::Runtime(f.to_string()),
        other => CliError::Input(other.to_string()),
    }
}

/// Misclassified count against ground truth, after optimal model matching.
pub fn misclassified(pred: &[Label], gt: &[Label]) -> usize {
    gt.len() - matched_agreement(pred, gt)
}

#[derive(Args, Debug)]
pub struct HomographyArgs {
    #[command(flatten)]
    pub common: SolverArgs,
    /// Correspondence CSV (`# width height` header, rows `u1x,u1y,u2x,u2y,label`)
    pub input: PathBuf,
    /// Keypoint noise in pixels used by the transfer cost [default: 1.0]
    #[arg(long)]
    pub sigma_pixel: Option<f64>,
    /// Neighbors per keypoint in the smoothness graph [default: 4]
    #[arg(long)]
    pub k: Option<usize>,
}

pub struct HomographySettings {
    pub sigma_pixel: f64,
    pub k: usize,
}

impl HomographySettings {
    pub fn resolve(sigma_pixel: Option<f64>, k: Option<usize>, file: &FileConfig) -> Result<Self, CliError> {
        let k = k.or(file.k).unwrap_or(HomographyTask::DEFAULT_K);
        if k == 0 {
            return Err(CliError::Input("--k must be at least 1".into()));
        }
        Ok(Self {
            sigma_pixel: config::positive("--sigma-pixel", sigma_pixel.or(file.sigma_pixel).unwrap_or(1.0))?,
            k,
        })
    }
}

pub fn fit_homographies(
    data: &CorrespondenceData,
    r: &Resolved,
    s: &HomographySettings,
) -> Result<FitResult<Homography>, CliError> {
    let mut task = HomographyTask::new(data.correspondences.clone());
    task.sigma_pixel = s.sigma_pixel;
    task.k = s.k;
    task.solver = r.solver.clone();
    task.proposals = r.proposals;
    task.method = r.method.unwrap_or(Method::Coral);
    run_homography_segmentation(&task).map_err(pipeline_error)
}

fn energy_json<M>(fit: &FitResult<M>) -> Value {
    match fit.energy_trace.last() {
        Some(e) => json!({
            "data": e.data,
            "smoothness": e.smoothness,
            "label_cost": e.label_cost,
            "total": e.total(),
        }),
        None => Value::Null,
    }
}

pub fn run_homography(args: HomographyArgs) -> Result<(), CliError> {
    let file = config::load_file(args.common.config.as_deref())?;
    let r = config::resolve(&args.common, &file, config::HOMOGRAPHY)?;
    let s = HomographySettings::resolve(args.sigma_pixel, args.k, &file)?;
    let data = load_correspondences(&args.input).map_err(ingest_error)?;
    let fit = fit_homographies(&data, &r, &s)?;
    let wrong = misclassified(&fit.labels, &data.labels);
    let n = data.labels.len();
    let me = wrong as f64 / n as f64;

    let mut params = r.params();
    params["sigma_pixel"] = json!(s.sigma_pixel);
    params["k"] = json!(s.k);
    let models: Vec<Value> = fit
        .models
        .iter()
        .enumerate()
        .map(|(i, h)| {
            let m = h.matrix();
            let rows: Vec<f64> = (0..3).flat_map(|r| (0..3).map(move |c| m[(r, c)])).collect();
            json!({ "label": i, "h": rows })
        })
        .collect();

    let mut out = Outputs::default();
    out.json(
        "labels.json",
        json!({ "labels": fit.labels.iter().map(|l| l.raw()).collect::<Vec<_>>() }),
        &["labels"],
    );
    out.json("models.json", json!({ "kind": "homography", "models": models }), &["kind", "models"]);
    out.csv("energy_trace.csv", TRACE_HEADER, &trace_rows(&fit.energy_trace));
    out.json(
        "summary.json",
        json!({
            "command": "fit-homography",
            "input": args.input.display().to_string(),
            "method": r.method.unwrap_or(Method::Coral),
            "params": params,
            "defaults": config::defaults_json(),
            "points": n,
            "models": fit.models.len(),
            "outliers": fit.outlier_count(),
            "outer_iterations": fit.iterations,
            "energy": energy_json(&fit),
            "misclassified": wrong,
            "me": me,
        }),
        &["command", "method", "params", "points", "models", "outliers", "energy", "me"],
    );
    out.commit(&r.out)?;
    eprintln!("{} models, {} outliers, ME {me:.4}", fit.models.len(), fit.outlier_count());
    Ok(())
}

#[derive(Args, Debug)]
pub struct PlaneArgs {
    #[command(flatten)]
    pub common: SolverArgs,
    /// Depth grid (PGM with a `# scale <meters-per-unit>` comment)
    #[arg(long)]
    pub depth: PathBuf,
    /// Intensity grid (PGM)
    #[arg(long)]
    pub image: PathBuf,
    /// Ground-truth plane labels (PGM label grid, -1 = outlier) for the ME
    #[arg(long, conflicts_with = "instances")]
    pub labels: Option<PathBuf>,
    /// Object instance labels; ground-truth planes are fitted per instance
    #[arg(long)]
    pub instances: Option<PathBuf>,
    /// Inverse-depth noise, 1/m [default: 0.005, i.e. 2 cm at 2 m]
    #[arg(long)]
    pub sigma_xi: Option<f64>,
    /// Sharpness of the intensity edge weights [default: 10]
    #[arg(long)]
    pub edge_alpha: Option<f64>,
    /// Proposal sampling radius in pixels [default: 10% of the image diagonal]
    #[arg(long)]
    pub local_radius: Option<f64>,
    /// Smallest inlier count of a ground-truth instance plane [default: 500]
    #[arg(long)]
    pub min_inliers: Option<usize>,
    /// Parameter distance under which ground-truth planes merge [default: 0.05]
    #[arg(long)]
    pub merge_tol: Option<f64>,
}

pub struct PlaneSettings {
    pub sigma_xi: f64,
    pub edge_alpha: f64,
    pub local_radius: Option<f64>,
}

impl PlaneSettings {
    pub fn resolve(
        sigma_xi: Option<f64>,
        edge_alpha: Option<f64>,
        local_radius: Option<f64>,
        file: &FileConfig,
    ) -> Result<Self, CliError> {
        let sigma_xi = sigma_xi.or(file.sigma_xi).unwrap_or(PlaneTask::sigma_xi_for(
            PlaneTask::DEFAULT_SIGMA_DEPTH,
            PlaneTask::DEFAULT_MEAN_DEPTH,
        ));
        let edge_alpha = edge_alpha.or(file.edge_alpha).unwrap_or(PlaneTask::DEFAULT_EDGE_ALPHA);
        if !(edge_alpha >= 0.0 && edge_alpha.is_finite()) {
            return Err(CliError::Input("--edge-alpha must be nonnegative".into()));
        }
        let local_radius = match local_radius.or(file.local_radius) {
            Some(v) => Some(config::positive("--local-radius", v)?),
            None => None,
        };
        Ok(Self {
            sigma_xi: config::positive("--sigma-xi", sigma_xi)?,
            edge_alpha,
            local_radius,
        })
    }
}

pub fn fit_planes(
    frame: &RgbdFrame,
    r: &Resolved,
    s: &PlaneSettings,
) -> Result<(FitResult<InverseDepthPlane>, Vec<i32>), CliError> {
    let mut task = PlaneTask::new(frame.width, frame.height, frame.inv_depth.clone(), frame.intensity.clone());
    task.sigma_xi = s.sigma_xi;
    task.edge_alpha = s.edge_alpha;
    if s.local_radius.is_some() {
        task.local_radius = s.local_radius;
    }
    task.solver = r.solver.clone();
    task.proposals = r.proposals;
    task.method = r.method.unwrap_or(Method::Coral);
    let seg = run_plane_segmentation(&task).map_err(pipeline_error)?;
    Ok((seg.fit, seg.label_image))
}

/// Ground-truth labels from a label grid, checked against the frame size.
pub fn load_gt_labels(path: &Path, frame: &RgbdFrame) -> Result<Vec<Label>, CliError> {
    let grid = load_grid(path).map_err(ingest_error)?;
    if (grid.width, grid.height) != (frame.width, frame.height) {
        return Err(CliError::Input(format!(
            "{}: {}x{} labels for a {}x{} frame",
            path.display(),
            grid.width,
            grid.height,
            frame.width,
            frame.height
        )));
    }
    grid_labels(&grid)
        .into_iter()
        .map(|v| Label::from_raw(v).ok_or_else(|| CliError::Input(format!("{}: label {v} below -1", path.display()))))
        .collect()
}

pub fn run_planes(args: PlaneArgs) -> Result<(), CliError> {
    let file = config::load_file(args.common.config.as_deref())?;
    let r = config::resolve(&args.common, &file, config::PLANES)?;
    let s = PlaneSettings::resolve(args.sigma_xi, args.edge_alpha, args.local_radius, &file)?;
    let frame = load_rgbd(&args.depth, &args.image, args.instances.as_deref()).map_err(ingest_error)?;
    let gt: Option<Vec<Label>> = match (&args.labels, &args.instances) {
        (Some(p), _) => Some(load_gt_labels(p, &frame)?),
        (None, Some(_)) => {
            let cfg = GroundTruthConfig {
                min_inliers: args.min_inliers.or(file.min_inliers).unwrap_or(500),
                merge_tol: args.merge_tol.or(file.merge_tol).unwrap_or(0.05),
                sigma_xi: s.sigma_xi,
                seed: r.seed,
                ..Default::default()
            };
            Some(build_nyu_ground_truth(&frame, &cfg).map_err(ingest_error)?.labels)
        }
        (None, None) => None,
    };
    let (fit, label_image) = fit_planes(&frame, &r, &s)?;
    let n = label_image.len();
    let wrong = gt.as_ref().map(|g| misclassified(&fit.labels, g));

    let mut params = r.params();
    params["sigma_xi"] = json!(s.sigma_xi);
    params["edge_alpha"] = json!(s.edge_alpha);
    params["local_radius"] = json!(s.local_radius);
    let models: Vec<Value> = fit
        .models
        .iter()
        .enumerate()
        .map(|(i, p)| json!({ "label": i, "w": [p.w.x, p.w.y], "c": p.c }))
        .collect();

    let mut out = Outputs::default();
    let grid = label_grid(frame.width, frame.height, &label_image).map_err(|e| CliError::Runtime(e.to_string()))?;
    out.pgm("labels.pgm", &grid, PgmEncoding::Ascii);
    out.json("models.json", json!({ "kind": "plane", "models": models }), &["kind", "models"]);
    out.csv("energy_trace.csv", TRACE_HEADER, &trace_rows(&fit.energy_trace));
    out.json(
        "summary.json",
        json!({
            "command": "fit-planes",
            "depth": args.depth.display().to_string(),
            "image": args.image.display().to_string(),
            "method": r.method.unwrap_or(Method::Coral),
            "params": params,
            "defaults": config::defaults_json(),
            "width": frame.width,
            "height": frame.height,
            "models": fit.models.len(),
            "outliers": fit.outlier_count(),
            "outer_iterations": fit.iterations,
            "energy": energy_json(&fit),
            "misclassified": wrong,
            "me": wrong.map(|w| w as f64 / n as f64),
        }),
        &["command", "method", "params", "models", "outliers", "energy", "me"],
    );
    out.commit(&r.out)?;
    match wrong {
        Some(w) => eprintln!(
            "{} planes, {} outlier pixels, ME {:.4}",
            fit.models.len(),
            fit.outlier_count(),
            w as f64 / n as f64
        ),
        None => eprintln!("{} planes, {} outlier pixels", fit.models.len(), fit.outlier_count()),
    }
    Ok(())
}
