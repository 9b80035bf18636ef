//! End-to-end fitting for two-view homographies and RGB-D planes.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    estimate_homography_dlt, fit_plane, homography_cost, plane_cost, Correspondence, Homography, InverseDepthPlane,
    Vec2,
};
use crate::neighborhood::{build_grid4, build_knn_auto, NeighborhoodGraph, PenaltyNorm};
use crate::proposals::ProposalConfig;
use crate::solver::{
    coral_fit, hard_energy, sequential_ransac_fit, CostMatrix, FitError, FitResult, Label, ModelProblem,
    RansacConfig, SolverConfig,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PipelineError {
    #[error("need at least {needed} correspondences, got {got}")]
    TooFewCorrespondences { needed: usize, got: usize },
    #[error("input contains non-finite values")]
    NonFinite,
    #[error("image dimensions disagree: {0}")]
    DimensionMismatch(String),
    #[error("no pixel has a valid depth")]
    AllDepthInvalid,
    #[error("invalid task: {0}")]
    InvalidTask(String),
    #[error(transparent)]
    Fit(#[from] FitError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    #[default]
    Coral,
    Ransac,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Coral => "coral",
            Method::Ransac => "ransac",
        })
    }
}

/// Hypotheses per sequential-RANSAC round.
pub const RANSAC_ITERATIONS: usize = 1000;

#[derive(Debug, Clone, PartialEq)]
pub struct HomographyTask {
    pub correspondences: Vec<Correspondence>,
    pub sigma_pixel: f64,
    /// Neighbors per keypoint in the smoothness graph.
    pub k: usize,
    pub solver: SolverConfig,
    pub proposals: usize,
    pub method: Method,
}

impl HomographyTask {
    pub const DEFAULT_LAMBDA: f64 = 0.5;
    pub const DEFAULT_BETA: f64 = 100.0;
    pub const DEFAULT_GAMMA: f64 = 20.0;
    pub const DEFAULT_K: usize = 4;
    pub const DEFAULT_PROPOSALS: usize = 100;

    pub fn new(correspondences: Vec<Correspondence>) -> Self {
        Self {
            correspondences,
            sigma_pixel: 1.0,
            k: Self::DEFAULT_K,
            solver: SolverConfig {
                lambda: Self::DEFAULT_LAMBDA,
                beta: Self::DEFAULT_BETA,
                gamma: Self::DEFAULT_GAMMA,
                ..Default::default()
            },
            proposals: Self::DEFAULT_PROPOSALS,
            method: Method::Coral,
        }
    }
}

/// Correspondences under the symmetric transfer cost.
pub struct HomographyProblem<'a> {
    matches: &'a [Correspondence],
    sigma_pixel: f64,
}

impl<'a> HomographyProblem<'a> {
    pub fn new(matches: &'a [Correspondence], sigma_pixel: f64) -> Self {
        Self { matches, sigma_pixel }
    }
}

impl ModelProblem for HomographyProblem<'_> {
    type Model = Homography;

    fn len(&self) -> usize {
        self.matches.len()
    }

    fn sample_size(&self) -> usize {
        4
    }

    fn estimate(&self, points: &[usize]) -> Option<Homography> {
        let sel: Vec<Correspondence> = points.iter().map(|&i| self.matches[i]).collect();
        estimate_homography_dlt(&sel).ok()
    }

    fn cost(&self, model: &Homography, point: usize) -> f64 {
        homography_cost(&self.matches[point], model, self.sigma_pixel)
    }

    fn distance(&self, a: &Homography, b: &Homography) -> f64 {
        a.distance(b)
    }

    fn position(&self, point: usize) -> Vec2 {
        self.matches[point].u1
    }
}

/// Multi-homography segmentation over a kNN graph on view-1 keypoints.
///
/// The input is processed in a canonical order (sorted by coordinates), so
/// the labeling does not depend on the order of the correspondences.
pub fn run_homography_segmentation(task: &HomographyTask) -> Result<FitResult<Homography>, PipelineError> {
    let n = task.correspondences.len();
    if n < 4 {
        return Err(PipelineError::TooFewCorrespondences { needed: 4, got: n });
    }
    if task.correspondences.iter().any(|c| !c.is_finite()) {
        return Err(PipelineError::NonFinite);
    }
    if task.k == 0 {
        return Err(PipelineError::InvalidTask("k must be at least 1".into()));
    }
    if !(task.sigma_pixel > 0.0) || !task.sigma_pixel.is_finite() {
        return Err(PipelineError::InvalidTask("sigma_pixel must be positive".into()));
    }
    task.solver.validate()?;

    let mut order: Vec<usize> = (0..n).collect();
    let key = |c: &Correspondence| [c.u1.x, c.u1.y, c.u2.x, c.u2.y];
    order.sort_by(|&a, &b| {
        let (ka, kb) = (key(&task.correspondences[a]), key(&task.correspondences[b]));
        ka.iter()
            .zip(&kb)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let sorted: Vec<Correspondence> = order.iter().map(|&i| task.correspondences[i]).collect();
    let problem = HomographyProblem::new(&sorted, task.sigma_pixel);
    let positions: Vec<Vec2> = sorted.iter().map(|c| c.u1).collect();
    let graph = build_knn_auto(&positions, task.k);
    let proposals = ProposalConfig {
        count: task.proposals,
        inlier_threshold: task.solver.gamma,
        seed: task.solver.seed,
        local_radius: None,
        ..Default::default()
    };

    let fit = run_method(&problem, &graph, PenaltyNorm::L11, &task.solver, &proposals, task.method)?;
    let mut labels = vec![Label::OUTLIER; n];
    for (k, &i) in order.iter().enumerate() {
        labels[i] = fit.labels[k];
    }
    Ok(FitResult { labels, ..fit })
}

fn run_method<P: ModelProblem>(
    problem: &P,
    graph: &NeighborhoodGraph,
    norm: PenaltyNorm,
    cfg: &SolverConfig,
    proposals: &ProposalConfig,
    method: Method,
) -> Result<FitResult<P::Model>, PipelineError> {
    if proposals.count == 0 {
        return Err(PipelineError::InvalidTask("proposal count must be at least 1".into()));
    }
    let mut fit = match method {
        Method::Coral => match coral_fit(problem, graph, norm, cfg, proposals) {
            Ok(fit) => fit,
            Err(FitError::NoModelsProposed) => FitResult::all_outliers(problem.len()),
            Err(e) => return Err(e.into()),
        },
        Method::Ransac => {
            let mut fit = sequential_ransac_fit(
                problem,
                &RansacConfig {
                    iterations: RANSAC_ITERATIONS,
                    threshold: cfg.gamma,
                    min_support: None,
                    seed: cfg.seed,
                },
            );
            for (i, l) in fit.labels.iter_mut().enumerate() {
                if problem.forced_outlier(i) {
                    *l = Label::OUTLIER;
                }
            }
            fit
        }
    };
    if fit.energy_trace.is_empty() {
        let cost = CostMatrix::build(problem, &fit.models, cfg.gamma);
        fit.energy_trace.push(hard_energy(&fit.labels, &cost, graph, norm, cfg).map_err(FitError::from)?);
    }
    Ok(fit)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlaneTask {
    pub width: usize,
    pub height: usize,
    /// Row-major inverse depth in 1/m; zero or non-finite marks an invalid pixel.
    pub inv_depth: Vec<f64>,
    /// Row-major intensity in `[0, 1]`.
    pub intensity: Vec<f64>,
    pub sigma_xi: f64,
    /// Sharpness of the intensity edge weights.
    pub edge_alpha: f64,
    pub solver: SolverConfig,
    pub proposals: usize,
    /// Sampling radius in pixels; `None` samples globally.
    pub local_radius: Option<f64>,
    pub method: Method,
}

impl PlaneTask {
    pub const DEFAULT_LAMBDA: f64 = 1.0;
    pub const DEFAULT_BETA: f64 = 5000.0;
    pub const DEFAULT_GAMMA: f64 = 9.0;
    pub const DEFAULT_EDGE_ALPHA: f64 = 10.0;
    pub const DEFAULT_PROPOSALS: usize = 200;
    pub const DEFAULT_SIGMA_DEPTH: f64 = 0.02;
    pub const DEFAULT_MEAN_DEPTH: f64 = 2.0;
    /// Local sampling radius as a fraction of the image diagonal.
    pub const DEFAULT_RADIUS_FRACTION: f64 = 0.1;

    /// First-order inverse-depth noise for depth noise `sigma_depth` at
    /// typical depth `mean_depth`.
    pub fn sigma_xi_for(sigma_depth: f64, mean_depth: f64) -> f64 {
        sigma_depth / (mean_depth * mean_depth)
    }

    pub fn new(width: usize, height: usize, inv_depth: Vec<f64>, intensity: Vec<f64>) -> Self {
        let diag = ((width * width + height * height) as f64).sqrt();
        Self {
            width,
            height,
            inv_depth,
            intensity,
            sigma_xi: Self::sigma_xi_for(Self::DEFAULT_SIGMA_DEPTH, Self::DEFAULT_MEAN_DEPTH),
            edge_alpha: Self::DEFAULT_EDGE_ALPHA,
            solver: SolverConfig {
                lambda: Self::DEFAULT_LAMBDA,
                beta: Self::DEFAULT_BETA,
                gamma: Self::DEFAULT_GAMMA,
                ..Default::default()
            },
            proposals: Self::DEFAULT_PROPOSALS,
            local_radius: Some((Self::DEFAULT_RADIUS_FRACTION * diag).max(2.0)),
            method: Method::Coral,
        }
    }
}

/// Pixels with inverse depth under the plane cost; invalid pixels cost the
/// outlier value under every model and are never sampled.
pub struct PlaneProblem<'a> {
    width: usize,
    inv_depth: &'a [f64],
    sigma_xi: f64,
    gamma: f64,
    diag: f64,
}

impl<'a> PlaneProblem<'a> {
    pub fn new(width: usize, height: usize, inv_depth: &'a [f64], sigma_xi: f64, gamma: f64) -> Self {
        Self {
            width,
            inv_depth,
            sigma_xi,
            gamma,
            diag: ((width * width + height * height) as f64).sqrt(),
        }
    }

    fn valid(&self, i: usize) -> bool {
        let v = self.inv_depth[i];
        v > 0.0 && v.is_finite()
    }

    fn pixel(&self, i: usize) -> Vec2 {
        Vec2::new((i % self.width) as f64, (i / self.width) as f64)
    }
}

impl ModelProblem for PlaneProblem<'_> {
    type Model = InverseDepthPlane;

    fn len(&self) -> usize {
        self.inv_depth.len()
    }

    fn sample_size(&self) -> usize {
        3
    }

    fn estimate(&self, points: &[usize]) -> Option<InverseDepthPlane> {
        let data: Vec<(Vec2, f64)> = points
            .iter()
            .filter(|&&i| self.valid(i))
            .map(|&i| (self.pixel(i), self.inv_depth[i]))
            .collect();
        fit_plane(&data, None).ok()
    }

    fn cost(&self, model: &InverseDepthPlane, point: usize) -> f64 {
        plane_cost(&self.pixel(point), self.inv_depth[point], model, self.sigma_xi).unwrap_or(self.gamma)
    }

    fn distance(&self, a: &InverseDepthPlane, b: &InverseDepthPlane) -> f64 {
        a.distance(b, self.diag)
    }

    fn position(&self, point: usize) -> Vec2 {
        self.pixel(point)
    }

    fn is_sampleable(&self, point: usize) -> bool {
        self.valid(point)
    }

    fn forced_outlier(&self, point: usize) -> bool {
        !self.valid(point)
    }
}

/// Per-edge weights `exp(-edge_alpha * |I(dst) - I(src)|)` in the edge order
/// of [`build_grid4`]. Intensities are clamped to `[0, 1]`.
pub fn edge_weights(width: usize, height: usize, intensity: &[f64], edge_alpha: f64) -> Result<Vec<f64>, PipelineError> {
    if intensity.len() != width * height {
        return Err(PipelineError::DimensionMismatch(format!(
            "{width}x{height} image with {} intensities",
            intensity.len()
        )));
    }
    if intensity.iter().any(|v| !v.is_finite()) {
        return Err(PipelineError::NonFinite);
    }
    if !(edge_alpha >= 0.0) || !edge_alpha.is_finite() {
        return Err(PipelineError::InvalidTask("edge_alpha must be finite and nonnegative".into()));
    }
    let i = |p: usize| intensity[p].clamp(0.0, 1.0);
    Ok(build_grid4(width, height)
        .edges()
        .iter()
        .map(|e| (-edge_alpha * (i(e.dst) - i(e.src)).abs()).exp())
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlaneSegmentation {
    pub fit: FitResult<InverseDepthPlane>,
    /// Row-major label image: model index, or -1 for outliers.
    pub label_image: Vec<i32>,
}

pub fn run_plane_segmentation(task: &PlaneTask) -> Result<PlaneSegmentation, PipelineError> {
    let n = task.width * task.height;
    if n == 0 {
        return Err(PipelineError::InvalidTask("image must not be empty".into()));
    }
    if task.inv_depth.len() != n {
        return Err(PipelineError::DimensionMismatch(format!(
            "{}x{} image with {} depth values",
            task.width,
            task.height,
            task.inv_depth.len()
        )));
    }
    if task.inv_depth.iter().any(|v| *v < 0.0) {
        return Err(PipelineError::InvalidTask("inverse depth must be nonnegative".into()));
    }
    if !(task.sigma_xi > 0.0) || !task.sigma_xi.is_finite() {
        return Err(PipelineError::InvalidTask("sigma_xi must be positive".into()));
    }
    if matches!(task.local_radius, Some(r) if !(r > 0.0)) {
        return Err(PipelineError::InvalidTask("local radius must be positive".into()));
    }
    task.solver.validate()?;
    let weights = edge_weights(task.width, task.height, &task.intensity, task.edge_alpha)?;
    let problem = PlaneProblem::new(task.width, task.height, &task.inv_depth, task.sigma_xi, task.solver.gamma);
    if !(0..n).any(|i| problem.valid(i)) {
        return Err(PipelineError::AllDepthInvalid);
    }
    let graph = build_grid4(task.width, task.height)
        .with_weights(&weights)
        .expect("weights are finite and match the grid");
    let proposals = ProposalConfig {
        count: task.proposals,
        inlier_threshold: task.solver.gamma,
        seed: task.solver.seed,
        local_radius: task.local_radius,
        ..Default::default()
    };
    let fit = run_method(&problem, &graph, PenaltyNorm::L12, &task.solver, &proposals, task.method)?;
    let label_image = fit.labels.iter().map(|l| l.raw()).collect();
    Ok(PlaneSegmentation { fit, label_image })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Matrix3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn homography_scene(seed: u64, h: &Homography, n: usize) -> Vec<Correspondence> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|id| {
                let u1 = Vec2::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0));
                Correspondence::new(u1, h.transfer(&u1).unwrap(), id)
            })
            .collect()
    }

    fn sample_h() -> Homography {
        Homography::new(Matrix3::new(1.02, 0.01, 5.0, -0.02, 0.98, -3.0, 1e-5, 2e-5, 1.0)).unwrap()
    }

    #[test]
    fn single_exact_homography() {
        let task = HomographyTask::new(homography_scene(1, &sample_h(), 60));
        let fit = run_homography_segmentation(&task).unwrap();
        assert_eq!(fit.models.len(), 1);
        assert!(fit.labels.iter().all(|l| *l == Label::model(0)));
        assert!(fit.models[0].distance(&sample_h()) < 1e-6);
    }

    #[test]
    fn zero_gamma_labels_everything_outlier() {
        let mut task = HomographyTask::new(homography_scene(2, &sample_h(), 30));
        task.solver.gamma = 0.0;
        let fit = run_homography_segmentation(&task).unwrap();
        assert!(fit.labels.iter().all(|l| l.is_outlier()));
    }

    #[test]
    fn permutation_invariance() {
        let mut matches = homography_scene(3, &sample_h(), 40);
        let other = Homography::new(Matrix3::new(0.9, 0.0, 40.0, 0.0, 1.1, 10.0, 0.0, 0.0, 1.0)).unwrap();
        matches.extend(homography_scene(4, &other, 40).into_iter().map(|mut c| {
            c.u1.x = c.u1.x * 0.3 + 440.0;
            c.u2 = other.transfer(&c.u1).unwrap();
            c
        }));
        let task = HomographyTask::new(matches.clone());
        let base = run_homography_segmentation(&task).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut perm: Vec<usize> = (0..matches.len()).collect();
        for i in (1..perm.len()).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let shuffled = HomographyTask::new(perm.iter().map(|&i| matches[i]).collect());
        let fit = run_homography_segmentation(&shuffled).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            assert_eq!(fit.labels[k], base.labels[i]);
        }
    }

    #[test]
    fn edge_weight_cases() {
        assert!(edge_weights(3, 3, &[0.4; 9], 10.0).unwrap().iter().all(|w| *w == 1.0));
        let w = edge_weights(2, 1, &[0.0, 1.0], 2.0).unwrap();
        assert!((w[0] - (-2.0f64).exp()).abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let img: Vec<f64> = (0..100).map(|_| rng.random()).collect();
        assert!(edge_weights(10, 10, &img, 10.0).unwrap().iter().all(|w| *w > 0.0 && *w <= 1.0));
    }

    #[test]
    fn fronto_parallel_plane() {
        let (w, h) = (24, 18);
        let mut task = PlaneTask::new(w, h, vec![0.5; w * h], vec![0.5; w * h]);
        task.solver.beta = 50.0;
        let seg = run_plane_segmentation(&task).unwrap();
        assert_eq!(seg.fit.models.len(), 1);
        assert!(seg.label_image.iter().all(|l| *l == 0));
    }

    #[test]
    fn invalid_depth_never_labeled() {
        let (w, h) = (20, 15);
        let mut depth = vec![0.4; w * h];
        for i in (0..w * h).step_by(7) {
            depth[i] = 0.0;
        }
        let mut task = PlaneTask::new(w, h, depth.clone(), vec![0.5; w * h]);
        task.solver.beta = 50.0;
        let seg = run_plane_segmentation(&task).unwrap();
        for i in 0..w * h {
            if depth[i] == 0.0 {
                assert_eq!(seg.label_image[i], -1);
            } else {
                assert_eq!(seg.label_image[i], 0);
            }
        }
        let empty = PlaneTask::new(w, h, vec![0.0; w * h], vec![0.5; w * h]);
        assert_eq!(run_plane_segmentation(&empty), Err(PipelineError::AllDepthInvalid));
    }
}
