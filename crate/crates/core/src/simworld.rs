//! Synthetic scenes: three orthogonal planar patches seen by two pinhole
//! cameras, a two-plane depth wedge, and the misclassification error used to
//! score labelings against ground truth.

use nalgebra::{Matrix3, Matrix3x4, Matrix4, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Correspondence, Homography, InverseDepthPlane, Vec2};
use crate::pipelines::{run_homography_segmentation, HomographyTask, Method};
use crate::solver::Label;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("label sequences differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("rays are parallel; the point cannot be triangulated")]
    DegenerateRays,
    #[error("invalid simulation setting: {0}")]
    InvalidConfig(String),
    #[error("could not place {0} visible points")]
    Placement(usize),
}

/// Pinhole camera: `x = K R (X - C)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    pub k: Matrix3<f64>,
    /// World-to-camera rotation.
    pub r: Matrix3<f64>,
    pub center: Vector3<f64>,
    pub width: f64,
    pub height: f64,
}

impl Camera {
    /// Camera at `center` looking at `target` with world `z` up.
    pub fn look_at(center: Vector3<f64>, target: Vector3<f64>, k: Matrix3<f64>, width: f64, height: f64) -> Self {
        let fwd = (target - center).normalize();
        let up = Vector3::z();
        let right = fwd.cross(&up).normalize();
        let down = fwd.cross(&right);
        let r = Matrix3::from_rows(&[right.transpose(), down.transpose(), fwd.transpose()]);
        Self {
            k,
            r,
            center,
            width,
            height,
        }
    }

    pub fn to_camera(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.r * (x - self.center)
    }

    /// Pixel of a world point in front of the camera.
    pub fn project(&self, x: &Vector3<f64>) -> Option<Vec2> {
        let xc = self.to_camera(x);
        if xc.z <= 1e-9 {
            return None;
        }
        let p = self.k * xc;
        Some(Vec2::new(p.x / p.z, p.y / p.z))
    }

    pub fn in_bounds(&self, u: &Vec2) -> bool {
        u.x >= 0.0 && u.y >= 0.0 && u.x < self.width && u.y < self.height
    }

    pub fn projection(&self) -> Matrix3x4<f64> {
        let mut rt = Matrix3x4::zeros();
        rt.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.r);
        rt.set_column(3, &(-self.r * self.center));
        self.k * rt
    }

    /// Unit direction of the ray through pixel `u`, in world coordinates.
    pub fn ray(&self, u: &Vec2) -> Option<Vector3<f64>> {
        let kinv = self.k.try_inverse()?;
        Some((self.r.transpose() * (kinv * Vector3::new(u.x, u.y, 1.0))).normalize())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub points_per_plane: usize,
    pub sigma_pixel: f64,
    /// Outliers per inlier.
    pub outlier_ratio: f64,
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    /// Side of each square patch, meters.
    pub patch_side: f64,
    /// Camera distance from the look-at target, meters.
    pub distance: f64,
    /// Angle between the two viewing directions, degrees.
    pub baseline_deg: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            points_per_plane: 100,
            sigma_pixel: 0.0,
            outlier_ratio: 0.0,
            width: 640,
            height: 480,
            focal: 525.0,
            patch_side: 2.0,
            distance: 4.0,
            baseline_deg: 30.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimSample {
    pub correspondences: Vec<Correspondence>,
    /// Plane index per correspondence, or outlier.
    pub labels: Vec<Label>,
    pub points: Vec<Vector3<f64>>,
    /// View-1 to view-2 homography per plane.
    pub homographies: Vec<Homography>,
    pub cameras: [Camera; 2],
}

/// World normals of the three patches: walls `x = 0`, `y = 0` and floor `z = 0`.
pub const PLANE_NORMALS: [[f64; 3]; 3] = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

fn scene_cameras(cfg: &SimConfig, rng: &mut ChaCha8Rng) -> [Camera; 2] {
    let half = cfg.patch_side / 2.0;
    let target = Vector3::new(0.35, 0.35, 0.35) * cfg.patch_side
        + Vector3::new(rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05))
            * half;
    let azimuth = (45.0f64 + rng.random_range(-5.0..5.0)).to_radians();
    let elevation = (35.0f64 + rng.random_range(-5.0..5.0)).to_radians();
    let spread = cfg.baseline_deg.to_radians() / 2.0;
    let (w, h) = (cfg.width as f64, cfg.height as f64);
    let k = Matrix3::new(cfg.focal, 0.0, w / 2.0, 0.0, cfg.focal, h / 2.0, 0.0, 0.0, 1.0);
    let place = |az: f64| {
        let dir = Vector3::new(elevation.cos() * az.cos(), elevation.cos() * az.sin(), elevation.sin());
        Camera::look_at(target + dir * cfg.distance, target, k, w, h)
    };
    [place(azimuth - spread), place(azimuth + spread)]
}

/// Homography induced by the world plane `n . X = d` from camera `a` to `b`.
pub fn plane_homography(a: &Camera, b: &Camera, normal: &Vector3<f64>, d: f64) -> Option<Homography> {
    // Plane in camera-a coordinates: n_a . X_a = d_a.
    let n_a = a.r * normal;
    let d_a = d - normal.dot(&a.center);
    if d_a.abs() < 1e-12 {
        return None;
    }
    let rot = b.r * a.r.transpose();
    let t = b.r * (a.center - b.center);
    let h = b.k * (rot + t * n_a.transpose() / d_a) * a.k.try_inverse()?;
    Homography::new(h).ok()
}

fn visible(cams: &[Camera; 2], x: &Vector3<f64>) -> Option<(Vec2, Vec2)> {
    let u1 = cams[0].project(x)?;
    let u2 = cams[1].project(x)?;
    (cams[0].in_bounds(&u1) && cams[1].in_bounds(&u2)).then_some((u1, u2))
}

/// Samples the three-patch scene. Equal seeds give bit-identical samples.
pub fn generate_scene(cfg: &SimConfig, seed: u64) -> Result<SimSample, SimError> {
    if !(cfg.sigma_pixel >= 0.0) || !cfg.sigma_pixel.is_finite() {
        return Err(SimError::InvalidConfig("sigma_pixel must be finite and nonnegative".into()));
    }
    if !(cfg.outlier_ratio >= 0.0) || !cfg.outlier_ratio.is_finite() {
        return Err(SimError::InvalidConfig("outlier_ratio must be finite and nonnegative".into()));
    }
    if !(cfg.patch_side > 0.0 && cfg.distance > 0.0 && cfg.focal > 0.0) || cfg.width == 0 || cfg.height == 0 {
        return Err(SimError::InvalidConfig("geometry parameters must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cams = scene_cameras(cfg, &mut rng);
    let side = cfg.patch_side;
    let max_tries = 1000 * (cfg.points_per_plane + 1);

    let mut points = Vec::new();
    let mut clean = Vec::new();
    let mut labels = Vec::new();
    for (p, n) in PLANE_NORMALS.iter().enumerate() {
        let axis = n.iter().position(|v| *v != 0.0).expect("axis normal");
        let mut placed = 0;
        let mut tries = 0;
        while placed < cfg.points_per_plane {
            tries += 1;
            if tries > max_tries {
                return Err(SimError::Placement(cfg.points_per_plane));
            }
            let mut x = Vector3::new(rng.random_range(0.0..side), rng.random_range(0.0..side), rng.random_range(0.0..side));
            x[axis] = 0.0;
            if let Some(uv) = visible(&cams, &x) {
                points.push(x);
                clean.push(uv);
                labels.push(Label::model(p));
                placed += 1;
            }
        }
    }
    let inliers = points.len();
    let outliers = (cfg.outlier_ratio * inliers as f64).round() as usize;
    let (lo, hi) = (-0.1 * side, 1.1 * side);
    let mut placed = 0;
    let mut tries = 0;
    while placed < outliers {
        tries += 1;
        if tries > 1000 * (outliers + 1) {
            return Err(SimError::Placement(outliers));
        }
        let x = Vector3::new(rng.random_range(lo..hi), rng.random_range(lo..hi), rng.random_range(lo..hi));
        if let Some(uv) = visible(&cams, &x) {
            points.push(x);
            clean.push(uv);
            labels.push(Label::OUTLIER);
            placed += 1;
        }
    }

    let noise = Normal::new(0.0, cfg.sigma_pixel.max(0.0)).expect("finite sigma");
    let correspondences = clean
        .iter()
        .enumerate()
        .map(|(id, (u1, u2))| {
            let mut jitter = || if cfg.sigma_pixel > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            let a = Vec2::new(u1.x + jitter(), u1.y + jitter());
            let b = Vec2::new(u2.x + jitter(), u2.y + jitter());
            Correspondence::new(a, b, id)
        })
        .collect();
    let homographies = PLANE_NORMALS
        .iter()
        .map(|n| plane_homography(&cams[0], &cams[1], &Vector3::from_row_slice(n), 0.0).expect("cameras are off-plane"))
        .collect();
    Ok(SimSample {
        correspondences,
        labels,
        points,
        homographies,
        cameras: cams,
    })
}

/// Linear (DLT) triangulation from two views.
pub fn triangulate(c: &Correspondence, cams: &[Camera; 2]) -> Result<Vector3<f64>, SimError> {
    let (d1, d2) = match (cams[0].ray(&c.u1), cams[1].ray(&c.u2)) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(SimError::DegenerateRays),
    };
    if d1.cross(&d2).norm() < 1e-12 {
        return Err(SimError::DegenerateRays);
    }
    let mut a = Matrix4::zeros();
    for (row, (cam, u)) in [(&cams[0], &c.u1), (&cams[1], &c.u2)].into_iter().enumerate() {
        let p = cam.projection();
        a.set_row(2 * row, &(p.row(2) * u.x - p.row(0)));
        a.set_row(2 * row + 1, &(p.row(2) * u.y - p.row(1)));
    }
    // Row scaling keeps the null vector and improves conditioning.
    for r in 0..4 {
        let n = a.row(r).norm();
        if n > 0.0 {
            a.row_mut(r).scale_mut(1.0 / n);
        }
    }
    let svd = a.svd(false, true);
    let vt = svd.v_t.ok_or(SimError::DegenerateRays)?;
    let (imin, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|x, y| x.1.total_cmp(y.1))
        .expect("four singular values");
    let x = vt.row(imin);
    if x[3].abs() < 1e-15 {
        return Err(SimError::DegenerateRays);
    }
    Ok(Vector3::new(x[0] / x[3], x[1] / x[3], x[2] / x[3]))
}

/// Fraction of points whose predicted label disagrees with the ground truth
/// after the best one-to-one matching of predicted to true models. Outliers
/// only match outliers.
pub fn misclassification_error(pred: &[Label], gt: &[Label]) -> Result<f64, SimError> {
    if pred.len() != gt.len() {
        return Err(SimError::LengthMismatch(pred.len(), gt.len()));
    }
    if pred.is_empty() {
        return Ok(0.0);
    }
    let agreement = matched_agreement(pred, gt);
    Ok((pred.len() - agreement) as f64 / pred.len() as f64)
}

/// Points counted as correct under the optimal model matching.
pub fn matched_agreement(pred: &[Label], gt: &[Label]) -> usize {
    let dense = |labels: &[Label]| {
        let mut ids: Vec<usize> = labels.iter().filter_map(|l| l.model_index()).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    };
    let (pa, ga) = (dense(pred), dense(gt));
    let mut overlap = vec![vec![0i64; ga.len()]; pa.len()];
    let mut outliers = 0;
    for (p, g) in pred.iter().zip(gt) {
        match (p.model_index(), g.model_index()) {
            (Some(a), Some(b)) => {
                let i = pa.binary_search(&a).expect("collected");
                let j = ga.binary_search(&b).expect("collected");
                overlap[i][j] += 1;
            }
            (None, None) => outliers += 1,
            _ => {}
        }
    }
    let assignment = hungarian_max(&overlap);
    let matched: i64 = assignment
        .iter()
        .enumerate()
        .filter_map(|(i, j)| j.map(|j| overlap[i][j]))
        .sum();
    outliers + matched as usize
}

/// Maximum-weight assignment of rows to columns (each used at most once).
/// Returns the column matched to each row.
pub fn hungarian_max(weights: &[Vec<i64>]) -> Vec<Option<usize>> {
    let rows = weights.len();
    let cols = weights.first().map_or(0, |r| r.len());
    let n = rows.max(cols);
    if n == 0 {
        return vec![None; rows];
    }
    let max = weights.iter().flatten().copied().max().unwrap_or(0);
    // Square minimization problem on max - w; padding cells weigh zero.
    let cost = |i: usize, j: usize| -> i64 {
        if i < rows && j < cols {
            max - weights[i][j]
        } else {
            max
        }
    };
    // Potentials-based O(n^3) algorithm, 1-indexed with a virtual column 0.
    let inf = i64::MAX / 4;
    let mut u = vec![0i64; n + 1];
    let mut v = vec![0i64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![None; rows];
    for j in 1..=n {
        let i = p[j];
        if i >= 1 && i <= rows && j <= cols {
            out[i - 1] = Some(j - 1);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub method: Method,
    pub sweep_value: f64,
    pub trial: usize,
    pub me: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub method: Method,
    pub sweep_value: f64,
    pub trials: usize,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub scene: SimConfig,
    pub trials: usize,
    pub methods: Vec<Method>,
    pub seed: u64,
    /// Fitting parameters; `sigma_pixel` of the task is set per scene. The
    /// defaults differ from the plain homography pipeline: uniformly placed
    /// 3D outliers form many small near-planar groups, and a label cost of
    /// about twenty inliers' worth keeps them from becoming models.
    pub lambda: f64,
    pub beta: f64,
    pub gamma: f64,
    pub proposals: usize,
    pub inner_iterations: usize,
    pub max_outer: usize,
    /// Smallest pixel noise assumed by the cost, so noiseless scenes still
    /// have a proper covariance.
    pub min_sigma_pixel: f64,
}

impl SweepConfig {
    pub const DEFAULT_LAMBDA: f64 = 1.0;
    pub const DEFAULT_BETA: f64 = 300.0;
    pub const DEFAULT_PROPOSALS: usize = 300;
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            scene: SimConfig::default(),
            trials: 10,
            methods: vec![Method::Coral, Method::Ransac],
            seed: 0,
            lambda: Self::DEFAULT_LAMBDA,
            beta: Self::DEFAULT_BETA,
            gamma: HomographyTask::DEFAULT_GAMMA,
            proposals: Self::DEFAULT_PROPOSALS,
            inner_iterations: 500,
            max_outer: 20,
            min_sigma_pixel: 0.5,
        }
    }
}

/// Scene seed of a trial; shared by every method and sweep value.
pub fn trial_seed(base: u64, trial: usize) -> u64 {
    base.wrapping_add(trial as u64)
}

/// Fits one simulated scene with `method` and returns its ME.
pub fn run_trial(cfg: &SweepConfig, scene: &SimConfig, trial: usize, method: Method) -> Result<f64, SimError> {
    let seed = trial_seed(cfg.seed, trial);
    let sample = generate_scene(scene, seed)?;
    let mut task = HomographyTask::new(sample.correspondences.clone());
    task.sigma_pixel = scene.sigma_pixel.max(cfg.min_sigma_pixel);
    task.solver.lambda = cfg.lambda;
    task.solver.beta = cfg.beta;
    task.solver.gamma = cfg.gamma;
    task.solver.inner_iterations = cfg.inner_iterations;
    task.solver.max_outer = cfg.max_outer;
    task.solver.seed = seed;
    task.proposals = cfg.proposals;
    task.method = method;
    let fit = run_homography_segmentation(&task).map_err(|e| SimError::InvalidConfig(e.to_string()))?;
    misclassification_error(&fit.labels, &sample.labels)
}

fn sweep(
    cfg: &SweepConfig,
    values: &[f64],
    apply: impl Fn(&mut SimConfig, f64) + Sync,
) -> Result<Vec<SweepRow>, SimError> {
    let jobs: Vec<(f64, Method, usize)> = values
        .iter()
        .flat_map(|&v| cfg.methods.iter().flat_map(move |&m| (0..cfg.trials).map(move |t| (v, m, t))))
        .collect();
    jobs.into_par_iter()
        .map(|(v, m, t)| {
            let mut scene = cfg.scene.clone();
            apply(&mut scene, v);
            run_trial(cfg, &scene, t, m).map(|me| SweepRow {
                method: m,
                sweep_value: v,
                trial: t,
                me,
            })
        })
        .collect()
}

/// ME per (noise level, method, trial), without outliers.
pub fn run_noise_sweep(sigmas: &[f64], cfg: &SweepConfig) -> Result<Vec<SweepRow>, SimError> {
    sweep(cfg, sigmas, |s, v| {
        s.sigma_pixel = v;
    })
}

/// ME per (outlier ratio, method, trial) at the configured noise level.
pub fn run_outlier_sweep(ratios: &[f64], cfg: &SweepConfig) -> Result<Vec<SweepRow>, SimError> {
    sweep(cfg, ratios, |s, v| {
        s.outlier_ratio = v;
    })
}

/// Mean and population standard deviation per (method, value), in first
/// appearance order; sums run over trials in ascending order.
pub fn summarize(rows: &[SweepRow]) -> Vec<SweepCell> {
    let mut keys: Vec<(Method, f64)> = Vec::new();
    for r in rows {
        if !keys.iter().any(|k| k.0 == r.method && k.1 == r.sweep_value) {
            keys.push((r.method, r.sweep_value));
        }
    }
    keys.into_iter()
        .map(|(method, value)| {
            let mut cell: Vec<&SweepRow> = rows
                .iter()
                .filter(|r| r.method == method && r.sweep_value == value)
                .collect();
            cell.sort_by_key(|r| r.trial);
            let n = cell.len() as f64;
            let mean = cell.iter().map(|r| r.me).sum::<f64>() / n;
            let var = cell.iter().map(|r| (r.me - mean).powi(2)).sum::<f64>() / n;
            SweepCell {
                method,
                sweep_value: value,
                trials: cell.len(),
                mean,
                std: var.sqrt(),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WedgeConfig {
    pub width: usize,
    pub height: usize,
    /// Standard deviation of additive inverse-depth noise, 1/m.
    pub noise_sigma_xi: f64,
    /// Half-angle by which each face turns away from fronto-parallel, degrees.
    pub fold_deg: f64,
    /// Depth of the crease, meters.
    pub crease_depth: f64,
    /// Intensities left and right of the crease.
    pub intensity: [f64; 2],
}

impl Default for WedgeConfig {
    fn default() -> Self {
        Self {
            width: 80,
            height: 60,
            noise_sigma_xi: 0.0,
            fold_deg: 30.0,
            crease_depth: 2.0,
            intensity: [0.3, 0.7],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WedgeScene {
    pub width: usize,
    pub height: usize,
    pub inv_depth: Vec<f64>,
    pub intensity: Vec<f64>,
    /// 0 for the left face, 1 for the right face.
    pub labels: Vec<Label>,
    /// Columns `< crease` belong to the left face.
    pub crease: usize,
    pub planes: [InverseDepthPlane; 2],
}

/// Concave two-plane corner with a vertical crease in the middle of the
/// image and an intensity step along the crease.
pub fn render_wedge(cfg: &WedgeConfig, seed: u64) -> Result<WedgeScene, SimError> {
    if cfg.width < 2 || cfg.height < 1 {
        return Err(SimError::InvalidConfig("wedge needs at least 2x1 pixels".into()));
    }
    if !(cfg.noise_sigma_xi >= 0.0) || !(cfg.crease_depth > 0.0) || !(cfg.fold_deg.abs() < 80.0) {
        return Err(SimError::InvalidConfig("invalid wedge geometry".into()));
    }
    let (w, h) = (cfg.width, cfg.height);
    let crease = w / 2;
    let f = 0.8 * w as f64;
    // The crease lies between columns crease-1 and crease.
    let pp = Vec2::new(crease as f64 - 0.5, (h as f64 - 1.0) / 2.0);
    let t = cfg.fold_deg.to_radians().tan();
    let planes = [1.0, -1.0].map(|s: f64| {
        let n = Vector3::new(s * t, 0.0, 1.0).normalize();
        let d = n.z * cfg.crease_depth;
        InverseDepthPlane::from_camera_plane(n, d, Vec2::new(f, f), pp)
    });
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, cfg.noise_sigma_xi).expect("finite sigma");
    let mut inv_depth = Vec::with_capacity(w * h);
    let mut intensity = Vec::with_capacity(w * h);
    let mut labels = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let side = usize::from(x >= crease);
            let u = Vec2::new(x as f64, y as f64);
            let mut xi = planes[side].predict(&u);
            if cfg.noise_sigma_xi > 0.0 {
                xi += noise.sample(&mut rng);
            }
            inv_depth.push(xi.max(1e-6));
            intensity.push(cfg.intensity[side]);
            labels.push(Label::model(side));
        }
    }
    Ok(WedgeScene {
        width: w,
        height: h,
        inv_depth,
        intensity,
        labels,
        crease,
        planes,
    })
}
