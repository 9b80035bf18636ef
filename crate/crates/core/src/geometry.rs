//! Geometric models: two-view homographies and inverse-depth planes.
//!
//! Homographies are kept in a canonical scale (unit Frobenius norm, positive
//! last nonzero entry) so that matrices equal up to scale compare equal, and
//! they always carry their inverse. Planes use the anchored inverse-depth
//! parameterization `xi(u) = <w, u> + c`, which is affine in pixel
//! coordinates for any 3D plane seen through a pinhole camera.

use nalgebra::{DMatrix, DVector, Matrix2, Matrix3, Vector2, Vector3};
use thiserror::Error;

pub type Vec2 = Vector2<f64>;

/// Costs are clamped to this value so that points mapped to infinity still
/// produce finite energies.
pub const COST_CAP: f64 = 1e12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("need at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("degenerate sample: {0}")]
    DegenerateSample(&'static str),
    #[error("matrix is not invertible")]
    NonInvertible,
    #[error("invalid inverse depth {0}")]
    InvalidDepth(f64),
    #[error("invalid parameter: {0}")]
    InvalidParameter(&'static str),
}

/// A point match between two views, in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub u1: Vec2,
    pub u2: Vec2,
    pub id: usize,
}

impl Correspondence {
    pub fn new(u1: Vec2, u2: Vec2, id: usize) -> Self {
        Self { u1, u2, id }
    }

    /// The same match seen with the two views exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            u1: self.u2,
            u2: self.u1,
            id: self.id,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.u1.iter().chain(self.u2.iter()).all(|v| v.is_finite())
    }
}

/// Scales `m` to unit Frobenius norm with a positive last nonzero entry
/// (row-major order). Returns `None` for the zero or a non-finite matrix.
pub fn canonicalize(m: &Matrix3<f64>) -> Option<Matrix3<f64>> {
    let norm = m.norm();
    if !norm.is_finite() || norm == 0.0 {
        return None;
    }
    let mut out = m / norm;
    let last = (0..9)
        .rev()
        .map(|k| out[(k / 3, k % 3)])
        .find(|v| v.abs() > 1e-15)?;
    if last < 0.0 {
        out = -out;
    }
    Some(out)
}

/// Planar projective map from view 1 to view 2 (`u2 ~ H u1`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography {
    fwd: Matrix3<f64>,
    inv: Matrix3<f64>,
}

impl Homography {
    /// Canonicalizes `m` and checks invertibility (smallest singular value
    /// above `1e-9` times the largest).
    pub fn new(m: Matrix3<f64>) -> Result<Self, GeometryError> {
        let fwd = canonicalize(&m).ok_or(GeometryError::NonInvertible)?;
        let sv = fwd.singular_values();
        let (lo, hi) = (sv.min(), sv.max());
        if !(lo > 1e-9 * hi) {
            return Err(GeometryError::NonInvertible);
        }
        let inv = fwd.try_inverse().ok_or(GeometryError::NonInvertible)?;
        let inv = canonicalize(&inv).ok_or(GeometryError::NonInvertible)?;
        Ok(Self { fwd, inv })
    }

    pub fn identity() -> Self {
        Self::new(Matrix3::identity()).expect("identity is invertible")
    }

    /// Canonical matrix mapping view 1 to view 2.
    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.fwd
    }

    /// Canonical matrix mapping view 2 back to view 1.
    pub fn inverse_matrix(&self) -> &Matrix3<f64> {
        &self.inv
    }

    pub fn inverse(&self) -> Homography {
        Homography {
            fwd: self.inv,
            inv: self.fwd,
        }
    }

    /// Maps a view-1 pixel into view 2. `None` when it lands at infinity.
    pub fn transfer(&self, p: &Vec2) -> Option<Vec2> {
        apply(&self.fwd, p)
    }

    /// Maps a view-2 pixel back into view 1.
    pub fn transfer_back(&self, p: &Vec2) -> Option<Vec2> {
        apply(&self.inv, p)
    }

    /// Frobenius distance between canonical forms.
    pub fn distance(&self, other: &Homography) -> f64 {
        (self.fwd - other.fwd).norm()
    }
}

fn apply(m: &Matrix3<f64>, p: &Vec2) -> Option<Vec2> {
    let x = m * Vector3::new(p.x, p.y, 1.0);
    if x.z.abs() < 1e-300 {
        return None;
    }
    let out = Vec2::new(x.x / x.z, x.y / x.z);
    out.iter().all(|v| v.is_finite()).then_some(out)
}

/// Jacobian of `x -> dehomogenize(m [x; 1])` at `p`.
fn projective_jacobian(m: &Matrix3<f64>, p: &Vec2) -> Option<Matrix2<f64>> {
    let x = m * Vector3::new(p.x, p.y, 1.0);
    if x.z.abs() < 1e-300 {
        return None;
    }
    let (px, py) = (x.x / x.z, x.y / x.z);
    let jac = Matrix2::new(
        m[(0, 0)] - px * m[(2, 0)],
        m[(0, 1)] - px * m[(2, 1)],
        m[(1, 0)] - py * m[(2, 0)],
        m[(1, 1)] - py * m[(2, 1)],
    ) / x.z;
    jac.iter().all(|v| v.is_finite()).then_some(jac)
}

/// Residual covariances for the two transfer directions.
///
/// `sigma12` weights the view-1 residual `u1 - H12 u2`, `sigma21` the
/// view-2 residual `u2 - H21 u1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CovariancePair {
    pub sigma12: Matrix2<f64>,
    pub sigma21: Matrix2<f64>,
}

impl CovariancePair {
    pub fn isotropic(variance: f64) -> Self {
        let s = Matrix2::identity() * variance;
        Self {
            sigma12: s,
            sigma21: s,
        }
    }

    pub fn swapped(&self) -> Self {
        Self {
            sigma12: self.sigma21,
            sigma21: self.sigma12,
        }
    }
}

/// First-order propagation of isotropic pixel noise through the mapping,
/// plus the destination-view noise: `J s0 J^T + s0` with `s0 = sigma^2 I`.
pub fn propagate_covariance(
    c: &Correspondence,
    h: &Homography,
    sigma_pixel: f64,
) -> Result<CovariancePair, GeometryError> {
    if !(sigma_pixel > 0.0) || !sigma_pixel.is_finite() {
        return Err(GeometryError::InvalidParameter("sigma_pixel must be positive"));
    }
    let var = sigma_pixel * sigma_pixel;
    let j21 = projective_jacobian(&h.fwd, &c.u1).ok_or(GeometryError::NonInvertible)?;
    let j12 = projective_jacobian(&h.inv, &c.u2).ok_or(GeometryError::NonInvertible)?;
    let base = Matrix2::identity() * var;
    Ok(CovariancePair {
        sigma12: j12 * j12.transpose() * var + base,
        sigma21: j21 * j21.transpose() * var + base,
    })
}

fn mahalanobis_sq(r: &Vec2, cov: &Matrix2<f64>) -> f64 {
    // Explicit 2x2 inverse.
    let det = cov[(0, 0)] * cov[(1, 1)] - cov[(0, 1)] * cov[(1, 0)];
    if !(det > 0.0) {
        return COST_CAP;
    }
    let q = (cov[(1, 1)] * r.x * r.x - (cov[(0, 1)] + cov[(1, 0)]) * r.x * r.y
        + cov[(0, 0)] * r.y * r.y)
        / det;
    q.clamp(0.0, COST_CAP)
}

/// Half the sum of the squared Mahalanobis transfer errors in both views.
pub fn symmetric_transfer_cost(c: &Correspondence, h: &Homography, cov: &CovariancePair) -> f64 {
    let back = match h.transfer_back(&c.u2) {
        Some(p) => mahalanobis_sq(&(c.u1 - p), &cov.sigma12),
        None => COST_CAP,
    };
    let fwd = match h.transfer(&c.u1) {
        Some(p) => mahalanobis_sq(&(c.u2 - p), &cov.sigma21),
        None => COST_CAP,
    };
    (0.5 * (back + fwd)).min(COST_CAP)
}

/// Convenience: transfer cost under covariances propagated at `sigma_pixel`.
/// Points that map to infinity get [`COST_CAP`].
pub fn homography_cost(c: &Correspondence, h: &Homography, sigma_pixel: f64) -> f64 {
    match propagate_covariance(c, h, sigma_pixel) {
        Ok(cov) => symmetric_transfer_cost(c, h, &cov),
        Err(_) => COST_CAP,
    }
}

/// Translates to the centroid and scales to mean distance sqrt(2).
fn hartley_normalize(pts: &[Vec2]) -> Option<(Vec<Vec2>, Matrix3<f64>)> {
    let n = pts.len() as f64;
    let centroid = pts.iter().fold(Vec2::zeros(), |acc, p| acc + p) / n;
    let mean_dist = pts.iter().map(|p| (p - centroid).norm()).sum::<f64>() / n;
    if !(mean_dist > 1e-12) {
        return None;
    }
    let s = std::f64::consts::SQRT_2 / mean_dist;
    let t = Matrix3::new(
        s,
        0.0,
        -s * centroid.x,
        0.0,
        s,
        -s * centroid.y,
        0.0,
        0.0,
        1.0,
    );
    let out = pts.iter().map(|p| (p - centroid) * s).collect();
    Some((out, t))
}

fn has_collinear_triple(pts: &[Vec2]) -> bool {
    let n = pts.len();
    for i in 0..n {
        for j in i + 1..n {
            for k in j + 1..n {
                let a = pts[j] - pts[i];
                let b = pts[k] - pts[i];
                if (a.x * b.y - a.y * b.x).abs() < 1e-9 {
                    return true;
                }
            }
        }
    }
    false
}

/// Normalized direct linear transform.
///
/// Minimal samples (exactly four matches) are rejected when any three points
/// are collinear in either view; larger sets are rejected when the design
/// matrix has a null space of dimension two or more.
pub fn estimate_homography_dlt(matches: &[Correspondence]) -> Result<Homography, GeometryError> {
    let n = matches.len();
    if n < 4 {
        return Err(GeometryError::TooFewPoints { needed: 4, got: n });
    }
    let p1: Vec<Vec2> = matches.iter().map(|m| m.u1).collect();
    let p2: Vec<Vec2> = matches.iter().map(|m| m.u2).collect();
    let (q1, t1) = hartley_normalize(&p1).ok_or(GeometryError::DegenerateSample("coincident points"))?;
    let (q2, t2) = hartley_normalize(&p2).ok_or(GeometryError::DegenerateSample("coincident points"))?;
    if n == 4 && (has_collinear_triple(&q1) || has_collinear_triple(&q2)) {
        return Err(GeometryError::DegenerateSample("collinear points in minimal sample"));
    }

    // Pad to at least 9 rows so the thin SVD exposes the full right null space.
    let rows = (2 * n).max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for (k, (x, y)) in q1.iter().zip(q2.iter()).enumerate() {
        let r = 2 * k;
        a[(r, 3)] = -x.x;
        a[(r, 4)] = -x.y;
        a[(r, 5)] = -1.0;
        a[(r, 6)] = y.y * x.x;
        a[(r, 7)] = y.y * x.y;
        a[(r, 8)] = y.y;
        a[(r + 1, 0)] = x.x;
        a[(r + 1, 1)] = x.y;
        a[(r + 1, 2)] = 1.0;
        a[(r + 1, 6)] = -y.x * x.x;
        a[(r + 1, 7)] = -y.x * x.y;
        a[(r + 1, 8)] = -y.x;
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t.ok_or(GeometryError::DegenerateSample("svd failed"))?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[i].total_cmp(&svd.singular_values[j]));
    let largest = svd.singular_values[order[order.len() - 1]];
    let second = svd.singular_values[order[1]];
    if !(second > 1e-10 * largest) {
        return Err(GeometryError::DegenerateSample("rank-deficient design matrix"));
    }
    let h = v_t.row(order[0]);
    let hn = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]);
    let t2_inv = t2.try_inverse().ok_or(GeometryError::NonInvertible)?;
    Homography::new(t2_inv * hn * t1)
        .map_err(|_| GeometryError::DegenerateSample("singular homography"))
}

/// Plane in inverse depth: `xi(u) = <w, u> + c`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InverseDepthPlane {
    /// Inverse-depth gradient, 1/(m px).
    pub w: Vec2,
    /// Inverse depth at pixel (0, 0), 1/m.
    pub c: f64,
}

impl InverseDepthPlane {
    pub fn new(w: Vec2, c: f64) -> Self {
        Self { w, c }
    }

    /// Builds the plane through reference pixel `anchor` with inverse depth
    /// `xi_anchor` and gradient `w`.
    pub fn from_anchor(w: Vec2, anchor: Vec2, xi_anchor: f64) -> Self {
        Self {
            w,
            c: xi_anchor - w.dot(&anchor),
        }
    }

    /// Plane `n . X = d` (camera frame, `d > 0`) seen by a pinhole camera
    /// with focal lengths `(fx, fy)` and principal point `(cx, cy)`.
    pub fn from_camera_plane(normal: Vector3<f64>, d: f64, f: Vec2, pp: Vec2) -> Self {
        // 1/Z = n^T K^-1 [u; 1] / d
        let w = Vec2::new(normal.x / f.x, normal.y / f.y) / d;
        let c = (normal.z - normal.x * pp.x / f.x - normal.y * pp.y / f.y) / d;
        Self { w, c }
    }

    pub fn predict(&self, u: &Vec2) -> f64 {
        self.w.dot(u) + self.c
    }

    pub fn is_finite(&self) -> bool {
        self.w.iter().all(|v| v.is_finite()) && self.c.is_finite()
    }

    /// Parameter distance with the gradient scaled by `diag` (typically the
    /// image diagonal) so both terms are in 1/m.
    pub fn distance(&self, other: &InverseDepthPlane, diag: f64) -> f64 {
        let dw = (self.w - other.w) * diag;
        (dw.norm_squared() + (self.c - other.c).powi(2)).sqrt()
    }

    /// Fraction of `pixels` where the predicted inverse depth is nonnegative.
    pub fn nonnegative_fraction(&self, pixels: &[Vec2]) -> f64 {
        if pixels.is_empty() {
            return 1.0;
        }
        let ok = pixels.iter().filter(|u| self.predict(u) >= 0.0).count();
        ok as f64 / pixels.len() as f64
    }
}

/// Squared inverse-depth residual against the plane, in units of `sigma_xi`.
pub fn plane_cost(
    u: &Vec2,
    xi: f64,
    plane: &InverseDepthPlane,
    sigma_xi: f64,
) -> Result<f64, GeometryError> {
    if !(xi > 0.0) || !xi.is_finite() {
        return Err(GeometryError::InvalidDepth(xi));
    }
    if !(sigma_xi > 0.0) {
        return Err(GeometryError::InvalidParameter("sigma_xi must be positive"));
    }
    let r = (xi - plane.predict(u)) / sigma_xi;
    Ok((r * r).min(COST_CAP))
}

/// Weighted least-squares plane through `(pixel, inverse depth)` samples.
///
/// Solved by QR on centered coordinates. Fails when fewer than three samples
/// carry weight or the weighted pixels are collinear.
pub fn fit_plane(
    pixels: &[(Vec2, f64)],
    weights: Option<&[f64]>,
) -> Result<InverseDepthPlane, GeometryError> {
    let weight = |i: usize| weights.map_or(1.0, |w| w[i]);
    if let Some(w) = weights {
        if w.len() != pixels.len() || w.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(GeometryError::InvalidParameter("weights must be finite and nonnegative"));
        }
    }
    let active: Vec<usize> = (0..pixels.len()).filter(|&i| weight(i) > 0.0).collect();
    if active.len() < 3 {
        return Err(GeometryError::DegenerateSample("fewer than three weighted pixels"));
    }
    let total: f64 = active.iter().map(|&i| weight(i)).sum();
    let center = active
        .iter()
        .fold(Vec2::zeros(), |acc, &i| acc + pixels[i].0 * weight(i))
        / total;

    let m = active.len();
    let mut a = DMatrix::<f64>::zeros(m, 3);
    let mut b = DVector::<f64>::zeros(m);
    for (row, &i) in active.iter().enumerate() {
        let sw = weight(i).sqrt();
        let d = pixels[i].0 - center;
        a[(row, 0)] = sw * d.x;
        a[(row, 1)] = sw * d.y;
        a[(row, 2)] = sw;
        b[row] = sw * pixels[i].1;
    }

    let spread = a.columns(0, 2).singular_values();
    let (lo, hi) = (spread.min(), spread.max());
    if !(hi > 0.0) || !(lo > 1e-9 * hi) {
        return Err(GeometryError::DegenerateSample("collinear pixels"));
    }

    let qr = a.qr();
    let qtb = qr.q().transpose() * b;
    let sol = qr
        .r()
        .solve_upper_triangular(&qtb)
        .ok_or(GeometryError::DegenerateSample("singular plane system"))?;
    let w = Vec2::new(sol[0], sol[1]);
    let plane = InverseDepthPlane::from_anchor(w, center, sol[2]);
    if !plane.is_finite() {
        return Err(GeometryError::DegenerateSample("non-finite plane"));
    }
    Ok(plane)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_homography(rng: &mut ChaCha8Rng) -> Matrix3<f64> {
        loop {
            let m: Matrix3<f64> = Matrix3::new(
                1.0 + rng.random_range(-0.2..0.2),
                rng.random_range(-0.2..0.2),
                rng.random_range(-30.0..30.0),
                rng.random_range(-0.2..0.2),
                1.0 + rng.random_range(-0.2..0.2),
                rng.random_range(-30.0..30.0),
                rng.random_range(-5e-4..5e-4),
                rng.random_range(-5e-4..5e-4),
                1.0,
            );
            if m.determinant().abs() > 0.1 {
                return m;
            }
        }
    }

    fn map(m: &Matrix3<f64>, p: &Vec2) -> Vec2 {
        let x = m * Vector3::new(p.x, p.y, 1.0);
        Vec2::new(x.x / x.z, x.y / x.z)
    }

    #[test]
    fn dlt_identity() {
        let pts = [(0.0, 0.0), (100.0, 0.0), (0.0, 80.0), (120.0, 90.0)];
        let matches: Vec<_> = pts
            .iter()
            .enumerate()
            .map(|(i, &(x, y))| Correspondence::new(Vec2::new(x, y), Vec2::new(x, y), i))
            .collect();
        let h = estimate_homography_dlt(&matches).unwrap();
        let expected = canonicalize(&Matrix3::identity()).unwrap();
        assert_abs_diff_eq!(*h.matrix(), expected, epsilon = 1e-12);
    }

    #[test]
    fn dlt_recovers_known_homography() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let m = random_homography(&mut rng);
            let truth = canonicalize(&m).unwrap();
            let n = rng.random_range(4..30);
            let matches: Vec<_> = (0..n)
                .map(|i| {
                    let p = Vec2::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0));
                    Correspondence::new(p, map(&m, &p), i)
                })
                .collect();
            let h = estimate_homography_dlt(&matches).unwrap();
            let err = (h.matrix() - truth).abs().max();
            assert!(err < 1e-8, "max entry error {err}");
        }
    }

    #[test]
    fn dlt_rejects_collinear_and_short_samples() {
        let pts = [(0.0, 0.0), (10.0, 10.0), (20.0, 20.0), (5.0, 40.0)];
        let matches: Vec<_> = pts
            .iter()
            .enumerate()
            .map(|(i, &(x, y))| Correspondence::new(Vec2::new(x, y), Vec2::new(x + 1.0, y), i))
            .collect();
        assert!(matches!(
            estimate_homography_dlt(&matches),
            Err(GeometryError::DegenerateSample(_))
        ));
        assert!(matches!(
            estimate_homography_dlt(&matches[..3]),
            Err(GeometryError::TooFewPoints { got: 3, .. })
        ));
    }

    #[test]
    fn canonical_form_is_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let m = random_homography(&mut rng);
            let s: f64 = rng.random_range(-100.0..100.0);
            if s.abs() < 1e-3 {
                continue;
            }
            let a = canonicalize(&m).unwrap();
            let b = canonicalize(&(m * s)).unwrap();
            assert_abs_diff_eq!(a, b, epsilon = 1e-14);
            assert_abs_diff_eq!(canonicalize(&a).unwrap(), a, epsilon = 1e-15);
        }
        assert!(Homography::new(Matrix3::zeros()).is_err());
        let singular = Matrix3::new(1.0, 2.0, 3.0, 2.0, 4.0, 6.0, 0.0, 0.0, 1.0);
        assert_eq!(Homography::new(singular), Err(GeometryError::NonInvertible));
    }

    #[test]
    fn transfer_cost_zero_for_exact_match() {
        let m = Matrix3::new(1.1, 0.05, 12.0, -0.02, 0.95, -7.0, 1e-4, -2e-4, 1.0);
        let h = Homography::new(m).unwrap();
        let u1 = Vec2::new(200.0, 150.0);
        let c = Correspondence::new(u1, map(&m, &u1), 0);
        let cov = propagate_covariance(&c, &h, 1.0).unwrap();
        assert!(symmetric_transfer_cost(&c, &h, &cov) < 1e-18);
    }

    #[test]
    fn transfer_cost_unit_displacement() {
        let c = Correspondence::new(Vec2::new(5.0, 5.0), Vec2::new(6.0, 5.0), 0);
        let cost = symmetric_transfer_cost(&c, &Homography::identity(), &CovariancePair::isotropic(1.0));
        assert_abs_diff_eq!(cost, 1.0, epsilon = 1e-12);
    }

    // Straight-line reimplementation with explicit homogeneous arithmetic.
    fn transfer_cost_oracle(c: &Correspondence, m: &Matrix3<f64>, cov: &CovariancePair) -> f64 {
        let minv = m.try_inverse().unwrap();
        let p2 = m * Vector3::new(c.u1.x, c.u1.y, 1.0);
        let p1 = minv * Vector3::new(c.u2.x, c.u2.y, 1.0);
        let r2 = nalgebra::RowVector2::new(c.u2.x - p2.x / p2.z, c.u2.y - p2.y / p2.z);
        let r1 = nalgebra::RowVector2::new(c.u1.x - p1.x / p1.z, c.u1.y - p1.y / p1.z);
        let d12 = (r1 * cov.sigma12.try_inverse().unwrap() * r1.transpose())[0];
        let d21 = (r2 * cov.sigma21.try_inverse().unwrap() * r2.transpose())[0];
        0.5 * (d12 + d21)
    }

    #[test]
    fn transfer_cost_matches_oracle_and_swap_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let m = random_homography(&mut rng);
            let h = Homography::new(m).unwrap();
            let u1 = Vec2::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0));
            let noise = Vec2::new(rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0));
            let c = Correspondence::new(u1, map(&m, &u1) + noise, 0);
            let cov = propagate_covariance(&c, &h, rng.random_range(0.3..2.0)).unwrap();
            let cost = symmetric_transfer_cost(&c, &h, &cov);
            let oracle = transfer_cost_oracle(&c, &m, &cov);
            assert!((cost - oracle).abs() <= 1e-10 * oracle.max(1.0), "{cost} vs {oracle}");
            let swapped = symmetric_transfer_cost(&c.swapped(), &h.inverse(), &cov.swapped());
            assert!((cost - swapped).abs() <= 1e-9 * cost.max(1.0));
        }
    }

    #[test]
    fn covariance_for_identity_and_scaling() {
        let c = Correspondence::new(Vec2::new(30.0, 40.0), Vec2::new(60.0, 80.0), 0);
        let cov = propagate_covariance(&c, &Homography::identity(), 0.7).unwrap();
        assert_abs_diff_eq!(cov.sigma21, Matrix2::identity() * 2.0 * 0.49, epsilon = 1e-14);
        assert_abs_diff_eq!(cov.sigma12, Matrix2::identity() * 2.0 * 0.49, epsilon = 1e-14);

        let h = Homography::new(Matrix3::from_diagonal(&Vector3::new(2.0, 2.0, 1.0))).unwrap();
        for p in [Vec2::new(0.0, 0.0), Vec2::new(300.0, -12.0)] {
            let c = Correspondence::new(p, p * 2.0, 0);
            let cov = propagate_covariance(&c, &h, 1.0).unwrap();
            assert_abs_diff_eq!(cov.sigma21, Matrix2::identity() * 5.0, epsilon = 1e-12);
            assert_abs_diff_eq!(cov.sigma12, Matrix2::identity() * 1.25, epsilon = 1e-12);
        }
        assert!(propagate_covariance(&c, &h, 0.0).is_err());
    }

    #[test]
    fn covariance_matches_finite_difference_jacobian() {
        let m = Matrix3::new(0.9, 0.1, 20.0, -0.05, 1.1, 5.0, 4e-4, -3e-4, 1.0);
        let h = Homography::new(m).unwrap();
        let sigma = 1.3;
        let u1 = Vec2::new(321.0, 123.0);
        let c = Correspondence::new(u1, map(&m, &u1), 0);
        let cov = propagate_covariance(&c, &h, sigma).unwrap();
        let step = 1e-4;
        let mut jac = Matrix2::zeros();
        for k in 0..2 {
            let mut e = Vec2::zeros();
            e[k] = step;
            let d = (map(&m, &(u1 + e)) - map(&m, &(u1 - e))) / (2.0 * step);
            jac.set_column(k, &d);
        }
        let expected = jac * jac.transpose() * sigma * sigma + Matrix2::identity() * sigma * sigma;
        assert_abs_diff_eq!(cov.sigma21, expected, epsilon = 1e-6);
    }

    #[test]
    fn plane_cost_cases() {
        let plane = InverseDepthPlane::new(Vec2::new(1e-3, -2e-3), 0.5);
        let u = Vec2::new(10.0, 20.0);
        assert_eq!(plane_cost(&u, plane.predict(&u), &plane, 0.01).unwrap(), 0.0);
        let fronto = InverseDepthPlane::new(Vec2::zeros(), 1.0 / 3.0);
        assert_eq!(plane_cost(&u, 1.0 / 3.0, &fronto, 0.01).unwrap(), 0.0);
        let c = plane_cost(&u, plane.predict(&u) + 0.02, &plane, 0.01).unwrap();
        assert_abs_diff_eq!(c, 4.0, epsilon = 1e-9);
        assert!(matches!(plane_cost(&u, 0.0, &plane, 0.01), Err(GeometryError::InvalidDepth(_))));
        assert!(plane_cost(&u, f64::NAN, &plane, 0.01).is_err());
    }

    #[test]
    fn fit_plane_constant_depth_and_degenerate() {
        let px: Vec<_> = [(0.0, 0.0), (5.0, 1.0), (2.0, 7.0), (9.0, 9.0)]
            .iter()
            .map(|&(x, y)| (Vec2::new(x, y), 0.25))
            .collect();
        let plane = fit_plane(&px, None).unwrap();
        assert_abs_diff_eq!(plane.w.norm(), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(plane.c, 0.25, epsilon = 1e-12);

        let collinear: Vec<_> = (0..3).map(|i| (Vec2::new(i as f64, 2.0 * i as f64), 0.5)).collect();
        assert!(matches!(fit_plane(&collinear, None), Err(GeometryError::DegenerateSample(_))));
        assert!(fit_plane(&px[..2], None).is_err());
        // zero weights remove samples
        assert!(fit_plane(&px, Some(&[1.0, 1.0, 0.0, 0.0])).is_err());
    }

    #[test]
    fn anchor_choice_does_not_change_costs() {
        let w = Vec2::new(2e-3, -1e-3);
        let a = InverseDepthPlane::from_anchor(w, Vec2::new(0.0, 0.0), 0.4);
        let anchor = Vec2::new(33.0, 71.0);
        let b = InverseDepthPlane::from_anchor(w, anchor, a.predict(&anchor));
        for u in [Vec2::new(1.0, 2.0), Vec2::new(300.0, 100.0)] {
            let xi = 0.37;
            let ca = plane_cost(&u, xi, &a, 0.005).unwrap();
            let cb = plane_cost(&u, xi, &b, 0.005).unwrap();
            assert!((ca - cb).abs() <= 1e-10 * ca.max(1.0));
        }
    }
}
