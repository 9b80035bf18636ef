//! Convex-relaxation multi-model fitting.
//!
//! Every point carries a relaxed assignment over the current models plus an
//! outlier label. For a fixed model set the energy
//!
//! ```text
//! sum_l sum_u rho_l(u) phi_l(u) + lambda * R(grad phi_l) + beta * L
//! ```
//!
//! is convex in `phi` once `phi(u)` is relaxed to the probability simplex, and
//! is minimized by preconditioned primal-dual iterations. An outer loop then
//! thresholds the relaxed field, merges models whose joint refit costs less
//! than `beta`, and re-estimates the survivors from their inliers.

mod coral;
mod energy;
mod merge;
mod primal_dual;
mod projection;
mod ransac;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field::{PointField, ShapeMismatch};
use crate::geometry::Vec2;

pub use coral::{coral_fit, coral_fit_with_models};
pub use energy::{hard_energy, relaxed_energy, total_energy, Assignment, EnergyTriple};
pub use merge::{merge_models, MergeContext, MergeOutcome};
pub use primal_dual::{
    precondition, primal_dual_solve, primal_dual_solve_detailed, threshold_labels, PrimalDualOutcome,
    StepSizes,
};
pub use projection::{project_dual, project_simplex};
pub use ransac::{sequential_ransac_fit, RansacConfig};

/// Per-point hard label: a model index or the outlier label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Label(i32);

impl Label {
    pub const OUTLIER: Label = Label(-1);

    pub fn model(index: usize) -> Label {
        Label(i32::try_from(index).expect("model index fits in i32"))
    }

    /// `-1` is the outlier; other negative values are rejected.
    pub fn from_raw(raw: i32) -> Option<Label> {
        (raw >= -1).then_some(Label(raw))
    }

    pub fn raw(self) -> i32 {
        self.0
    }

    pub fn is_outlier(self) -> bool {
        self.0 < 0
    }

    pub fn model_index(self) -> Option<usize> {
        (self.0 >= 0).then_some(self.0 as usize)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FitError {
    #[error("no models could be proposed from the data")]
    NoModelsProposed,
    #[error("invalid solver configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Shape(#[from] ShapeMismatch),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Smoothness weight.
    pub lambda: f64,
    /// Cost per model.
    pub beta: f64,
    /// Outlier cost per point.
    pub gamma: f64,
    /// Over-relaxation of the primal variable, in `[0, 1]`.
    pub theta: f64,
    /// Primal-dual iterations per outer iteration.
    pub inner_iterations: usize,
    pub max_outer: usize,
    /// Model pairs farther apart than this are never merge candidates.
    pub merge_tolerance: f64,
    pub merge: bool,
    /// Outer loop stops when the energy improves by less than this fraction
    /// of the first accepted energy.
    pub convergence_eps: f64,
    /// Inner loop exits early after `early_exit_window` consecutive
    /// iterations with max entry change below this.
    pub early_exit_tol: f64,
    pub early_exit_window: usize,
    pub seed: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            beta: 100.0,
            gamma: 20.0,
            theta: 1.0,
            inner_iterations: 500,
            max_outer: 20,
            merge_tolerance: f64::INFINITY,
            merge: true,
            convergence_eps: 1e-4,
            early_exit_tol: 1e-5,
            early_exit_window: 10,
            seed: 0,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<(), FitError> {
        let nonneg = |name: &str, v: f64| {
            if v >= 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(FitError::InvalidConfig(format!("{name} must be finite and nonnegative, got {v}")))
            }
        };
        nonneg("lambda", self.lambda)?;
        nonneg("beta", self.beta)?;
        nonneg("gamma", self.gamma)?;
        nonneg("convergence_eps", self.convergence_eps)?;
        if !(0.0..=1.0).contains(&self.theta) {
            return Err(FitError::InvalidConfig(format!("theta must lie in [0, 1], got {}", self.theta)));
        }
        if self.inner_iterations == 0 {
            return Err(FitError::InvalidConfig("inner_iterations must be at least 1".into()));
        }
        if self.max_outer == 0 {
            return Err(FitError::InvalidConfig("max_outer must be at least 1".into()));
        }
        if !(self.merge_tolerance >= 0.0) {
            return Err(FitError::InvalidConfig("merge_tolerance must be nonnegative".into()));
        }
        Ok(())
    }
}

/// A family of geometric models over an indexed data set.
pub trait ModelProblem: Sync {
    type Model: Clone + Send + Sync;

    /// Number of data points.
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Points in a minimal sample.
    fn sample_size(&self) -> usize;

    /// Estimates a model from the given points (minimal sample or
    /// least-squares refit). `None` for degenerate input.
    fn estimate(&self, points: &[usize]) -> Option<Self::Model>;

    /// Finite, nonnegative data cost of `point` under `model`.
    fn cost(&self, model: &Self::Model, point: usize) -> f64;

    /// Parameter distance used to order merge candidates.
    fn distance(&self, a: &Self::Model, b: &Self::Model) -> f64;

    /// Location used for spatially local sampling.
    fn position(&self, point: usize) -> Vec2;

    /// Whether the point may enter a sample.
    fn is_sampleable(&self, _point: usize) -> bool {
        true
    }

    /// Points that must end up with the outlier label.
    fn forced_outlier(&self, _point: usize) -> bool {
        false
    }
}

/// Data costs for every point and model, plus an optional constant outlier
/// column stored last.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    field: PointField,
    models: usize,
    gamma: Option<f64>,
}

impl CostMatrix {
    /// `values` holds `points x models` costs row-major; the outlier column
    /// is appended when `gamma` is given.
    pub fn new(points: usize, models: usize, values: Vec<f64>, gamma: Option<f64>) -> Result<Self, ShapeMismatch> {
        if values.len() != points * models {
            return Err(ShapeMismatch::new(
                format!("{} costs", points * models),
                format!("{}", values.len()),
            ));
        }
        if values.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(ShapeMismatch::new("finite nonnegative costs", "invalid cost"));
        }
        let cols = models + usize::from(gamma.is_some());
        let mut out = Vec::with_capacity(points * cols);
        for i in 0..points {
            out.extend_from_slice(&values[i * models..(i + 1) * models]);
            if let Some(g) = gamma {
                out.push(g);
            }
        }
        Ok(Self {
            field: PointField::from_vec(points, cols, out)?,
            models,
            gamma,
        })
    }

    /// Evaluates `problem.cost` for every point and model; rows are
    /// computed in parallel.
    pub fn build<P: ModelProblem>(problem: &P, models: &[P::Model], gamma: f64) -> Self {
        let n = problem.len();
        let cols = models.len() + 1;
        let mut values = vec![0.0; n * cols];
        values
            .par_chunks_mut(cols)
            .with_min_len(64)
            .enumerate()
            .for_each(|(i, row)| {
                for (k, m) in models.iter().enumerate() {
                    row[k] = point_cost(problem, m, i);
                }
                row[cols - 1] = gamma;
            });
        Self {
            field: PointField::from_vec(n, cols, values).expect("sized above"),
            models: models.len(),
            gamma: Some(gamma),
        }
    }

    pub fn points(&self) -> usize {
        self.field.points()
    }

    pub fn num_models(&self) -> usize {
        self.models
    }

    /// Columns including the outlier column.
    pub fn labels(&self) -> usize {
        self.field.labels()
    }

    pub fn gamma(&self) -> Option<f64> {
        self.gamma
    }

    pub fn has_outlier(&self) -> bool {
        self.gamma.is_some()
    }

    pub fn field(&self) -> &PointField {
        &self.field
    }

    pub fn get(&self, point: usize, column: usize) -> f64 {
        self.field.get(point, column)
    }

    /// Column holding the costs for `label`, if it exists.
    pub fn column_of(&self, label: Label) -> Option<usize> {
        match label.model_index() {
            Some(k) if k < self.models => Some(k),
            Some(_) => None,
            None => self.gamma.map(|_| self.models),
        }
    }

    /// Hard label encoded by a column index.
    pub fn label_of(&self, column: usize) -> Label {
        if column < self.models {
            Label::model(column)
        } else {
            Label::OUTLIER
        }
    }
}

/// `problem.cost` with invalid values replaced by the cost cap.
pub(crate) fn point_cost<P: ModelProblem>(problem: &P, model: &P::Model, point: usize) -> f64 {
    let c = problem.cost(model, point);
    if c.is_finite() && c >= 0.0 {
        c.min(crate::geometry::COST_CAP)
    } else {
        crate::geometry::COST_CAP
    }
}

/// Inlier lists per model index.
pub(crate) fn inliers_by_model(labels: &[Label], models: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new(); models];
    for (i, l) in labels.iter().enumerate() {
        if let Some(k) = l.model_index() {
            out[k].push(i);
        }
    }
    out
}

/// Final state of a fit.
#[derive(Debug, Clone, PartialEq)]
pub struct FitResult<M> {
    pub labels: Vec<Label>,
    pub models: Vec<M>,
    /// Hard-label energy after every accepted outer iteration.
    pub energy_trace: Vec<EnergyTriple>,
    pub iterations: usize,
}

impl<M> FitResult<M> {
    pub fn all_outliers(points: usize) -> Self {
        Self {
            labels: vec![Label::OUTLIER; points],
            models: Vec::new(),
            energy_trace: Vec::new(),
            iterations: 0,
        }
    }

    pub fn outlier_count(&self) -> usize {
        self.labels.iter().filter(|l| l.is_outlier()).count()
    }
}

/// Models drawn from a fixed table of cost columns: model `k` costs
/// `costs[point][k]`. Refitting a set of points picks the column with the
/// smallest total cost over them.
#[derive(Debug, Clone)]
pub struct FixedCostProblem {
    points: usize,
    columns: usize,
    costs: Vec<f64>,
    positions: Vec<Vec2>,
}

impl FixedCostProblem {
    pub fn new(points: usize, columns: usize, costs: Vec<f64>, positions: Vec<Vec2>) -> Result<Self, ShapeMismatch> {
        if costs.len() != points * columns || positions.len() != points {
            return Err(ShapeMismatch::new(
                format!("{points} x {columns} costs and {points} positions"),
                format!("{} costs and {} positions", costs.len(), positions.len()),
            ));
        }
        if costs.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(ShapeMismatch::new("finite nonnegative costs", "invalid cost"));
        }
        Ok(Self {
            points,
            columns,
            costs,
            positions,
        })
    }

    pub fn columns(&self) -> usize {
        self.columns
    }
}

impl ModelProblem for FixedCostProblem {
    type Model = usize;

    fn len(&self) -> usize {
        self.points
    }

    fn sample_size(&self) -> usize {
        1
    }

    fn estimate(&self, points: &[usize]) -> Option<usize> {
        if points.is_empty() {
            return None;
        }
        (0..self.columns)
            .map(|k| (points.iter().map(|&i| self.costs[i * self.columns + k]).sum::<f64>(), k))
            .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
            .map(|(_, k)| k)
    }

    fn cost(&self, model: &usize, point: usize) -> f64 {
        self.costs[point * self.columns + model]
    }

    fn distance(&self, a: &usize, b: &usize) -> f64 {
        (*a as f64 - *b as f64).abs()
    }

    fn position(&self, point: usize) -> Vec2 {
        self.positions[point]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_encoding() {
        assert!(Label::OUTLIER.is_outlier());
        assert_eq!(Label::model(3).model_index(), Some(3));
        assert_eq!(Label::from_raw(-1), Some(Label::OUTLIER));
        assert_eq!(Label::from_raw(-2), None);
    }

    #[test]
    fn config_validation() {
        assert!(SolverConfig::default().validate().is_ok());
        let bad = SolverConfig {
            theta: 1.5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = SolverConfig {
            inner_iterations: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = SolverConfig {
            lambda: f64::NAN,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn cost_matrix_outlier_column() {
        let c = CostMatrix::new(2, 2, vec![1.0, 2.0, 3.0, 4.0], Some(7.5)).unwrap();
        assert_eq!(c.labels(), 3);
        assert_eq!(c.get(1, 2), 7.5);
        assert_eq!(c.column_of(Label::OUTLIER), Some(2));
        assert_eq!(c.column_of(Label::model(2)), None);
        assert_eq!(c.label_of(2), Label::OUTLIER);
        assert!(CostMatrix::new(1, 1, vec![-1.0], None).is_err());
    }
}
