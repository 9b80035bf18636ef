//! Dense per-point and per-edge label fields, stored row-major.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("dimension mismatch: expected {expected}, got {got}")]
pub struct ShapeMismatch {
    pub expected: String,
    pub got: String,
}

impl ShapeMismatch {
    pub(crate) fn new(expected: impl Into<String>, got: impl Into<String>) -> Self {
        Self {
            expected: expected.into(),
            got: got.into(),
        }
    }
}

/// Unconstrained `points x labels` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct PointField {
    points: usize,
    labels: usize,
    values: Vec<f64>,
}

impl PointField {
    pub fn zeros(points: usize, labels: usize) -> Self {
        Self {
            points,
            labels,
            values: vec![0.0; points * labels],
        }
    }

    pub fn from_vec(points: usize, labels: usize, values: Vec<f64>) -> Result<Self, ShapeMismatch> {
        if values.len() != points * labels {
            return Err(ShapeMismatch::new(
                format!("{} values", points * labels),
                format!("{}", values.len()),
            ));
        }
        Ok(Self {
            points,
            labels,
            values,
        })
    }

    pub fn points(&self) -> usize {
        self.points
    }

    pub fn labels(&self) -> usize {
        self.labels
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.labels..(i + 1) * self.labels]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.values[i * self.labels..(i + 1) * self.labels]
    }

    pub fn get(&self, i: usize, l: usize) -> f64 {
        self.values[i * self.labels + l]
    }

    pub fn set(&mut self, i: usize, l: usize, v: f64) {
        self.values[i * self.labels + l] = v;
    }

    pub fn dot(&self, other: &PointField) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b)
            .sum()
    }
}

/// Relaxed assignment: every row lies on the probability simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelField(PointField);

/// Row-sum tolerance for [`LabelField`].
pub const ROW_SUM_TOL: f64 = 1e-6;
/// Box tolerance for [`LabelField`] entries.
pub const BOX_TOL: f64 = 1e-9;

impl LabelField {
    /// Every point split evenly across all labels.
    pub fn uniform(points: usize, labels: usize) -> Self {
        assert!(labels > 0, "label field needs at least one label");
        let v = 1.0 / labels as f64;
        Self(PointField {
            points,
            labels,
            values: vec![v; points * labels],
        })
    }

    /// One-hot rows from hard labels (column indices).
    pub fn one_hot(labels: usize, assignment: &[usize]) -> Self {
        let mut f = PointField::zeros(assignment.len(), labels);
        for (i, &l) in assignment.iter().enumerate() {
            f.set(i, l, 1.0);
        }
        Self(f)
    }

    /// Validates the simplex constraint on every row.
    pub fn new(field: PointField) -> Result<Self, ShapeMismatch> {
        if field.labels == 0 {
            return Err(ShapeMismatch::new("at least one label", "0"));
        }
        for i in 0..field.points {
            let row = field.row(i);
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL
                || row.iter().any(|v| !(*v >= -BOX_TOL && *v <= 1.0 + BOX_TOL))
            {
                return Err(ShapeMismatch::new(
                    "rows on the probability simplex",
                    format!("row {i} = {row:?}"),
                ));
            }
        }
        Ok(Self(field))
    }

    /// Skips validation; callers uphold the simplex invariant.
    pub(crate) fn from_field_unchecked(field: PointField) -> Self {
        Self(field)
    }

    pub fn field(&self) -> &PointField {
        &self.0
    }

    pub fn points(&self) -> usize {
        self.0.points
    }

    pub fn labels(&self) -> usize {
        self.0.labels
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.0.row(i)
    }

    pub fn get(&self, i: usize, l: usize) -> f64 {
        self.0.get(i, l)
    }

    /// True when every row satisfies the simplex constraint.
    pub fn is_valid(&self) -> bool {
        (0..self.points()).all(|i| {
            let row = self.row(i);
            let sum: f64 = row.iter().sum();
            (sum - 1.0).abs() <= ROW_SUM_TOL
                && row.iter().all(|v| *v >= -BOX_TOL && *v <= 1.0 + BOX_TOL)
        })
    }
}

/// `edges x labels` matrix: graph gradients and dual variables.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeField {
    edges: usize,
    labels: usize,
    values: Vec<f64>,
}

/// Per-edge, per-label components of a graph gradient.
pub type EdgeGradient = EdgeField;
/// Dual variable of the smoothness term, one entry per edge and label.
pub type DualField = EdgeField;

impl EdgeField {
    pub fn zeros(edges: usize, labels: usize) -> Self {
        Self {
            edges,
            labels,
            values: vec![0.0; edges * labels],
        }
    }

    pub fn from_vec(edges: usize, labels: usize, values: Vec<f64>) -> Result<Self, ShapeMismatch> {
        if values.len() != edges * labels {
            return Err(ShapeMismatch::new(
                format!("{} values", edges * labels),
                format!("{}", values.len()),
            ));
        }
        Ok(Self {
            edges,
            labels,
            values,
        })
    }

    pub fn edges(&self) -> usize {
        self.edges
    }

    pub fn labels(&self) -> usize {
        self.labels
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn get(&self, e: usize, l: usize) -> f64 {
        self.values[e * self.labels + l]
    }

    pub fn dot(&self, other: &EdgeField) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b)
            .sum()
    }

    pub fn scaled(&self, s: f64) -> EdgeField {
        EdgeField {
            edges: self.edges,
            labels: self.labels,
            values: self.values.iter().map(|v| v * s).collect(),
        }
    }
}
