use serde::{Deserialize, Serialize};

use crate::field::{LabelField, ShapeMismatch};
use crate::neighborhood::{gradient, penalty_value, NeighborhoodGraph, PenaltyNorm};

use super::{CostMatrix, Label, SolverConfig};

/// Energy split into data term, weighted smoothness and label cost.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EnergyTriple {
    pub data: f64,
    pub smoothness: f64,
    pub label_cost: f64,
}

impl EnergyTriple {
    pub fn total(&self) -> f64 {
        self.data + self.smoothness + self.label_cost
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Assignment<'a> {
    Relaxed(&'a LabelField),
    Hard(&'a [Label]),
}

pub fn total_energy(
    assignment: Assignment<'_>,
    cost: &CostMatrix,
    graph: &NeighborhoodGraph,
    norm: PenaltyNorm,
    cfg: &SolverConfig,
) -> Result<EnergyTriple, ShapeMismatch> {
    match assignment {
        Assignment::Relaxed(phi) => relaxed_energy(phi, cost, graph, norm, cfg),
        Assignment::Hard(labels) => hard_energy(labels, cost, graph, norm, cfg),
    }
}

/// Relaxed energy; the label cost counts every model column.
pub fn relaxed_energy(
    phi: &LabelField,
    cost: &CostMatrix,
    graph: &NeighborhoodGraph,
    norm: PenaltyNorm,
    cfg: &SolverConfig,
) -> Result<EnergyTriple, ShapeMismatch> {
    check_shape(phi.points(), cost, graph)?;
    if phi.labels() != cost.labels() {
        return Err(ShapeMismatch::new(
            format!("{} labels", cost.labels()),
            format!("{}", phi.labels()),
        ));
    }
    let data = phi.field().dot(cost.field());
    let g = gradient(graph, phi.field())?;
    Ok(EnergyTriple {
        data,
        smoothness: cfg.lambda * penalty_value(norm, graph, &g),
        label_cost: cfg.beta * cost.num_models() as f64,
    })
}

/// Hard-label energy; the label cost counts models with at least one point.
pub fn hard_energy(
    labels: &[Label],
    cost: &CostMatrix,
    graph: &NeighborhoodGraph,
    norm: PenaltyNorm,
    cfg: &SolverConfig,
) -> Result<EnergyTriple, ShapeMismatch> {
    check_shape(labels.len(), cost, graph)?;
    let mut columns = Vec::with_capacity(labels.len());
    for (i, &l) in labels.iter().enumerate() {
        let col = cost
            .column_of(l)
            .ok_or_else(|| ShapeMismatch::new("label with a cost column", format!("point {i} has {}", l.raw())))?;
        columns.push(col);
    }
    let data: f64 = columns.iter().enumerate().map(|(i, &c)| cost.get(i, c)).sum();

    let smooth: f64 = (0..graph.points())
        .map(|i| group_smoothness(graph, norm, i, |p| columns[p]))
        .sum();

    let mut used = vec![false; cost.num_models()];
    for l in labels {
        if let Some(k) = l.model_index() {
            used[k] = true;
        }
    }
    let active = used.iter().filter(|u| **u).count();
    Ok(EnergyTriple {
        data,
        smoothness: cfg.lambda * smooth,
        label_cost: cfg.beta * active as f64,
    })
}

/// Penalty of the one-hot gradient on the edges leaving point `i`, for the
/// labeling `column`. A one-hot gradient is nonzero only on edges whose
/// endpoints disagree, and there only in the two columns involved.
pub(crate) fn group_smoothness(
    graph: &NeighborhoodGraph,
    norm: PenaltyNorm,
    i: usize,
    column: impl Fn(usize) -> usize,
) -> f64 {
    let edges = &graph.edges()[graph.group(i)];
    match norm {
        PenaltyNorm::L11 => edges
            .iter()
            .filter(|e| column(e.src) != column(e.dst))
            .map(|e| 2.0 * e.weight)
            .sum(),
        PenaltyNorm::L12 => {
            let mut per_label: Vec<(usize, f64)> = Vec::new();
            for e in edges {
                let (a, b) = (column(e.src), column(e.dst));
                if a == b {
                    continue;
                }
                let w2 = e.weight * e.weight;
                for col in [a, b] {
                    match per_label.iter_mut().find(|(c, _)| *c == col) {
                        Some(entry) => entry.1 += w2,
                        None => per_label.push((col, w2)),
                    }
                }
            }
            per_label.iter().map(|(_, sq)| sq.sqrt()).sum()
        }
    }
}

fn check_shape(points: usize, cost: &CostMatrix, graph: &NeighborhoodGraph) -> Result<(), ShapeMismatch> {
    if points != cost.points() || points != graph.points() {
        return Err(ShapeMismatch::new(
            format!("{} points in cost and graph", points),
            format!("{} and {}", cost.points(), graph.points()),
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::PointField;
    use crate::neighborhood::{build_grid4, build_knn};
    use crate::geometry::Vec2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg(lambda: f64, beta: f64) -> SolverConfig {
        SolverConfig {
            lambda,
            beta,
            ..Default::default()
        }
    }

    #[test]
    fn constant_labeling_single_model() {
        let cost = CostMatrix::new(6, 1, vec![0.0; 6], Some(3.0)).unwrap();
        let g = build_grid4(3, 2);
        let e = hard_energy(&[Label::model(0); 6], &cost, &g, PenaltyNorm::L11, &cfg(1.0, 7.0)).unwrap();
        assert_eq!(e, EnergyTriple { data: 0.0, smoothness: 0.0, label_cost: 7.0 });
    }

    #[test]
    fn all_outliers() {
        let cost = CostMatrix::new(6, 2, vec![1.0; 12], Some(3.0)).unwrap();
        let g = build_grid4(3, 2);
        let e = hard_energy(&[Label::OUTLIER; 6], &cost, &g, PenaltyNorm::L12, &cfg(1.0, 7.0)).unwrap();
        assert_eq!(e, EnergyTriple { data: 18.0, smoothness: 0.0, label_cost: 0.0 });
    }

    #[test]
    fn unknown_label_rejected() {
        let cost = CostMatrix::new(2, 1, vec![0.0; 2], None).unwrap();
        let g = build_grid4(2, 1);
        assert!(hard_energy(&[Label::OUTLIER, Label::model(0)], &cost, &g, PenaltyNorm::L11, &cfg(1.0, 1.0)).is_err());
        assert!(hard_energy(&[Label::model(1), Label::model(0)], &cost, &g, PenaltyNorm::L11, &cfg(1.0, 1.0)).is_err());
    }

    /// Straight-line re-sum: one-hot field, explicit per-label gradients.
    fn oracle(labels: &[usize], cost: &CostMatrix, graph: &NeighborhoodGraph, norm: PenaltyNorm, c: &SolverConfig) -> f64 {
        let cols = cost.labels();
        let mut data = 0.0;
        for (i, &l) in labels.iter().enumerate() {
            data += cost.get(i, l);
        }
        let mut smooth = 0.0;
        for l in 0..cols {
            let ind = |i: usize| if labels[i] == l { 1.0 } else { 0.0 };
            for i in 0..graph.points() {
                let comps: Vec<f64> = graph.edges()[graph.group(i)]
                    .iter()
                    .map(|e| e.weight * (ind(e.dst) - ind(e.src)))
                    .collect();
                smooth += match norm {
                    PenaltyNorm::L11 => comps.iter().map(|v| v.abs()).sum::<f64>(),
                    PenaltyNorm::L12 => comps.iter().map(|v| v * v).sum::<f64>().sqrt(),
                };
            }
        }
        let models = (0..cost.num_models()).filter(|k| labels.contains(k)).count();
        data + c.lambda * smooth + c.beta * models as f64
    }

    #[test]
    fn hard_energy_matches_oracle_and_one_hot() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for trial in 0..60 {
            let (w, h) = (rng.random_range(1..5), rng.random_range(1..5));
            let n = w * h;
            let models = rng.random_range(1..4);
            let values: Vec<f64> = (0..n * models).map(|_| rng.random_range(0.0..5.0)).collect();
            let cost = CostMatrix::new(n, models, values, Some(rng.random_range(0.5..4.0))).unwrap();
            let graph = if trial % 2 == 0 {
                build_grid4(w, h)
            } else {
                let pts: Vec<Vec2> = (0..n).map(|_| Vec2::new(rng.random(), rng.random())).collect();
                build_knn(&pts, 3, 0.3)
            };
            let c = cfg(rng.random_range(0.0..3.0), rng.random_range(0.0..10.0));
            let cols: Vec<usize> = (0..n).map(|_| rng.random_range(0..=models)).collect();
            let labels: Vec<Label> = cols.iter().map(|&k| cost.label_of(k)).collect();
            for norm in [PenaltyNorm::L11, PenaltyNorm::L12] {
                let e = hard_energy(&labels, &cost, &graph, norm, &c).unwrap();
                let o = oracle(&cols, &cost, &graph, norm, &c);
                assert!((e.total() - o).abs() < 1e-10, "{} vs {o}", e.total());
                let one_hot = LabelField::one_hot(cost.labels(), &cols);
                let r = relaxed_energy(&one_hot, &cost, &graph, norm, &c).unwrap();
                assert!((r.data - e.data).abs() < 1e-10);
                assert!((r.smoothness - e.smoothness).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn relaxed_label_cost_counts_model_columns() {
        let cost = CostMatrix::new(2, 3, vec![0.0; 6], Some(1.0)).unwrap();
        let g = build_grid4(2, 1);
        let phi = LabelField::new(PointField::from_vec(2, 4, vec![0.25; 8]).unwrap()).unwrap();
        let e = relaxed_energy(&phi, &cost, &g, PenaltyNorm::L11, &cfg(1.0, 2.0)).unwrap();
        assert_eq!(e.label_cost, 6.0);
        assert!((e.data - 0.5).abs() < 1e-15);
    }
}
