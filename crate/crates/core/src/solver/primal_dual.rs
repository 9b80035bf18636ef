use rayon::prelude::*;

use crate::field::{EdgeField, LabelField, PointField, ShapeMismatch};
use crate::neighborhood::{divergence_into, gradient_into, penalty_value, NeighborhoodGraph, PenaltyNorm, PAR_MIN_LEN};

use super::projection::project_simplex_in_place;
use super::{CostMatrix, Label, SolverConfig};

/// Diagonal preconditioners for the operator `lambda * grad`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepSizes {
    /// Dual step per edge: inverse absolute row sum.
    pub tau: Vec<f64>,
    /// Primal step per point: inverse absolute column sum.
    pub alpha: Vec<f64>,
}

/// Row and column sums of `|lambda * grad|`. Zero sums (isolated points,
/// zero-weight edges or `lambda = 0`) fall back to a unit step.
pub fn precondition(graph: &NeighborhoodGraph, lambda: f64) -> StepSizes {
    let inv = |s: f64| if s > 0.0 { 1.0 / s } else { 1.0 };
    let tau = graph.edges().iter().map(|e| inv(2.0 * lambda * e.weight)).collect();
    let alpha = (0..graph.points()).map(|i| inv(lambda * graph.incident_weight(i))).collect();
    StepSizes { tau, alpha }
}

#[derive(Debug, Clone)]
pub struct PrimalDualOutcome {
    pub phi: LabelField,
    pub iterations: usize,
    /// Primal-dual gap after each iteration, when requested.
    pub gap_trace: Vec<f64>,
}

pub fn primal_dual_solve(
    cost: &CostMatrix,
    graph: &NeighborhoodGraph,
    norm: PenaltyNorm,
    cfg: &SolverConfig,
    phi0: &LabelField,
) -> Result<LabelField, ShapeMismatch> {
    primal_dual_solve_detailed(cost, graph, norm, cfg, phi0, false).map(|o| o.phi)
}

/// Iterates until `cfg.inner_iterations` or the early-exit criterion, and
/// returns the iterate with the lowest relaxed energy among the start, every
/// `CHECK_EVERY`-th iterate and the last one.
pub fn primal_dual_solve_detailed(
    cost: &CostMatrix,
    graph: &NeighborhoodGraph,
    norm: PenaltyNorm,
    cfg: &SolverConfig,
    phi0: &LabelField,
    track_gap: bool,
) -> Result<PrimalDualOutcome, ShapeMismatch> {
    const CHECK_EVERY: usize = 25;

    let n = cost.points();
    let labels = cost.labels();
    if phi0.points() != n || phi0.labels() != labels || graph.points() != n {
        return Err(ShapeMismatch::new(
            format!("{n} x {labels} field on a {n}-point graph"),
            format!("{} x {} field, {}-point graph", phi0.points(), phi0.labels(), graph.points()),
        ));
    }
    if labels == 0 || n == 0 {
        return Ok(PrimalDualOutcome {
            phi: phi0.clone(),
            iterations: 0,
            gap_trace: Vec::new(),
        });
    }

    let lambda = cfg.lambda;
    let steps = precondition(graph, lambda);
    let edges = graph.edges();
    // Under the isotropic norm all edges of a group share the smallest step,
    // so the radial projection is the proximal map in the scaled metric.
    let tau: Vec<f64> = match norm {
        PenaltyNorm::L11 => steps.tau.clone(),
        PenaltyNorm::L12 => edges
            .iter()
            .map(|e| {
                steps.tau[graph.group(e.src)]
                    .iter()
                    .copied()
                    .fold(f64::INFINITY, f64::min)
            })
            .collect(),
    };
    let alpha = &steps.alpha;
    let rows_per_task = PAR_MIN_LEN / labels + 1;

    let mut phi = phi0.field().clone();
    let mut phi_bar = phi.clone();
    let mut psi = EdgeField::zeros(graph.num_edges(), labels);
    let mut grad = EdgeField::zeros(graph.num_edges(), labels);
    let mut div = PointField::zeros(n, labels);
    let mut group_scale = PointField::zeros(if norm == PenaltyNorm::L12 { n } else { 0 }, labels);

    let energy_of = |f: &PointField, grad: &mut EdgeField| -> f64 {
        gradient_into(graph, f, grad).expect("shapes checked");
        f.dot(cost.field()) + lambda * penalty_value(norm, graph, grad)
    };
    let mut best_energy = energy_of(&phi, &mut grad);
    let mut best = phi.clone();

    let mut gap_trace = Vec::new();
    let mut quiet = 0;
    let mut iterations = 0;
    let use_dual = lambda > 0.0 && graph.num_edges() > 0;

    for it in 1..=cfg.inner_iterations {
        iterations = it;
        if use_dual {
            gradient_into(graph, &phi_bar, &mut grad)?;
            psi.values_mut()
                .par_chunks_mut(labels)
                .with_min_len(rows_per_task)
                .zip(grad.values().par_chunks(labels))
                .zip(tau.par_iter())
                .for_each(|((p, g), &t)| {
                    let s = t * lambda;
                    for l in 0..labels {
                        p[l] += s * g[l];
                    }
                    if norm == PenaltyNorm::L11 {
                        p.iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0));
                    }
                });
            if norm == PenaltyNorm::L12 {
                let psi_ref = &psi;
                group_scale
                    .values_mut()
                    .par_chunks_mut(labels)
                    .with_min_len(rows_per_task)
                    .enumerate()
                    .for_each(|(i, scale)| {
                        scale.iter_mut().for_each(|v| *v = 0.0);
                        for e in graph.group(i) {
                            for l in 0..labels {
                                scale[l] += psi_ref.get(e, l).powi(2);
                            }
                        }
                        scale.iter_mut().for_each(|v| *v = 1.0 / v.sqrt().max(1.0));
                    });
                let gs = &group_scale;
                psi.values_mut()
                    .par_chunks_mut(labels)
                    .with_min_len(rows_per_task)
                    .zip(edges.par_iter())
                    .for_each(|(p, e)| {
                        let s = gs.row(e.src);
                        for l in 0..labels {
                            p[l] *= s[l];
                        }
                    });
            }
            debug_assert!(dual_feasible(&psi, graph, norm));
            divergence_into(graph, &psi, &mut div)?;
        }

        let theta = cfg.theta;
        let div_ref = &div;
        let change = phi
            .values_mut()
            .par_chunks_mut(labels)
            .with_min_len(rows_per_task)
            .zip(phi_bar.values_mut().par_chunks_mut(labels))
            .enumerate()
            .map_init(
                || (Vec::with_capacity(labels), Vec::with_capacity(labels), vec![0.0; labels]),
                |(scratch, parked, prev), (i, (row, bar))| {
                    prev.copy_from_slice(row);
                    let rho = cost.field().row(i);
                    let a = alpha[i];
                    if use_dual {
                        let d = div_ref.row(i);
                        for l in 0..labels {
                            row[l] -= a * (rho[l] + lambda * d[l]);
                        }
                    } else {
                        for l in 0..labels {
                            row[l] -= a * rho[l];
                        }
                    }
                    project_simplex_in_place(row, scratch, parked);
                    let mut m = 0.0_f64;
                    for l in 0..labels {
                        let delta = row[l] - prev[l];
                        bar[l] = row[l] + theta * delta;
                        m = nan_max(m, delta.abs());
                    }
                    m
                },
            )
            .reduce(|| 0.0, nan_max);
        assert!(change.is_finite(), "primal-dual iterate became non-finite");
        debug_assert!(LabelField::from_field_unchecked(phi.clone()).is_valid());

        if track_gap {
            let primal = energy_of(&phi, &mut grad);
            gap_trace.push(primal - dual_value(cost, &div, lambda, use_dual));
        }
        if it % CHECK_EVERY == 0 {
            let e = energy_of(&phi, &mut grad);
            if e < best_energy {
                best_energy = e;
                best.values_mut().copy_from_slice(phi.values());
            }
        }
        if change < cfg.early_exit_tol {
            quiet += 1;
            if quiet >= cfg.early_exit_window {
                break;
            }
        } else {
            quiet = 0;
        }
    }
    if iterations % CHECK_EVERY != 0 {
        let e = energy_of(&phi, &mut grad);
        if e < best_energy {
            best = phi;
        }
    }
    Ok(PrimalDualOutcome {
        phi: LabelField::from_field_unchecked(best),
        iterations,
        gap_trace,
    })
}

/// Largest value, with NaN absorbing.
fn nan_max(a: f64, b: f64) -> f64 {
    if a.is_nan() || b.is_nan() {
        f64::NAN
    } else {
        a.max(b)
    }
}

/// Dual objective: the data term minimized pointwise over the simplex.
fn dual_value(cost: &CostMatrix, div: &PointField, lambda: f64, use_dual: bool) -> f64 {
    (0..cost.points())
        .map(|i| {
            let rho = cost.field().row(i);
            let d = div.row(i);
            (0..rho.len())
                .map(|l| rho[l] + if use_dual { lambda * d[l] } else { 0.0 })
                .fold(f64::INFINITY, f64::min)
        })
        .sum()
}

fn dual_feasible(psi: &EdgeField, graph: &NeighborhoodGraph, norm: PenaltyNorm) -> bool {
    const TOL: f64 = 1e-9;
    match norm {
        PenaltyNorm::L11 => psi.values().iter().all(|v| v.abs() <= 1.0 + TOL),
        PenaltyNorm::L12 => (0..graph.points()).all(|i| {
            (0..psi.labels()).all(|l| {
                graph.group(i).map(|e| psi.get(e, l).powi(2)).sum::<f64>().sqrt() <= 1.0 + TOL
            })
        }),
    }
}

/// Per-row argmax. Ties go to the lowest column, so the outlier column
/// (stored last) never wins one.
pub fn threshold_labels(phi: &LabelField, cost: &CostMatrix) -> Vec<Label> {
    (0..phi.points())
        .map(|i| {
            let row = phi.row(i);
            let mut best = 0;
            for l in 1..row.len() {
                if row[l] > row[best] {
                    best = l;
                }
            }
            cost.label_of(best)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Vec2;
    use crate::neighborhood::{build_grid4, build_knn, Edge, GraphKind};
    use crate::solver::energy::relaxed_energy;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg(lambda: f64) -> SolverConfig {
        SolverConfig {
            lambda,
            beta: 0.0,
            ..Default::default()
        }
    }

    #[test]
    fn single_edge_steps() {
        let g = NeighborhoodGraph::from_edges(
            2,
            vec![Edge {
                src: 0,
                dst: 1,
                weight: 0.5,
            }],
            GraphKind::Custom,
        )
        .unwrap();
        let s = precondition(&g, 3.0);
        assert!((s.tau[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((s.alpha[0] - 1.0 / 1.5).abs() < 1e-15);
        assert!((s.alpha[1] - 1.0 / 1.5).abs() < 1e-15);
    }

    #[test]
    fn grid_interior_alpha() {
        let s = precondition(&build_grid4(3, 3), 2.0);
        assert!((s.alpha[4] - 1.0 / 8.0).abs() < 1e-15);
        assert!((s.alpha[0] - 1.0 / 4.0).abs() < 1e-15);
        let iso = precondition(&build_grid4(1, 1), 2.0);
        assert_eq!(iso.alpha, vec![1.0]);
    }

    #[test]
    fn steps_match_dense_operator() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..30 {
            let n = rng.random_range(2..20);
            let pts: Vec<Vec2> = (0..n).map(|_| Vec2::new(rng.random(), rng.random())).collect();
            let g = build_knn(&pts, rng.random_range(1..5), 0.2);
            let lambda = rng.random_range(0.1..3.0);
            let mut k = vec![vec![0.0; n]; g.num_edges()];
            for (r, e) in g.edges().iter().enumerate() {
                k[r][e.src] -= lambda * e.weight;
                k[r][e.dst] += lambda * e.weight;
            }
            let s = precondition(&g, lambda);
            for (r, row) in k.iter().enumerate() {
                let sum: f64 = row.iter().map(|v| v.abs()).sum();
                assert!((s.tau[r] - 1.0 / sum).abs() < 1e-12);
            }
            for i in 0..n {
                let sum: f64 = k.iter().map(|row| row[i].abs()).sum();
                let expected = if sum > 0.0 { 1.0 / sum } else { 1.0 };
                assert!((s.alpha[i] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn decoupled_problem_is_pointwise_argmin() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 30;
        let values: Vec<f64> = (0..n * 3).map(|_| rng.random_range(0.0..5.0)).collect();
        let cost = CostMatrix::new(n, 3, values, Some(2.5)).unwrap();
        let g = build_grid4(6, 5);
        let phi = primal_dual_solve(&cost, &g, PenaltyNorm::L11, &cfg(0.0), &LabelField::uniform(n, 4)).unwrap();
        for i in 0..n {
            let row = cost.field().row(i);
            let arg = (0..4).min_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            assert!((phi.get(i, arg) - 1.0).abs() < 1e-9, "{:?} {:?}", row, phi.row(i));
        }
    }

    #[test]
    fn single_label_converges_to_ones() {
        let cost = CostMatrix::new(4, 1, vec![0.0; 4], None).unwrap();
        let phi = primal_dual_solve(&cost, &build_grid4(2, 2), PenaltyNorm::L12, &cfg(1.0), &LabelField::uniform(4, 1)).unwrap();
        assert!(phi.field().values().iter().all(|v| (*v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn energy_never_above_start_and_gap_shrinks() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for trial in 0..10 {
            let (w, h) = (8, 6);
            let n = w * h;
            let values: Vec<f64> = (0..n * 3).map(|_| rng.random_range(0.0..4.0)).collect();
            let cost = CostMatrix::new(n, 3, values, Some(2.0)).unwrap();
            let g = build_grid4(w, h);
            let norm = if trial % 2 == 0 { PenaltyNorm::L11 } else { PenaltyNorm::L12 };
            let c = SolverConfig {
                inner_iterations: 400,
                early_exit_window: usize::MAX,
                ..cfg(1.5)
            };
            let phi0 = LabelField::uniform(n, 4);
            let out = primal_dual_solve_detailed(&cost, &g, norm, &c, &phi0, true).unwrap();
            assert!(out.phi.is_valid());
            let e0 = relaxed_energy(&phi0, &cost, &g, norm, &c).unwrap().total();
            let e1 = relaxed_energy(&out.phi, &cost, &g, norm, &c).unwrap().total();
            assert!(e1 <= e0 + 1e-6);
            // Windowed trend: mean gap per 50-iteration window decreases.
            let means: Vec<f64> = out
                .gap_trace
                .chunks(50)
                .map(|w| w.iter().sum::<f64>() / w.len() as f64)
                .collect();
            assert!(means.windows(2).all(|p| p[1] <= p[0] + 1e-9), "{means:?}");
            assert!(out.gap_trace.iter().all(|g| *g >= -1e-9));
        }
    }

    #[test]
    fn threshold_ties() {
        let cost = CostMatrix::new(3, 2, vec![0.0; 6], Some(1.0)).unwrap();
        let phi = LabelField::new(
            PointField::from_vec(3, 3, vec![0.5, 0.5, 0.0, 0.0, 0.5, 0.5, 0.0, 0.0, 1.0]).unwrap(),
        )
        .unwrap();
        assert_eq!(
            threshold_labels(&phi, &cost),
            vec![Label::model(0), Label::model(1), Label::OUTLIER]
        );
    }

    #[test]
    fn threshold_matches_naive_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cost = CostMatrix::new(50, 4, vec![0.0; 200], Some(1.0)).unwrap();
        let raw: Vec<f64> = (0..250).map(|_| (rng.random_range(0..4) as f64) / 4.0).collect();
        let mut f = PointField::from_vec(50, 5, raw).unwrap();
        for i in 0..50 {
            let p = crate::solver::project_simplex(f.row(i));
            f.row_mut(i).copy_from_slice(&p);
        }
        let phi = LabelField::from_field_unchecked(f);
        let got = threshold_labels(&phi, &cost);
        for i in 0..50 {
            let row = phi.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let first = row.iter().position(|v| *v == max).unwrap();
            assert_eq!(got[i], cost.label_of(first));
        }
    }
}
