use crate::field::{LabelField, PointField, ShapeMismatch};
use crate::neighborhood::{NeighborhoodGraph, PenaltyNorm};
use crate::proposals::{propose_models, ProposalConfig, ProposalError};

use super::energy::{hard_energy, EnergyTriple};
use super::merge::{merge_models, set_cost, MergeContext};
use super::primal_dual::{primal_dual_solve, threshold_labels};
use super::{inliers_by_model, CostMatrix, FitError, FitResult, Label, ModelProblem, SolverConfig};

/// Proposes models by random sampling, then runs [`coral_fit_with_models`].
pub fn coral_fit<P: ModelProblem>(
    problem: &P,
    graph: &NeighborhoodGraph,
    norm: PenaltyNorm,
    cfg: &SolverConfig,
    proposals: &ProposalConfig,
) -> Result<FitResult<P::Model>, FitError> {
    cfg.validate()?;
    let models = match propose_models(problem, proposals) {
        Ok(p) => p.into_iter().map(|p| p.model).collect(),
        Err(ProposalError::NoModelsProposed) => return Err(FitError::NoModelsProposed),
        Err(e) => return Err(FitError::InvalidConfig(e.to_string())),
    };
    coral_fit_with_models(problem, graph, norm, cfg, models)
}

/// Outer loop: relaxed solve, threshold, merge, re-estimate.
///
/// A new state is accepted only when its hard-label energy does not exceed
/// the previous one, so the returned trace is non-increasing. The loop stops
/// on the first rejected state, when the improvement drops below
/// `convergence_eps` times the first energy, or after `max_outer` rounds.
pub fn coral_fit_with_models<P: ModelProblem>(
    problem: &P,
    graph: &NeighborhoodGraph,
    norm: PenaltyNorm,
    cfg: &SolverConfig,
    initial: Vec<P::Model>,
) -> Result<FitResult<P::Model>, FitError> {
    cfg.validate()?;
    let n = problem.len();
    if graph.points() != n {
        return Err(ShapeMismatch::new(format!("{n}-point graph"), format!("{}", graph.points())).into());
    }
    if initial.is_empty() {
        return Err(FitError::NoModelsProposed);
    }

    let mut models = initial;
    let mut cost = CostMatrix::build(problem, &models, cfg.gamma);
    let mut phi = LabelField::uniform(n, models.len() + 1);
    let mut accepted: Option<(Vec<Label>, Vec<P::Model>, f64)> = None;
    let mut trace: Vec<EnergyTriple> = Vec::new();
    let mut iterations = 0;

    for _ in 0..cfg.max_outer {
        iterations += 1;
        phi = primal_dual_solve(&cost, graph, norm, cfg, &phi)?;
        let mut labels = threshold_labels(&phi, &cost);
        for (i, l) in labels.iter_mut().enumerate() {
            if problem.forced_outlier(i) {
                *l = Label::OUTLIER;
            }
        }

        // Model column lineage, so the relaxed field can be carried over.
        let (mut next, mut labels, mut lineage) = compact(models, &labels);
        if cfg.merge && !next.is_empty() {
            let merged = merge_models(problem, next, &labels, cfg, Some(MergeContext { graph, norm }));
            lineage = merged
                .groups
                .iter()
                .map(|g| g.iter().flat_map(|&k| lineage[k].iter().copied()).collect())
                .collect();
            next = merged.models;
            labels = merged.labels;
        }
        let (next, labels, kept) = reestimate(problem, next, labels);
        let lineage: Vec<Vec<usize>> = kept.into_iter().map(|k| std::mem::take(&mut lineage[k])).collect();

        let next_cost = CostMatrix::build(problem, &next, cfg.gamma);
        let energy = hard_energy(&labels, &next_cost, graph, norm, cfg)?;
        let total = energy.total();
        let previous = accepted.as_ref().map(|a| a.2);
        if let Some(prev) = previous {
            if total > prev {
                break;
            }
        }
        trace.push(energy);
        let warm = carry_over(&phi, &lineage, cost.num_models());
        let no_models = next.is_empty();
        accepted = Some((labels, next.clone(), total));
        models = next;
        cost = next_cost;
        phi = warm;

        if let Some(prev) = previous {
            let e0 = trace[0].total();
            if prev - total < cfg.convergence_eps * e0 {
                break;
            }
        }
        if no_models {
            break;
        }
    }

    let (labels, models, _) = accepted.expect("first outer iteration is always accepted");
    Ok(FitResult {
        labels,
        models,
        energy_trace: trace,
        iterations,
    })
}

/// Drops models without points; returns the survivors, relabeled points and
/// each survivor's original column.
fn compact<M>(models: Vec<M>, labels: &[Label]) -> (Vec<M>, Vec<Label>, Vec<Vec<usize>>) {
    let mut used = vec![false; models.len()];
    for l in labels {
        if let Some(k) = l.model_index() {
            used[k] = true;
        }
    }
    let mut remap = vec![Label::OUTLIER; models.len()];
    let mut lineage = Vec::new();
    let mut out = Vec::new();
    for (k, m) in models.into_iter().enumerate() {
        if used[k] {
            remap[k] = Label::model(out.len());
            lineage.push(vec![k]);
            out.push(m);
        }
    }
    let labels = labels
        .iter()
        .map(|l| l.model_index().map_or(Label::OUTLIER, |k| remap[k]))
        .collect();
    (out, labels, lineage)
}

/// Refits every model on its inliers. Models with fewer inliers than a
/// minimal sample are deleted and their points become outliers; a refit
/// replaces the model only if it lowers the inliers' cost.
fn reestimate<P: ModelProblem>(
    problem: &P,
    models: Vec<P::Model>,
    labels: Vec<Label>,
) -> (Vec<P::Model>, Vec<Label>, Vec<usize>) {
    let inliers = inliers_by_model(&labels, models.len());
    let mut remap = vec![Label::OUTLIER; models.len()];
    let mut kept = Vec::new();
    let mut out = Vec::new();
    for (k, model) in models.into_iter().enumerate() {
        let pts = &inliers[k];
        if pts.len() < problem.sample_size() {
            continue;
        }
        let refit = problem
            .estimate(pts)
            .filter(|m| set_cost(problem, m, pts) < set_cost(problem, &model, pts));
        remap[k] = Label::model(out.len());
        kept.push(k);
        out.push(refit.unwrap_or(model));
    }
    let labels = labels
        .iter()
        .map(|l| l.model_index().map_or(Label::OUTLIER, |k| remap[k]))
        .collect();
    (out, labels, kept)
}

/// Warm start for the next model set: each new column sums the columns it
/// descends from, deleted columns are dropped and rows renormalized.
fn carry_over(phi: &LabelField, lineage: &[Vec<usize>], old_models: usize) -> LabelField {
    let n = phi.points();
    let cols = lineage.len() + 1;
    let mut f = PointField::zeros(n, cols);
    for i in 0..n {
        let src = phi.row(i);
        let dst = f.row_mut(i);
        for (j, group) in lineage.iter().enumerate() {
            dst[j] = group.iter().map(|&k| src[k]).sum();
        }
        dst[cols - 1] = src[old_models];
        let sum: f64 = dst.iter().sum();
        if sum > 1e-12 {
            dst.iter_mut().for_each(|v| *v /= sum);
        } else {
            dst.iter_mut().for_each(|v| *v = 1.0 / cols as f64);
        }
    }
    LabelField::from_field_unchecked(f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Vec2;
    use crate::neighborhood::build_grid4;
    use crate::solver::FixedCostProblem;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fixed(rng: &mut ChaCha8Rng, n: usize, cols: usize) -> FixedCostProblem {
        let costs = (0..n * cols).map(|_| rng.random_range(0.0..6.0)).collect();
        FixedCostProblem::new(n, cols, costs, vec![Vec2::zeros(); n]).unwrap()
    }

    #[test]
    fn lambda_zero_without_merging_is_pointwise_argmin() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (w, h) = (6, 5);
        let p = fixed(&mut rng, w * h, 4);
        let cfg = SolverConfig {
            lambda: 0.0,
            beta: 0.0,
            gamma: 3.0,
            merge: false,
            ..Default::default()
        };
        let res = coral_fit_with_models(&p, &build_grid4(w, h), PenaltyNorm::L11, &cfg, vec![0, 1, 2, 3]).unwrap();
        for i in 0..w * h {
            let best = (0..4)
                .map(|k| (p.cost(&k, i), k))
                .min_by(|a, b| a.0.total_cmp(&b.0))
                .unwrap();
            if best.0 < 3.0 {
                assert_eq!(res.labels[i].model_index().map(|k| res.models[k]), Some(best.1));
            } else {
                assert!(res.labels[i].is_outlier());
            }
        }
    }

    #[test]
    fn gamma_dominance_gives_all_outliers() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let costs: Vec<f64> = (0..36).map(|_| rng.random_range(1.0..2.0)).collect();
        let p2 = FixedCostProblem::new(12, 3, costs, vec![Vec2::zeros(); 12]).unwrap();
        let cfg = SolverConfig {
            gamma: 0.5,
            beta: 1.0,
            ..Default::default()
        };
        let res = coral_fit_with_models(&p2, &build_grid4(4, 3), PenaltyNorm::L11, &cfg, vec![0, 1, 2]).unwrap();
        assert!(res.labels.iter().all(|l| l.is_outlier()));
        assert!(res.models.is_empty());
    }

    #[test]
    fn trace_is_monotone_and_runs_are_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let p = fixed(&mut rng, 20, 5);
            let cfg = SolverConfig {
                lambda: rng.random_range(0.1..2.0),
                beta: rng.random_range(0.5..5.0),
                gamma: 4.0,
                ..Default::default()
            };
            let g = build_grid4(5, 4);
            let a = coral_fit_with_models(&p, &g, PenaltyNorm::L12, &cfg, (0..5).collect()).unwrap();
            let b = coral_fit_with_models(&p, &g, PenaltyNorm::L12, &cfg, (0..5).collect()).unwrap();
            assert_eq!(a, b);
            assert!(a.energy_trace.windows(2).all(|w| w[1].total() <= w[0].total()));
        }
    }

    #[test]
    fn empty_model_list_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = fixed(&mut rng, 4, 1);
        let r = coral_fit_with_models(&p, &build_grid4(2, 2), PenaltyNorm::L11, &SolverConfig::default(), vec![]);
        assert_eq!(r, Err(FitError::NoModelsProposed));
    }
}
