use std::collections::HashMap;

use rayon::prelude::*;

use crate::neighborhood::{NeighborhoodGraph, PenaltyNorm, PAR_MIN_LEN};

use super::energy::group_smoothness;
use super::{inliers_by_model, point_cost, Label, ModelProblem, SolverConfig};

/// Smoothness term to account for when judging a merge.
#[derive(Debug, Clone, Copy)]
pub struct MergeContext<'a> {
    pub graph: &'a NeighborhoodGraph,
    pub norm: PenaltyNorm,
}

const OUTLIER_OWNER: usize = usize::MAX;

#[derive(Debug, Clone)]
pub struct MergeOutcome<M> {
    pub models: Vec<M>,
    pub labels: Vec<Label>,
    /// For every output model, the input model indices it absorbed.
    pub groups: Vec<Vec<usize>>,
    /// Pairwise merges accepted.
    pub merges: usize,
    /// Models dissolved into the remaining labels.
    pub dissolved: usize,
    /// Total-energy change of every accepted step, in order; all negative.
    pub steps: Vec<f64>,
}

struct Slot<M> {
    id: usize,
    model: M,
    inliers: Vec<usize>,
    /// Data cost of `inliers` under `model`.
    cost: f64,
    origin: Vec<usize>,
    /// Cost of every point under `model`.
    costs: Vec<f64>,
    /// Step after which cached smoothness changes involving this slot are stale.
    touched: usize,
}

struct PairEval<M> {
    model: M,
    cost: f64,
    union: Vec<usize>,
    smooth: f64,
    /// Step at which `smooth` was computed.
    at: usize,
}

enum Move {
    Merge(usize, usize),
    Dissolve(usize, Vec<(usize, f64, usize)>),
    DissolvePair(usize, usize),
}

/// Greedy model merging by best improvement. Every step applies the move
/// that lowers the total energy most, among:
///
/// - merging a pair of models (within `merge_tolerance` parameter distance)
///   into one refit on the union of their inliers;
/// - dissolving one model, each of its inliers going to its cheapest
///   remaining label (another model, or the outlier label at `gamma`).
///
/// A move removes one label cost, so it is taken when its data change plus
/// the weighted smoothness change is below `beta`. Without a
/// [`MergeContext`] the smoothness change is ignored; merging never raises
/// it. Once no single move pays off, neighboring pairs of models may be
/// dissolved together into the outlier label when that saves more than
/// `2 beta`. Ties go to the pair with the smaller parameter distance.
pub fn merge_models<P: ModelProblem>(
    problem: &P,
    models: Vec<P::Model>,
    labels: &[Label],
    cfg: &SolverConfig,
    context: Option<MergeContext<'_>>,
) -> MergeOutcome<P::Model> {
    let n = labels.len();
    let original = models.len();
    let inliers = inliers_by_model(labels, original);
    let column = |model: &P::Model| -> Vec<f64> {
        (0..n)
            .into_par_iter()
            .with_min_len(PAR_MIN_LEN)
            .map(|i| point_cost(problem, model, i))
            .collect()
    };
    let mut slots: Vec<Slot<P::Model>> = models
        .into_iter()
        .zip(inliers)
        .enumerate()
        // Models without points cost nothing under the hard energy.
        .filter(|(_, (_, inliers))| !inliers.is_empty())
        .map(|(k, (model, inliers))| {
            let costs = column(&model);
            Slot {
                id: k,
                cost: inliers.iter().map(|&i| costs[i]).sum(),
                model,
                inliers,
                origin: vec![k],
                costs,
                touched: 0,
            }
        })
        .collect();
    let mut next_id = original;
    let mut owner: Vec<usize> = labels
        .iter()
        .map(|l| l.model_index().unwrap_or(OUTLIER_OWNER))
        .collect();
    let mut pairs: HashMap<(usize, usize), Option<PairEval<P::Model>>> = HashMap::new();
    let mut steps = Vec::new();
    let (mut merges, mut dissolved) = (0, 0);

    loop {
        let step = steps.len() + 1;
        // Pair candidates; refits are cached by slot id, smoothness changes
        // are refreshed once a slot's neighborhood changed.
        let mut candidates = Vec::new();
        for a in 0..slots.len() {
            for b in a + 1..slots.len() {
                let d = problem.distance(&slots[a].model, &slots[b].model);
                let d = if d.is_nan() { f64::INFINITY } else { d };
                if d <= cfg.merge_tolerance {
                    candidates.push((d, a, b));
                }
            }
        }
        let fresh: Vec<((usize, usize), Option<PairEval<P::Model>>)> = candidates
            .par_iter()
            .filter_map(|&(_, a, b)| {
                let (sa, sb) = (&slots[a], &slots[b]);
                let key = (sa.id, sb.id);
                let stale = |e: &PairEval<P::Model>| e.at < sa.touched.max(sb.touched);
                match pairs.get(&key) {
                    Some(None) => None,
                    Some(Some(e)) if !stale(e) => None,
                    Some(Some(e)) => {
                        let smooth = smooth_delta(context, cfg, &owner, &e.union, &|p| merged_owner(&owner, p, key));
                        Some((key, Some(PairEval { model: e.model.clone(), cost: e.cost, union: e.union.clone(), smooth, at: step })))
                    }
                    None => {
                        let mut union: Vec<usize> = sa.inliers.iter().chain(&sb.inliers).copied().collect();
                        union.sort_unstable();
                        let eval = problem.estimate(&union).map(|model| {
                            let cost = set_cost(problem, &model, &union);
                            let smooth = smooth_delta(context, cfg, &owner, &union, &|p| merged_owner(&owner, p, key));
                            PairEval { model, cost, union, smooth, at: step }
                        });
                        Some((key, eval))
                    }
                }
            })
            .collect();
        pairs.extend(fresh);

        let mut best: Option<(f64, f64, Move)> = None;
        let mut consider = |delta: f64, dist: f64, mv: Move| {
            let better = match &best {
                None => true,
                Some((bd, bdist, _)) => delta < *bd || (delta == *bd && dist < *bdist),
            };
            if better {
                best = Some((delta, dist, mv));
            }
        };
        for &(d, a, b) in &candidates {
            if let Some(Some(e)) = pairs.get(&(slots[a].id, slots[b].id)) {
                consider(e.cost - slots[a].cost - slots[b].cost + e.smooth, d, Move::Merge(a, b));
            }
        }
        let dissolves: Vec<(f64, Vec<(usize, f64, usize)>)> = (0..slots.len())
            .into_par_iter()
            .map(|k| {
                let moves = dissolve_moves(problem, &slots, k, cfg.gamma);
                let gained: f64 = moves.iter().map(|m| m.1).sum();
                let target: HashMap<usize, usize> = moves.iter().map(|&(p, _, to)| (p, to)).collect();
                let relabel = |p: usize| target.get(&p).copied().unwrap_or(owner[p]);
                let delta = gained - slots[k].cost + smooth_delta(context, cfg, &owner, &slots[k].inliers, &relabel);
                (delta, moves)
            })
            .collect();
        for (k, (delta, moves)) in dissolves.into_iter().enumerate() {
            consider(delta, f64::INFINITY, Move::Dissolve(k, moves));
        }

        let mut chosen = best.filter(|(delta, _, _)| *delta < cfg.beta).map(|(delta, _, mv)| (delta - cfg.beta, mv));
        if chosen.is_none() {
            chosen = best_pair_dissolve(context, cfg, &slots, &owner).map(|(delta, a, b)| (delta - 2.0 * cfg.beta, Move::DissolvePair(a, b)));
        }
        let Some((change, mv)) = chosen else { break };
        steps.push(change);

        let mut changed: Vec<usize> = Vec::new();
        match mv {
            Move::Merge(a, b) => {
                let key = (slots[a].id, slots[b].id);
                let e = pairs.remove(&key).flatten().expect("chosen pair was evaluated");
                for &p in &e.union {
                    owner[p] = next_id;
                }
                changed.extend(&e.union);
                let sb = slots.remove(b);
                let sa = slots.remove(a);
                let mut origin = sa.origin;
                origin.extend(sb.origin);
                origin.sort_unstable();
                let costs = column(&e.model);
                slots.push(Slot {
                    id: next_id,
                    model: e.model,
                    inliers: e.union,
                    cost: e.cost,
                    origin,
                    costs,
                    touched: step,
                });
                next_id += 1;
                merges += 1;
            }
            Move::Dissolve(k, moves) => {
                let gone = slots.remove(k);
                changed.extend(&gone.inliers);
                // Recipients change content, so they get fresh ids.
                let mut renamed: HashMap<usize, usize> = HashMap::new();
                for (p, c, to) in moves {
                    if to == OUTLIER_OWNER {
                        owner[p] = OUTLIER_OWNER;
                        continue;
                    }
                    renamed.entry(to).or_insert_with(|| {
                        next_id += 1;
                        next_id - 1
                    });
                    let dst = slots.iter_mut().find(|s| s.id == to).expect("live recipient");
                    dst.inliers.push(p);
                    dst.cost += c;
                }
                for s in slots.iter_mut() {
                    if let Some(&new_id) = renamed.get(&s.id) {
                        s.id = new_id;
                        s.inliers.sort_unstable();
                        s.touched = step;
                        for &p in &s.inliers {
                            owner[p] = new_id;
                        }
                    }
                }
                dissolved += 1;
            }
            Move::DissolvePair(ia, ib) => {
                for (p, o) in owner.iter_mut().enumerate() {
                    if *o == ia || *o == ib {
                        *o = OUTLIER_OWNER;
                        changed.push(p);
                    }
                }
                slots.retain(|s| s.id != ia && s.id != ib);
                dissolved += 2;
            }
        }
        pairs.retain(|k, _| slots.iter().any(|s| s.id == k.0) && slots.iter().any(|s| s.id == k.1));
        if let Some(ctx) = context {
            for id in two_hop_owners(ctx.graph, &owner, &changed) {
                if let Some(s) = slots.iter_mut().find(|s| s.id == id) {
                    s.touched = step;
                }
            }
        }
    }

    let labels = owner
        .iter()
        .map(|&o| {
            slots
                .iter()
                .position(|s| s.id == o)
                .map_or(Label::OUTLIER, Label::model)
        })
        .collect();
    let groups = slots.iter().map(|s| s.origin.clone()).collect();
    MergeOutcome {
        models: slots.into_iter().map(|s| s.model).collect(),
        labels,
        groups,
        merges,
        dissolved,
        steps,
    }
}

fn merged_owner(owner: &[usize], p: usize, (ia, ib): (usize, usize)) -> usize {
    if owner[p] == ia || owner[p] == ib {
        usize::MAX - 1
    } else {
        owner[p]
    }
}

/// Change of the weighted smoothness term when `points` are relabeled.
fn smooth_delta(
    context: Option<MergeContext<'_>>,
    cfg: &SolverConfig,
    owner: &[usize],
    points: &[usize],
    relabel: &(dyn Fn(usize) -> usize + Sync),
) -> f64 {
    let Some(ctx) = context else { return 0.0 };
    if cfg.lambda == 0.0 {
        return 0.0;
    }
    let mut groups: Vec<usize> = Vec::with_capacity(points.len() * 3);
    for &p in points {
        groups.push(p);
        groups.extend(ctx.graph.incident(p).iter().map(|&(e, _)| ctx.graph.edges()[e].src));
    }
    groups.sort_unstable();
    groups.dedup();
    let before: f64 = groups.iter().map(|&i| group_smoothness(ctx.graph, ctx.norm, i, |p| owner[p])).sum();
    let after: f64 = groups.iter().map(|&i| group_smoothness(ctx.graph, ctx.norm, i, relabel)).sum();
    cfg.lambda * (after - before)
}

/// Two models dissolved together save 2 beta. Unless they share an edge the
/// change is the sum of the single changes, so only adjacent pairs matter.
fn best_pair_dissolve<M>(
    context: Option<MergeContext<'_>>,
    cfg: &SolverConfig,
    slots: &[Slot<M>],
    owner: &[usize],
) -> Option<(f64, usize, usize)> {
    let ctx = context?;
    let mut adjacent: Vec<(usize, usize)> = ctx
        .graph
        .edges()
        .iter()
        .filter_map(|e| {
            let (a, b) = (owner[e.src], owner[e.dst]);
            (a != b && a != OUTLIER_OWNER && b != OUTLIER_OWNER).then(|| (a.min(b), a.max(b)))
        })
        .collect();
    adjacent.sort_unstable();
    adjacent.dedup();
    let slot = |id: usize| slots.iter().find(|s| s.id == id).expect("owner ids are live slots");
    adjacent
        .into_iter()
        .map(|(ia, ib)| {
            let (sa, sb) = (slot(ia), slot(ib));
            let union: Vec<usize> = sa.inliers.iter().chain(&sb.inliers).copied().collect();
            let relabel = |p: usize| if owner[p] == ia || owner[p] == ib { OUTLIER_OWNER } else { owner[p] };
            let delta = cfg.gamma * union.len() as f64 - sa.cost - sb.cost + smooth_delta(context, cfg, owner, &union, &relabel);
            (delta, ia, ib)
        })
        .filter(|(delta, _, _)| *delta < 2.0 * cfg.beta)
        .min_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)))
}

/// Owners of points within two graph hops of `changed`: the slots whose
/// smoothness changes may depend on the relabeled points.
fn two_hop_owners(graph: &NeighborhoodGraph, owner: &[usize], changed: &[usize]) -> Vec<usize> {
    let mut seen = vec![false; owner.len()];
    let mut frontier: Vec<usize> = changed.to_vec();
    for &p in &frontier {
        seen[p] = true;
    }
    for _ in 0..2 {
        let mut next = Vec::new();
        for &p in &frontier {
            for &(e, _) in graph.incident(p) {
                let edge = &graph.edges()[e];
                for q in [edge.src, edge.dst] {
                    if !seen[q] {
                        seen[q] = true;
                        next.push(q);
                    }
                }
            }
        }
        frontier = next;
    }
    let mut ids: Vec<usize> = seen
        .iter()
        .enumerate()
        .filter(|(_, s)| **s)
        .map(|(p, _)| owner[p])
        .filter(|&o| o != OUTLIER_OWNER)
        .collect();
    ids.sort_unstable();
    ids.dedup();
    ids
}

/// For each inlier of `slots[k]`: (point, cost under its new label, new owner).
fn dissolve_moves<M>(problem: &impl ModelProblem<Model = M>, slots: &[Slot<M>], k: usize, gamma: f64) -> Vec<(usize, f64, usize)> {
    slots[k]
        .inliers
        .iter()
        .map(|&p| {
            let mut best = (gamma, OUTLIER_OWNER);
            if !problem.forced_outlier(p) {
                for (j, s) in slots.iter().enumerate() {
                    if j != k && s.costs[p] < best.0 {
                        best = (s.costs[p], s.id);
                    }
                }
            }
            (p, best.0, best.1)
        })
        .collect()
}

pub(crate) fn set_cost<P: ModelProblem>(problem: &P, model: &P::Model, points: &[usize]) -> f64 {
    points.iter().map(|&i| point_cost(problem, model, i)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Vec2;
    use crate::solver::FixedCostProblem;

    fn problem(costs: Vec<f64>, cols: usize) -> FixedCostProblem {
        let n = costs.len() / cols;
        FixedCostProblem::new(n, cols, costs, vec![Vec2::zeros(); n]).unwrap()
    }

    #[test]
    fn identical_models_merge() {
        // Two columns with identical costs: the joint refit costs exactly the
        // sum of the separate costs.
        let p = problem(vec![1.0, 1.0, 2.0, 2.0, 0.5, 0.5, 0.25, 0.25], 2);
        let labels = [Label::model(0), Label::model(0), Label::model(1), Label::model(1)];
        let cfg = SolverConfig {
            beta: 3.0,
            gamma: 100.0,
            ..Default::default()
        };
        let out = merge_models(&p, vec![0, 1], &labels, &cfg, None);
        assert_eq!(out.merges, 1);
        assert_eq!(out.models.len(), 1);
        assert_eq!(out.groups, vec![vec![0, 1]]);
        assert!(out.labels.iter().all(|l| *l == Label::model(0)));
    }

    #[test]
    fn expensive_merge_rejected() {
        // Each model fits its own points at cost 0 and the other's at 10 beta.
        let beta = 2.0;
        let bad = 10.0 * beta;
        let p = problem(vec![0.0, bad, 0.0, bad, bad, 0.0, bad, 0.0], 2);
        let labels = [Label::model(0), Label::model(0), Label::model(1), Label::model(1)];
        let cfg = SolverConfig {
            beta,
            gamma: 100.0,
            ..Default::default()
        };
        let out = merge_models(&p, vec![0, 1], &labels, &cfg, None);
        assert_eq!(out.merges, 0);
        assert_eq!(out.models, vec![0, 1]);
        assert_eq!(out.labels, labels.to_vec());
    }

    #[test]
    fn outliers_survive_and_tolerance_filters() {
        let p = problem(vec![0.0, 0.0, 0.0, 0.0, 1.0, 1.0], 2);
        let labels = [Label::model(0), Label::OUTLIER, Label::model(1)];
        let cfg = SolverConfig {
            beta: 5.0,
            gamma: 100.0,
            merge_tolerance: 0.5,
            ..Default::default()
        };
        let out = merge_models(&p, vec![0, 1], &labels, &cfg, None);
        assert_eq!(out.merges, 0);
        assert_eq!(out.labels[1], Label::OUTLIER);
    }

    #[test]
    fn weak_model_dissolves_into_outliers() {
        // Model 1 explains one point at cost 1.0; the outlier label would cost
        // 1.5, which is less than one beta more.
        let p = problem(vec![0.0, 9.0, 0.0, 9.0, 9.0, 1.0], 2);
        let labels = [Label::model(0), Label::model(0), Label::model(1)];
        let cfg = SolverConfig {
            beta: 1.0,
            gamma: 1.5,
            ..Default::default()
        };
        let out = merge_models(&p, vec![0, 1], &labels, &cfg, None);
        assert_eq!((out.merges, out.dissolved), (0, 1));
        assert_eq!(out.models, vec![0]);
        assert_eq!(out.labels, vec![Label::model(0), Label::model(0), Label::OUTLIER]);
        assert_eq!(out.groups, vec![vec![0]]);
    }

    /// Every accepted step lowers the total energy, and the recorded step
    /// changes add up to the actual change between input and output.
    #[test]
    fn steps_are_exact_energy_decreases() {
        use crate::neighborhood::{build_grid4, build_knn};
        use crate::solver::{hard_energy, CostMatrix};
        use rand::{Rng, SeedableRng};
        use rand_chacha::ChaCha8Rng;

        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut accepted = 0;
        for trial in 0..200 {
            let (w, h) = (rng.random_range(2..6), rng.random_range(2..6));
            let n = w * h;
            let cols = rng.random_range(2..6);
            let costs: Vec<f64> = (0..n * cols).map(|_| rng.random_range(0.0..6.0)).collect();
            let positions: Vec<Vec2> = (0..n).map(|_| Vec2::new(rng.random(), rng.random())).collect();
            let p = FixedCostProblem::new(n, cols, costs, positions.clone()).unwrap();
            let graph = if trial % 2 == 0 { build_grid4(w, h) } else { build_knn(&positions, 3, 0.3) };
            let norm = if trial % 4 < 2 { PenaltyNorm::L11 } else { PenaltyNorm::L12 };
            let cfg = SolverConfig {
                lambda: rng.random_range(0.0..2.0),
                beta: rng.random_range(0.5..8.0),
                gamma: rng.random_range(1.0..6.0),
                ..Default::default()
            };
            let models: Vec<usize> = (0..cols).collect();
            let labels: Vec<Label> = (0..n)
                .map(|_| match rng.random_range(0..=cols) {
                    k if k == cols => Label::OUTLIER,
                    k => Label::model(k),
                })
                .collect();
            let before = {
                let cm = CostMatrix::build(&p, &models, cfg.gamma);
                hard_energy(&labels, &cm, &graph, norm, &cfg).unwrap().total()
            };
            let out = merge_models(&p, models, &labels, &cfg, Some(MergeContext { graph: &graph, norm }));
            let after = {
                let cm = CostMatrix::build(&p, &out.models, cfg.gamma);
                hard_energy(&out.labels, &cm, &graph, norm, &cfg).unwrap().total()
            };
            assert!(out.steps.iter().all(|d| *d < 0.0), "{:?}", out.steps);
            let sum: f64 = out.steps.iter().sum();
            assert!((after - before - sum).abs() < 1e-9 * before.max(1.0), "trial {trial}: {before} -> {after}, steps {sum}");
            accepted += out.steps.len();
        }
        assert!(accepted > 100);
    }
}
