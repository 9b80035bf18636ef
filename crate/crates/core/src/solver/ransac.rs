use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{point_cost, FitResult, Label, ModelProblem};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RansacConfig {
    /// Hypotheses per round.
    pub iterations: usize,
    /// Points with cost at or below this are inliers.
    pub threshold: f64,
    /// Rounds stop once the best model has fewer inliers. `None` uses 5% of
    /// the data, but at least two minimal samples.
    pub min_support: Option<usize>,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            iterations: 1000,
            threshold: 20.0,
            min_support: None,
            seed: 0,
        }
    }
}

/// Sequential RANSAC: find the largest consensus set among unassigned
/// points, refit on it, remove it, repeat.
///
/// Hypothesis `j` of round `r` draws from its own random stream, so results
/// do not depend on the thread count. The energy trace is left empty.
pub fn sequential_ransac_fit<P: ModelProblem>(problem: &P, cfg: &RansacConfig) -> FitResult<P::Model> {
    let n = problem.len();
    let s = problem.sample_size();
    let mut result = FitResult::all_outliers(n);
    let min_support = cfg
        .min_support
        .unwrap_or_else(|| ((0.05 * n as f64).ceil() as usize).max(2 * s))
        .max(s.max(1));
    let mut remaining: Vec<usize> = (0..n).filter(|&i| problem.is_sampleable(i)).collect();

    for round in 0u64.. {
        if remaining.len() < min_support || cfg.iterations == 0 {
            break;
        }
        let pool = &remaining;
        let best = (0..cfg.iterations)
            .into_par_iter()
            .with_min_len(16)
            .filter_map(|j| {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                rng.set_stream((round << 32) | j as u64);
                let mut pts: Vec<usize> = sample(&mut rng, pool.len(), s).into_iter().map(|k| pool[k]).collect();
                pts.sort_unstable();
                let model = problem.estimate(&pts)?;
                let support = pool
                    .iter()
                    .filter(|&&i| point_cost(problem, &model, i) <= cfg.threshold)
                    .count();
                Some((support, j, model))
            })
            .reduce_with(|a, b| if b.0 > a.0 || (b.0 == a.0 && b.1 < a.1) { b } else { a });
        let Some((support, _, model)) = best else { break };
        if support < min_support {
            break;
        }
        let inliers_of = |m: &P::Model| -> Vec<usize> {
            pool.iter()
                .copied()
                .filter(|&i| point_cost(problem, m, i) <= cfg.threshold)
                .collect()
        };
        let first = inliers_of(&model);
        let model = match problem.estimate(&first) {
            Some(refit) if inliers_of(&refit).len() >= first.len() => refit,
            _ => model,
        };
        let inliers = inliers_of(&model);
        let label = Label::model(result.models.len());
        for &i in &inliers {
            result.labels[i] = label;
        }
        result.models.push(model);
        result.iterations += 1;
        remaining.retain(|i| result.labels[*i].is_outlier());
    }
    result
}
