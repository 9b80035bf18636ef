//! Random minimal-sample model hypotheses that seed the solver.
//!
//! Proposal `j` draws from its own ChaCha stream (`seed`, stream `j`), so the
//! set of proposals is independent of scheduling and thread count.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::solver::ModelProblem;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProposalError {
    #[error("no models could be proposed from the data")]
    NoModelsProposed,
    #[error("fewer than {needed} points within the sampling radius")]
    InsufficientLocalPoints { needed: usize },
    #[error("invalid proposal configuration: {0}")]
    InvalidConfig(&'static str),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalConfig {
    /// Number of hypotheses.
    pub count: usize,
    /// Cost at or below which a point supports a hypothesis.
    pub inlier_threshold: f64,
    pub seed: u64,
    /// When set, samples are drawn around a random anchor point.
    pub local_radius: Option<f64>,
    /// Degenerate draws tolerated per hypothesis before it is skipped.
    pub max_retries: usize,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        Self {
            count: 100,
            inlier_threshold: 20.0,
            seed: 0,
            local_radius: None,
            max_retries: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Proposal<M> {
    pub model: M,
    /// Sorted indices of the minimal sample the model was estimated from.
    pub sample: Vec<usize>,
    /// Points with cost at or below the inlier threshold.
    pub support: usize,
}

pub fn propose_models<P: ModelProblem>(
    problem: &P,
    cfg: &ProposalConfig,
) -> Result<Vec<Proposal<P::Model>>, ProposalError> {
    if cfg.count == 0 {
        return Err(ProposalError::InvalidConfig("proposal count must be at least 1"));
    }
    if matches!(cfg.local_radius, Some(r) if !(r > 0.0)) {
        return Err(ProposalError::InvalidConfig("local radius must be positive"));
    }
    let s = problem.sample_size();
    let pool: Vec<usize> = (0..problem.len()).filter(|&i| problem.is_sampleable(i)).collect();
    if s == 0 || pool.len() < s {
        return Err(ProposalError::NoModelsProposed);
    }
    let out: Vec<Proposal<P::Model>> = (0..cfg.count)
        .into_par_iter()
        .with_min_len(4)
        .filter_map(|j| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(j as u64);
            (0..=cfg.max_retries).find_map(|_| {
                let pts = match cfg.local_radius {
                    Some(radius) => {
                        let anchor = pool[rng.random_range(0..pool.len())];
                        local_sample(problem, anchor, radius, &mut rng)
                            .unwrap_or_else(|_| global_sample(&pool, s, &mut rng))
                    }
                    None => global_sample(&pool, s, &mut rng),
                };
                let model = problem.estimate(&pts)?;
                let support = (0..problem.len())
                    .filter(|&i| crate::solver::point_cost(problem, &model, i) <= cfg.inlier_threshold)
                    .count();
                Some(Proposal {
                    model,
                    sample: pts,
                    support,
                })
            })
        })
        .collect();
    if out.is_empty() {
        return Err(ProposalError::NoModelsProposed);
    }
    Ok(out)
}

fn global_sample(pool: &[usize], s: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut pts: Vec<usize> = sample(rng, pool.len(), s).into_iter().map(|k| pool[k]).collect();
    pts.sort_unstable();
    pts
}

/// Minimal sample drawn uniformly among sampleable points within `radius`
/// of `anchor`, always containing the anchor. Indices are sorted.
pub fn local_sample<P: ModelProblem>(
    problem: &P,
    anchor: usize,
    radius: f64,
    rng: &mut impl Rng,
) -> Result<Vec<usize>, ProposalError> {
    let s = problem.sample_size();
    let center = problem.position(anchor);
    let r2 = radius * radius;
    let near: Vec<usize> = (0..problem.len())
        .filter(|&i| i != anchor && problem.is_sampleable(i) && (problem.position(i) - center).norm_squared() <= r2)
        .collect();
    if s == 0 || near.len() + 1 < s {
        return Err(ProposalError::InsufficientLocalPoints { needed: s });
    }
    let mut pts: Vec<usize> = sample(rng, near.len(), s - 1).into_iter().map(|k| near[k]).collect();
    pts.push(anchor);
    pts.sort_unstable();
    Ok(pts)
}
