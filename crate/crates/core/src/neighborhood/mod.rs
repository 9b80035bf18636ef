//! Neighborhood graphs and the discrete gradient operator on them.
//!
//! A graph is a list of weighted directed edges sorted by source point. The
//! gradient of a per-point field is `w * (f[dst] - f[src])` on every edge; the
//! transpose scatters `-w * psi` to the source and `+w * psi` to the
//! destination, so `<grad f, psi> = <f, grad^T psi>` holds exactly.
//!
//! Edges leaving the same point form a group. The isotropic penalty takes the
//! Euclidean norm over a group (on a grid that is the `(dx, dy)` pair of a
//! pixel); the anisotropic penalty sums absolute values.

mod kdtree;

use rayon::prelude::*;

use crate::field::{EdgeField, EdgeGradient, PointField, ShapeMismatch};
use crate::geometry::Vec2;

/// Work items per rayon task; small graphs stay on one thread.
pub(crate) const PAR_MIN_LEN: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    pub weight: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GraphKind {
    Grid4 { width: usize, height: usize },
    Knn { k: usize },
    Custom,
}

/// Smoothness penalty applied to graph gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PenaltyNorm {
    /// Sum of absolute edge differences; dual ball is the componentwise box.
    L11,
    /// Sum over edge groups of the Euclidean norm; dual ball is a per-group L2 ball.
    L12,
}

#[derive(Debug, Clone)]
pub struct NeighborhoodGraph {
    points: usize,
    edges: Vec<Edge>,
    /// `group_offsets[i]..group_offsets[i + 1]` are the edges leaving point `i`.
    group_offsets: Vec<usize>,
    /// Per point: incident edges as `(edge, sign)` in ascending edge order.
    incidence_offsets: Vec<usize>,
    incidence: Vec<(usize, f64)>,
    kind: GraphKind,
}

impl NeighborhoodGraph {
    /// Builds a graph from arbitrary edges. Edges are stably sorted by source.
    pub fn from_edges(points: usize, mut edges: Vec<Edge>, kind: GraphKind) -> Result<Self, ShapeMismatch> {
        for e in &edges {
            if e.src >= points || e.dst >= points {
                return Err(ShapeMismatch::new(
                    format!("endpoints below {points}"),
                    format!("edge {} -> {}", e.src, e.dst),
                ));
            }
            if e.src == e.dst {
                return Err(ShapeMismatch::new("no self-edges", format!("edge {} -> {}", e.src, e.dst)));
            }
            if !(e.weight >= 0.0) || !e.weight.is_finite() {
                return Err(ShapeMismatch::new("finite nonnegative weights", format!("{}", e.weight)));
            }
        }
        edges.sort_by_key(|e| e.src);
        Ok(Self::assemble(points, edges, kind))
    }

    fn assemble(points: usize, edges: Vec<Edge>, kind: GraphKind) -> Self {
        let mut group_offsets = vec![0usize; points + 1];
        for e in &edges {
            group_offsets[e.src + 1] += 1;
        }
        for i in 0..points {
            group_offsets[i + 1] += group_offsets[i];
        }

        let mut counts = vec![0usize; points + 1];
        for e in &edges {
            counts[e.src + 1] += 1;
            counts[e.dst + 1] += 1;
        }
        for i in 0..points {
            counts[i + 1] += counts[i];
        }
        let incidence_offsets = counts.clone();
        let mut cursor = counts;
        let mut incidence = vec![(0usize, 0.0f64); 2 * edges.len()];
        for (k, e) in edges.iter().enumerate() {
            incidence[cursor[e.src]] = (k, -1.0);
            cursor[e.src] += 1;
            incidence[cursor[e.dst]] = (k, 1.0);
            cursor[e.dst] += 1;
        }

        Self {
            points,
            edges,
            group_offsets,
            incidence_offsets,
            incidence,
            kind,
        }
    }

    pub fn points(&self) -> usize {
        self.points
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn kind(&self) -> GraphKind {
        self.kind
    }

    /// Edge index range leaving point `i`.
    pub fn group(&self, i: usize) -> std::ops::Range<usize> {
        self.group_offsets[i]..self.group_offsets[i + 1]
    }

    /// Incident edges of point `i` with the transpose sign (`-1` source, `+1` destination).
    pub fn incident(&self, i: usize) -> &[(usize, f64)] {
        &self.incidence[self.incidence_offsets[i]..self.incidence_offsets[i + 1]]
    }

    /// Same topology with new edge weights.
    pub fn with_weights(&self, weights: &[f64]) -> Result<Self, ShapeMismatch> {
        if weights.len() != self.edges.len() {
            return Err(ShapeMismatch::new(
                format!("{} weights", self.edges.len()),
                format!("{}", weights.len()),
            ));
        }
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(ShapeMismatch::new("finite nonnegative weights", "invalid weight"));
        }
        let mut out = self.clone();
        for (e, &w) in out.edges.iter_mut().zip(weights) {
            e.weight = w;
        }
        Ok(out)
    }

    /// Sum of incident edge weights per point.
    pub fn incident_weight(&self, i: usize) -> f64 {
        self.incident(i).iter().map(|&(e, _)| self.edges[e].weight).sum()
    }
}

/// Forward-difference 4-connected lattice over a row-major `width x height`
/// image: each pixel links to its right and lower neighbor, weight 1.
pub fn build_grid4(width: usize, height: usize) -> NeighborhoodGraph {
    let mut edges = Vec::with_capacity(2 * width * height);
    for y in 0..height {
        for x in 0..width {
            let i = y * width + x;
            if x + 1 < width {
                edges.push(Edge {
                    src: i,
                    dst: i + 1,
                    weight: 1.0,
                });
            }
            if y + 1 < height {
                edges.push(Edge {
                    src: i,
                    dst: i + width,
                    weight: 1.0,
                });
            }
        }
    }
    NeighborhoodGraph::assemble(width * height, edges, GraphKind::Grid4 { width, height })
}

fn knn_lists(points: &[Vec2], k: usize) -> Vec<Vec<(usize, f64)>> {
    let k = k.min(points.len().saturating_sub(1));
    let tree = kdtree::KdTree::build(points);
    (0..points.len())
        .into_par_iter()
        .with_min_len(256)
        .map(|i| tree.nearest(i, k))
        .collect()
}

/// Directed k-nearest-neighbor graph with weights `exp(-d / scale)`.
///
/// `k` is clamped to `n - 1`; neighbors are ordered by (distance, index).
pub fn build_knn(points: &[Vec2], k: usize, scale: f64) -> NeighborhoodGraph {
    let k_eff = k.min(points.len().saturating_sub(1));
    let scale = if scale > 0.0 && scale.is_finite() { scale } else { 1.0 };
    let mut edges = Vec::with_capacity(points.len() * k_eff);
    for (i, nbrs) in knn_lists(points, k).into_iter().enumerate() {
        for (j, d) in nbrs {
            edges.push(Edge {
                src: i,
                dst: j,
                weight: (-d / scale).exp(),
            });
        }
    }
    NeighborhoodGraph::assemble(points.len(), edges, GraphKind::Knn { k: k_eff })
}

/// Median distance over all k-nearest-neighbor pairs; `1.0` when that is zero
/// or there are no pairs.
pub fn median_knn_distance(points: &[Vec2], k: usize) -> f64 {
    let mut d: Vec<f64> = knn_lists(points, k)
        .into_iter()
        .flat_map(|v| v.into_iter().map(|(_, d)| d))
        .collect();
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(f64::total_cmp);
    let m = d.len();
    let med = if m % 2 == 1 {
        d[m / 2]
    } else {
        0.5 * (d[m / 2 - 1] + d[m / 2])
    };
    if med > 0.0 {
        med
    } else {
        1.0
    }
}

/// kNN graph with the scale set to the median neighbor distance.
pub fn build_knn_auto(points: &[Vec2], k: usize) -> NeighborhoodGraph {
    build_knn(points, k, median_knn_distance(points, k))
}

pub fn gradient(graph: &NeighborhoodGraph, phi: &PointField) -> Result<EdgeGradient, ShapeMismatch> {
    let mut out = EdgeField::zeros(graph.num_edges(), phi.labels());
    gradient_into(graph, phi, &mut out)?;
    Ok(out)
}

pub(crate) fn gradient_into(
    graph: &NeighborhoodGraph,
    phi: &PointField,
    out: &mut EdgeField,
) -> Result<(), ShapeMismatch> {
    if phi.points() != graph.points() {
        return Err(ShapeMismatch::new(
            format!("{} points", graph.points()),
            format!("{}", phi.points()),
        ));
    }
    let labels = phi.labels();
    if out.edges() != graph.num_edges() || out.labels() != labels {
        return Err(ShapeMismatch::new("edge field matching the graph", "other shape"));
    }
    if labels == 0 {
        return Ok(());
    }
    out.values_mut()
        .par_chunks_mut(labels)
        .with_min_len(PAR_MIN_LEN / labels.max(1) + 1)
        .zip(graph.edges.par_iter())
        .for_each(|(row, e)| {
            let a = phi.row(e.src);
            let b = phi.row(e.dst);
            for l in 0..labels {
                row[l] = e.weight * (b[l] - a[l]);
            }
        });
    Ok(())
}

/// Transpose of [`gradient`]: scatters `-w psi` to sources, `+w psi` to
/// destinations. Accumulation order is fixed by edge index.
pub fn divergence(graph: &NeighborhoodGraph, psi: &EdgeField) -> Result<PointField, ShapeMismatch> {
    let mut out = PointField::zeros(graph.points(), psi.labels());
    divergence_into(graph, psi, &mut out)?;
    Ok(out)
}

pub(crate) fn divergence_into(
    graph: &NeighborhoodGraph,
    psi: &EdgeField,
    out: &mut PointField,
) -> Result<(), ShapeMismatch> {
    if psi.edges() != graph.num_edges() {
        return Err(ShapeMismatch::new(
            format!("{} edges", graph.num_edges()),
            format!("{}", psi.edges()),
        ));
    }
    let labels = psi.labels();
    if out.points() != graph.points() || out.labels() != labels {
        return Err(ShapeMismatch::new("point field matching the graph", "other shape"));
    }
    if labels == 0 {
        return Ok(());
    }
    let values = psi.values();
    out.values_mut()
        .par_chunks_mut(labels)
        .with_min_len(PAR_MIN_LEN / labels.max(1) + 1)
        .enumerate()
        .for_each(|(i, row)| {
            row.iter_mut().for_each(|v| *v = 0.0);
            for &(e, sign) in graph.incident(i) {
                let w = sign * graph.edges[e].weight;
                let src = &values[e * labels..(e + 1) * labels];
                for l in 0..labels {
                    row[l] += w * src[l];
                }
            }
        });
    Ok(())
}

/// Penalty of a gradient field, summed over all labels.
pub fn penalty_value(norm: PenaltyNorm, graph: &NeighborhoodGraph, g: &EdgeGradient) -> f64 {
    let labels = g.labels();
    match norm {
        PenaltyNorm::L11 => g.values().iter().map(|v| v.abs()).sum(),
        PenaltyNorm::L12 => {
            let mut total = 0.0;
            for i in 0..graph.points() {
                let range = graph.group(i);
                if range.is_empty() {
                    continue;
                }
                for l in 0..labels {
                    let sq: f64 = range.clone().map(|e| g.get(e, l).powi(2)).sum();
                    total += sq.sqrt();
                }
            }
            total
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec2> {
        (0..n)
            .map(|_| Vec2::new(rng.random_range(0.0..100.0), rng.random_range(0.0..100.0)))
            .collect()
    }

    fn random_field(rng: &mut ChaCha8Rng, n: usize, l: usize) -> PointField {
        PointField::from_vec(n, l, (0..n * l).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn grid_edge_counts() {
        assert_eq!(build_grid4(1, 1).num_edges(), 0);
        assert_eq!(build_grid4(2, 2).num_edges(), 4);
        for (w, h) in [(1, 5), (7, 1), (3, 4), (10, 13)] {
            let g = build_grid4(w, h);
            assert_eq!(g.num_edges(), w * (h - 1) + h * (w - 1));
            for y in 0..h - 1 {
                for x in 0..w - 1 {
                    assert_eq!(g.group(y * w + x).len(), 2);
                }
            }
        }
    }

    #[test]
    fn knn_two_points_and_collocated() {
        let pts = [Vec2::new(0.0, 0.0), Vec2::new(3.0, 4.0)];
        let g = build_knn(&pts, 1, 5.0);
        assert_eq!(g.num_edges(), 2);
        assert_eq!(g.edges()[0].weight, g.edges()[1].weight);
        assert!((g.edges()[0].weight - (-1.0f64).exp()).abs() < 1e-15);

        let same = [Vec2::new(1.0, 1.0), Vec2::new(1.0, 1.0), Vec2::new(9.0, 9.0)];
        let g = build_knn(&same, 1, 2.0);
        assert_eq!(g.edges()[0].dst, 1);
        assert_eq!(g.edges()[0].weight, 1.0);
        // k clamped to n - 1
        assert_eq!(build_knn(&same, 10, 1.0).num_edges(), 6);
        assert_eq!(build_knn(&same[..1], 3, 1.0).num_edges(), 0);
    }

    #[test]
    fn knn_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for n in [2, 5, 40, 300] {
            let pts = random_points(&mut rng, n);
            for k in [1, 4, 7] {
                let g = build_knn(&pts, k, 10.0);
                for i in 0..n {
                    let mut all: Vec<(f64, usize)> = (0..n)
                        .filter(|&j| j != i)
                        .map(|j| ((pts[j] - pts[i]).norm(), j))
                        .collect();
                    all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                    let expect: Vec<usize> = all.iter().take(k).map(|p| p.1).collect();
                    let got: Vec<usize> = g.group(i).map(|e| g.edges()[e].dst).collect();
                    assert_eq!(got, expect, "point {i} n={n} k={k}");
                }
            }
        }
    }

    #[test]
    fn gradient_and_divergence_small_cases() {
        let g = NeighborhoodGraph::from_edges(
            2,
            vec![Edge {
                src: 0,
                dst: 1,
                weight: 1.0,
            }],
            GraphKind::Custom,
        )
        .unwrap();
        let phi = PointField::from_vec(2, 1, vec![0.0, 1.0]).unwrap();
        assert_eq!(gradient(&g, &phi).unwrap().values(), &[1.0]);
        let psi = EdgeField::from_vec(1, 1, vec![1.0]).unwrap();
        assert_eq!(divergence(&g, &psi).unwrap().values(), &[-1.0, 1.0]);
        assert!(divergence(&g, &EdgeField::zeros(1, 1)).unwrap().values().iter().all(|v| *v == 0.0));

        let grid = build_grid4(4, 3);
        let constant = PointField::from_vec(12, 2, vec![0.3; 24]).unwrap();
        assert!(gradient(&grid, &constant).unwrap().values().iter().all(|v| *v == 0.0));
        assert!(gradient(&grid, &PointField::zeros(5, 2)).is_err());
        assert!(divergence(&grid, &EdgeField::zeros(3, 2)).is_err());
    }

    #[test]
    fn rejects_bad_edges() {
        let self_edge = vec![Edge {
            src: 1,
            dst: 1,
            weight: 1.0,
        }];
        assert!(NeighborhoodGraph::from_edges(2, self_edge, GraphKind::Custom).is_err());
        let neg = vec![Edge {
            src: 0,
            dst: 1,
            weight: -1.0,
        }];
        assert!(NeighborhoodGraph::from_edges(2, neg, GraphKind::Custom).is_err());
    }

    #[test]
    fn adjoint_identity_grid_and_knn() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for trial in 0..40 {
            let labels = rng.random_range(1..5);
            let graph = if trial % 2 == 0 {
                build_grid4(rng.random_range(1..12), rng.random_range(1..12))
            } else {
                let n = rng.random_range(2..80);
                build_knn_auto(&random_points(&mut rng, n), rng.random_range(1..6))
            };
            let phi = random_field(&mut rng, graph.points(), labels);
            let psi = EdgeField::from_vec(
                graph.num_edges(),
                labels,
                (0..graph.num_edges() * labels).map(|_| rng.random_range(-1.0..1.0)).collect(),
            )
            .unwrap();
            let lhs = gradient(&graph, &phi).unwrap().dot(&psi);
            let rhs = phi.dot(&divergence(&graph, &psi).unwrap());
            assert!((lhs - rhs).abs() < 1e-12, "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn penalty_three_four_five() {
        let g = build_grid4(2, 2);
        // pixel 0: right edge 3, down edge 4
        let mut grad = EdgeField::zeros(g.num_edges(), 1);
        let right = g.group(0).start;
        grad.values_mut()[right] = 3.0;
        grad.values_mut()[right + 1] = 4.0;
        assert_eq!(penalty_value(PenaltyNorm::L11, &g, &grad), 7.0);
        assert_eq!(penalty_value(PenaltyNorm::L12, &g, &grad), 5.0);
        assert_eq!(penalty_value(PenaltyNorm::L12, &g, &EdgeField::zeros(4, 1)), 0.0);
    }

    #[test]
    fn rectangle_perimeter_under_l11() {
        let (w, h) = (9, 7);
        let g = build_grid4(w, h);
        let (x0, x1, y0, y1) = (2, 6, 1, 4); // inclusive-exclusive
        let mut phi = PointField::zeros(w * h, 1);
        for y in y0..y1 {
            for x in x0..x1 {
                phi.set(y * w + x, 0, 1.0);
            }
        }
        let grad = gradient(&g, &phi).unwrap();
        // Interior rectangle: each boundary side contributes its length.
        let perimeter = 2 * (x1 - x0) + 2 * (y1 - y0);
        assert_eq!(penalty_value(PenaltyNorm::L11, &g, &grad), perimeter as f64);
    }

    #[test]
    fn l12_never_exceeds_l11() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..1000 {
            let g = build_grid4(rng.random_range(1..6), rng.random_range(1..6));
            let labels = rng.random_range(1..4);
            let grad = EdgeField::from_vec(
                g.num_edges(),
                labels,
                (0..g.num_edges() * labels).map(|_| rng.random_range(-3.0..3.0)).collect(),
            )
            .unwrap();
            assert!(penalty_value(PenaltyNorm::L12, &g, &grad) <= penalty_value(PenaltyNorm::L11, &g, &grad) + 1e-12);
        }
    }

    proptest! {
        #[test]
        fn gradient_is_linear(seed in 0u64..1000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts = random_points(&mut rng, 30);
            let g = build_knn_auto(&pts, 4);
            let f1 = random_field(&mut rng, 30, 3);
            let f2 = random_field(&mut rng, 30, 3);
            let combo = PointField::from_vec(
                30, 3,
                f1.values().iter().zip(f2.values()).map(|(x, y)| a * x + b * y).collect(),
            ).unwrap();
            let lhs = gradient(&g, &combo).unwrap();
            let g1 = gradient(&g, &f1).unwrap();
            let g2 = gradient(&g, &f2).unwrap();
            for (k, v) in lhs.values().iter().enumerate() {
                prop_assert!((v - (a * g1.values()[k] + b * g2.values()[k])).abs() < 1e-12);
            }
        }

        #[test]
        fn penalty_is_homogeneous(seed in 0u64..1000, s in -5.0f64..5.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = build_grid4(4, 4);
            let grad = EdgeField::from_vec(
                g.num_edges(), 2,
                (0..g.num_edges() * 2).map(|_| rng.random_range(-1.0..1.0)).collect(),
            ).unwrap();
            for norm in [PenaltyNorm::L11, PenaltyNorm::L12] {
                let base = penalty_value(norm, &g, &grad);
                let scaled = penalty_value(norm, &g, &grad.scaled(s));
                prop_assert!((scaled - s.abs() * base).abs() < 1e-10 * base.max(1.0));
                prop_assert!(base > 0.0);
            }
        }
    }
}
