//! Learned re-connected adjacency.
//!
//! Node pairs are scored by the cosine similarity of their projected
//! features `x_i Q`; pairs scoring at least `eps` are kept and the kept
//! scores are row-normalised. The diagonal always survives because
//! `cos(v, v) = 1`.

use ndarray::{s, Array2, ArrayView2};
use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{edge_homophily, row_normalize, CsrMatrix, NormalizedAdjacency};
use crate::linalg;
use crate::rng::{stream_rng, Stream};

/// Value added to the randomly chosen feature column.
pub const INJECTED_VALUE: f64 = 0.5;

/// Rows of the similarity matrix computed per tile.
const ROW_TILE: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityHead {
    /// `d x p` projection.
    pub q: Array2<f64>,
    /// Similarity threshold in `[0, 1]`.
    pub eps: f64,
}

impl SimilarityHead {
    pub fn new(q: Array2<f64>, eps: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&eps) {
            return Err(Error::Param(format!("threshold eps = {eps} outside [0, 1]")));
        }
        if q.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerics("similarity projection".into()));
        }
        Ok(Self { q, eps })
    }

    /// Uniform entries in `[-1/sqrt(d), 1/sqrt(d)]`.
    pub fn init(d: usize, p: usize, eps: f64, seed: u64) -> Result<Self> {
        let mut rng = stream_rng(seed, Stream::HeadInit);
        Self::new(uniform_fan_in(d, p, &mut rng), eps)
    }

    pub fn p(&self) -> usize {
        self.q.ncols()
    }
}

pub(crate) fn uniform_fan_in<R: Rng>(fan_in: usize, fan_out: usize, rng: &mut R) -> Array2<f64> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Array2::from_shape_fn((fan_in, fan_out), |_| rng.random_range(-bound..=bound))
}

/// Adds [`INJECTED_VALUE`] to one seeded-random column of `x`; returns the
/// augmented matrix and the column index.
pub fn preprocess_features(x: ArrayView2<'_, f64>, seed: u64) -> (Array2<f64>, usize) {
    let mut rng = stream_rng(seed, Stream::Preprocess);
    let dim = rng.random_range(0..x.ncols().max(1));
    (inject_column(x, dim), dim)
}

pub fn inject_column(x: ArrayView2<'_, f64>, dim: usize) -> Array2<f64> {
    let mut out = x.to_owned();
    if dim < out.ncols() {
        out.column_mut(dim).mapv_inplace(|v| v + INJECTED_VALUE);
    }
    out
}

/// Rows of `x_aug Q` scaled to unit norm, plus the pre-scaling norms.
pub fn projected_unit_rows(x_aug: ArrayView2<'_, f64>, q: ArrayView2<'_, f64>) -> Result<(Array2<f64>, Vec<f64>)> {
    if x_aug.ncols() != q.nrows() {
        return Err(Error::Shape(format!(
            "features have {} columns, projection expects {}",
            x_aug.ncols(),
            q.nrows()
        )));
    }
    let projected = x_aug.dot(&q);
    let (unit, norms) = linalg::normalize_rows(projected.view());
    if let Some(row) = norms.iter().position(|&n| !(n > 0.0) || !n.is_finite()) {
        return Err(Error::Norm { row });
    }
    Ok((unit, norms))
}

/// Full `n x n` similarity matrix. Quadratic memory; intended for small
/// graphs and inspection.
pub fn learned_cosine_similarity(x_aug: ArrayView2<'_, f64>, head: &SimilarityHead) -> Result<Array2<f64>> {
    let (unit, _) = projected_unit_rows(x_aug, head.q.view())?;
    let mut sim = unit.dot(&unit.t());
    let n = sim.nrows();
    for i in 0..n {
        sim[[i, i]] = 1.0;
        for j in 0..i {
            sim[[i, j]] = sim[[j, i]];
        }
    }
    Ok(sim)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconnectedAdjacency {
    /// Retained similarities (all `>= eps`), symmetric, diagonal included.
    pub a_star: CsrMatrix,
    /// Row-normalised `a_star`.
    pub a_star_norm: NormalizedAdjacency,
}

impl ReconnectedAdjacency {
    /// Retained off-diagonal pairs `(i, j)` with `i < j`.
    pub fn off_diagonal_pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.a_star.iter().filter(|&(i, j, _)| i < j).map(|(i, j, _)| (i, j))
    }

    pub fn off_diagonal_edges(&self) -> usize {
        self.off_diagonal_pairs().count()
    }

    /// Edge homophily of the off-diagonal support.
    pub fn homophily(&self, labels: &[usize]) -> Result<f64> {
        edge_homophily(self.off_diagonal_pairs(), labels)
    }
}

/// Thresholds the learned similarity without materialising it: row tiles
/// of the upper triangle are scored, and each kept pair is mirrored.
pub fn build_reconnected(x_aug: ArrayView2<'_, f64>, head: &SimilarityHead) -> Result<ReconnectedAdjacency> {
    let (unit, _) = projected_unit_rows(x_aug, head.q.view())?;
    let n = unit.nrows();
    let mut triplets = Vec::with_capacity(n * 2);
    for start in (0..n).step_by(ROW_TILE) {
        let end = (start + ROW_TILE).min(n);
        let tile = unit.slice(s![start..end, ..]).dot(&unit.slice(s![start.., ..]).t());
        for i in start..end {
            triplets.push((i, i, 1.0));
            let row = tile.row(i - start);
            for j in i + 1..n {
                let sim = row[j - start];
                if sim >= head.eps {
                    triplets.push((i, j, sim));
                    triplets.push((j, i, sim));
                }
            }
        }
    }
    let a_star = CsrMatrix::from_triplets(n, n, triplets)?;
    let a_star_norm = row_normalize(&a_star)?;
    Ok(ReconnectedAdjacency { a_star, a_star_norm })
}

/// Cosine similarities of unit rows on a fixed support. The diagonal is
/// exactly one and `(i, j)`, `(j, i)` get bitwise-equal values.
pub fn similarities_on_support(unit: ArrayView2<'_, f64>, support: &CsrMatrix) -> Vec<f64> {
    support
        .iter()
        .map(|(i, j, _)| {
            if i == j {
                1.0
            } else {
                let (a, b) = (i.min(j), i.max(j));
                unit.row(a).dot(&unit.row(b))
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::synth_graph;
    use crate::graph::homophily_ratio;
    use ndarray::array;

    fn identity_head(d: usize, eps: f64) -> SimilarityHead {
        SimilarityHead::new(Array2::eye(d), eps).unwrap()
    }

    #[test]
    fn injection_on_zero_matrix() {
        let x = Array2::<f64>::zeros((3, 4));
        let out = inject_column(x.view(), 2);
        assert_eq!(out.column(2).to_vec(), vec![0.5; 3]);
        assert_eq!(out.sum(), 1.5);
        let (a, da) = preprocess_features(x.view(), 9);
        let (b, db) = preprocess_features(x.view(), 9);
        assert_eq!((a, da), (b, db));
    }

    #[test]
    fn formerly_zero_rows_become_parallel() {
        let x = array![[0.0, 0.0, 0.0], [0.0, 0.0, 0.0], [1.0, 0.0, 2.0]];
        let aug = inject_column(x.view(), 1);
        let sim = learned_cosine_similarity(aug.view(), &identity_head(3, 0.5)).unwrap();
        assert_eq!(sim[[0, 1]], 1.0);
    }

    #[test]
    fn cosine_examples() {
        let head = identity_head(2, 0.0);
        let sim = learned_cosine_similarity(array![[1.0, 0.0], [0.0, 1.0]].view(), &head).unwrap();
        assert_eq!(sim[[0, 1]], 0.0);
        let sim = learned_cosine_similarity(array![[1.0, 1.0], [2.0, 2.0]].view(), &head).unwrap();
        assert!((sim[[0, 1]] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn zero_projection_is_norm_error() {
        let head = identity_head(2, 0.0);
        let err = learned_cosine_similarity(array![[1.0, 1.0], [0.0, 0.0]].view(), &head).unwrap_err();
        assert!(matches!(err, Error::Norm { row: 1 }));
    }

    #[test]
    fn threshold_keeps_only_diagonal() {
        // cos = 0.3 between the two rows
        let x = array![[1.0, 0.0], [0.3, (1.0f64 - 0.09).sqrt()]];
        let rec = build_reconnected(x.view(), &identity_head(2, 0.5)).unwrap();
        assert_eq!(rec.a_star.nnz(), 2);
        assert_eq!(rec.a_star_norm.matrix.to_dense(), Array2::<f64>::eye(2));
    }

    #[test]
    fn zero_threshold_keeps_non_negative_pairs() {
        let x = array![[1.0, 0.0], [0.0, 1.0], [-1.0, 0.1], [1.0, 1.0]];
        let rec = build_reconnected(x.view(), &identity_head(2, 0.0)).unwrap();
        let sim = learned_cosine_similarity(x.view(), &identity_head(2, 0.0)).unwrap();
        let kept: std::collections::HashSet<(usize, usize)> = rec.a_star.iter().map(|(i, j, _)| (i, j)).collect();
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(kept.contains(&(i, j)), sim[[i, j]] >= 0.0, "({i},{j})");
            }
        }
    }

    #[test]
    fn reconnected_graph_is_more_homophilous() {
        let g = synth_graph(200, 2, 16, 0.2, 3).unwrap();
        let rec = build_reconnected(g.features().view(), &identity_head(16, 0.8)).unwrap();
        let original = homophily_ratio(&g).unwrap();
        let learned = rec.homophily(g.labels()).unwrap();
        assert!(learned > original, "{learned} <= {original}");
    }

    #[test]
    fn support_values_are_symmetric() {
        let g = synth_graph(50, 2, 8, 0.5, 1).unwrap();
        let head = SimilarityHead::init(8, 4, 0.3, 2).unwrap();
        let rec = build_reconnected(g.features().view(), &head).unwrap();
        let (unit, _) = projected_unit_rows(g.features().view(), head.q.view()).unwrap();
        let values = similarities_on_support(unit.view(), &rec.a_star);
        let m = rec.a_star.with_values(values).unwrap();
        assert_eq!(m.max_asymmetry(), 0.0);
        assert!(rec.a_star.values().iter().all(|&v| v >= 0.3));
    }
}
