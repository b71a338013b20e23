//! Spectral-clustering features.
//!
//! All three methods return the top-`c` eigenvectors of a normalised
//! affinity `G = D^{-1/2} S D^{-1/2}`:
//!
//! * [`sc_dense`] forms the Gaussian affinity explicitly and runs a dense
//!   eigendecomposition. It is the reference and is only usable for small `n`.
//! * [`esc`] uses the inner-product affinity `S = X X^T`, so `G = P P^T`
//!   with `P = D^{-1/2} X`, and takes left singular vectors of `P`.
//! * [`esc_anch`] replaces `X` by the cosine similarities `R` to `m` anchor
//!   nodes and proceeds as [`esc`] with an `m x m` Gram matrix.
//!
//! Neither factored method allocates anything of size `n x n`. Degrees are
//! computed as `D = F (F^T 1)` for the factor `F`.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::rng::{stream_rng, Stream};

/// Degrees at or below this value are reported as degenerate.
pub const DEGREE_FLOOR: f64 = 1e-12;

/// Default node limit for [`sc_dense`].
pub const DENSE_NODE_LIMIT: usize = 20_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpectralMethod {
    ScDense,
    Esc,
    EscAnch,
}

impl SpectralMethod {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::ScDense => "sc_dense",
            Self::Esc => "esc",
            Self::EscAnch => "esc_anch",
        }
    }
}

impl std::str::FromStr for SpectralMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Self::ScDense, Self::Esc, Self::EscAnch]
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Param(format!("spectral method must be sc_dense, esc or esc_anch, got '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralFeatures {
    /// `n x c`, orthonormal columns ordered by non-increasing eigenvalue.
    pub f: Array2<f64>,
    /// Eigenvalues of `G` belonging to the columns of `f`.
    pub eigenvalues: Vec<f64>,
    pub method: SpectralMethod,
}

impl SpectralFeatures {
    pub fn c(&self) -> usize {
        self.f.ncols()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnchorSet {
    indices: Vec<usize>,
}

impl AnchorSet {
    pub fn new(indices: Vec<usize>, n: usize) -> Result<Self> {
        let mut sorted = indices.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Param("anchor indices must be distinct".into()));
        }
        if sorted.last().is_some_and(|&i| i >= n) {
            return Err(Error::Param(format!("anchor index out of range for {n} nodes")));
        }
        if indices.is_empty() {
            return Err(Error::Param("anchor set is empty".into()));
        }
        Ok(Self { indices })
    }

    /// `m` nodes drawn uniformly without replacement.
    pub fn sample(n: usize, m: usize, seed: u64) -> Result<Self> {
        if m == 0 || m > n {
            return Err(Error::Param(format!("cannot draw {m} anchors from {n} nodes")));
        }
        let mut rng = stream_rng(seed, Stream::Anchors);
        Self::new(index::sample(&mut rng, n, m).into_vec(), n)
    }

    pub fn all(n: usize) -> Self {
        Self {
            indices: (0..n).collect(),
        }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn m(&self) -> usize {
        self.indices.len()
    }
}

/// Gaussian affinity of every pair of rows, `exp(-|x_i - x_j|^2 / (2 sigma^2))`.
pub fn gaussian_affinity(x: ArrayView2<'_, f64>, sigma: f64) -> Array2<f64> {
    let sq = squared_distances(x);
    let scale = -1.0 / (2.0 * sigma * sigma);
    sq.mapv(|d| (d * scale).exp())
}

fn squared_distances(x: ArrayView2<'_, f64>) -> Array2<f64> {
    let gram = x.dot(&x.t());
    let norms: Vec<f64> = gram.diag().to_vec();
    let mut sq = gram;
    for ((i, j), v) in sq.indexed_iter_mut() {
        *v = if i == j { 0.0 } else { (norms[i] + norms[j] - 2.0 * *v).max(0.0) };
    }
    sq
}

/// Median Euclidean distance over all unordered pairs of distinct rows.
pub fn median_pairwise_distance(x: ArrayView2<'_, f64>) -> f64 {
    let sq = squared_distances(x);
    let n = x.nrows();
    let mut d: Vec<f64> = (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .map(|(i, j)| sq[[i, j]])
        .collect();
    if d.is_empty() {
        return 0.0;
    }
    let mid = d.len() / 2;
    let (_, m, _) = d.select_nth_unstable_by(mid, f64::total_cmp);
    m.sqrt()
}

/// Dense normalised-cut spectral embedding with a Gaussian affinity.
pub fn sc_dense(x: ArrayView2<'_, f64>, c: usize, sigma: f64) -> Result<SpectralFeatures> {
    sc_dense_with_limit(x, c, sigma, DENSE_NODE_LIMIT)
}

pub fn sc_dense_with_limit(
    x: ArrayView2<'_, f64>,
    c: usize,
    sigma: f64,
    max_nodes: usize,
) -> Result<SpectralFeatures> {
    let n = x.nrows();
    if c == 0 || c > n {
        return Err(Error::Param(format!("c = {c} must be in 1..={n}")));
    }
    if !(sigma > 0.0) {
        return Err(Error::Param(format!("sigma = {sigma} must be positive")));
    }
    if n > max_nodes {
        return Err(Error::TooLarge { n, limit: max_nodes });
    }
    let mut g = gaussian_affinity(x, sigma);
    let degree: Array1<f64> = g.sum_axis(Axis(1));
    let inv_sqrt = degree.mapv(|d| 1.0 / d.sqrt());
    for ((i, j), v) in g.indexed_iter_mut() {
        *v *= inv_sqrt[i] * inv_sqrt[j];
    }
    let (values, vectors) = linalg::symmetric_eigen_desc(g.view());
    drop(g);
    let mut f = vectors.slice(ndarray::s![.., ..c]).to_owned();
    linalg::orient_columns(&mut f);
    Ok(SpectralFeatures {
        f,
        eigenvalues: values[..c].to_vec(),
        method: SpectralMethod::ScDense,
    })
}

/// `D^{-1/2} factor` where `D = factor (factor^T 1)` is the row sum of
/// `factor factor^T`.
fn normalized_factor(factor: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    let column_sums = factor.sum_axis(Axis(0));
    let degree = factor.dot(&column_sums);
    if let Some((row, &deg)) = degree.iter().enumerate().find(|(_, &d)| !(d > DEGREE_FLOOR)) {
        return Err(Error::Degeneracy { row, degree: deg });
    }
    let mut p = factor.to_owned();
    for (mut row, &deg) in p.axis_iter_mut(Axis(0)).zip(degree.iter()) {
        row /= deg.sqrt();
    }
    Ok(p)
}

fn factored_features(p: ArrayView2<'_, f64>, c: usize, method: SpectralMethod) -> Result<SpectralFeatures> {
    let (mut f, sigmas) = linalg::gram_left_singular_vectors(p, c)?;
    linalg::orient_columns(&mut f);
    Ok(SpectralFeatures {
        f,
        eigenvalues: sigmas.iter().map(|s| s * s).collect(),
        method,
    })
}

/// Spectral embedding with the inner-product affinity `S = X X^T`.
/// Requires entrywise non-negative features.
pub fn esc(x: ArrayView2<'_, f64>, c: usize) -> Result<SpectralFeatures> {
    let (n, d) = x.dim();
    if c == 0 || c > n.min(d) {
        return Err(Error::Param(format!("c = {c} must be in 1..={}", n.min(d))));
    }
    if let Some(((i, j), v)) = x.indexed_iter().find(|(_, &v)| v < 0.0) {
        return Err(Error::Param(format!(
            "inner-product affinity needs non-negative features; x[{i}][{j}] = {v}"
        )));
    }
    let p = normalized_factor(x)?;
    factored_features(p.view(), c, SpectralMethod::Esc)
}

/// Cosine similarity of every row to every anchor row, `n x m`. Zero rows
/// have zero similarity to everything.
pub fn anchor_similarity(x: ArrayView2<'_, f64>, anchors: &AnchorSet) -> Result<Array2<f64>> {
    if let Some(&i) = anchors.indices().iter().find(|&&i| i >= x.nrows()) {
        return Err(Error::Param(format!("anchor {i} out of range for {} nodes", x.nrows())));
    }
    let (unit, _) = linalg::normalize_rows(x);
    let anchor_rows = unit.select(Axis(0), anchors.indices());
    Ok(unit.dot(&anchor_rows.t()))
}

/// Spectral embedding from the anchor factor `R` (cosine similarity to
/// each anchor), with affinity `S = R R^T`.
pub fn esc_anch(x: ArrayView2<'_, f64>, anchors: &AnchorSet, c: usize) -> Result<SpectralFeatures> {
    if c == 0 || c > anchors.m() {
        return Err(Error::Param(format!("c = {c} must be in 1..={} (anchor count)", anchors.m())));
    }
    let r = anchor_similarity(x, anchors)?;
    let p = normalized_factor(r.view())?;
    factored_features(p.view(), c, SpectralMethod::EscAnch)
}

/// Draws `m` anchors with `seed` and runs [`esc_anch`].
pub fn esc_anch_seeded(x: ArrayView2<'_, f64>, m: usize, c: usize, seed: u64) -> Result<SpectralFeatures> {
    let anchors = AnchorSet::sample(x.nrows(), m.min(x.nrows()), seed)?;
    esc_anch(x, &anchors, c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn sc_dense_identical_rows_get_identical_features() {
        let x = array![[0.0, 1.0], [0.0, 1.0], [2.0, 0.5], [1.0, 1.0]];
        let sf = sc_dense(x.view(), 3, 1.0).unwrap();
        for k in 0..3 {
            assert!((sf.f[[0, k]] - sf.f[[1, k]]).abs() < 1e-12);
        }
    }

    #[test]
    fn sc_dense_full_basis() {
        let x = array![[0.0, 1.0], [1.0, 1.0], [3.0, -1.0]];
        let sf = sc_dense(x.view(), 3, 0.7).unwrap();
        assert!(linalg::orthonormality_error(sf.f.view()) < 1e-12);
        assert!(sf.eigenvalues.windows(2).all(|w| w[0] >= w[1]));
        assert!((sf.eigenvalues[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sc_dense_guards() {
        let x = Array2::<f64>::zeros((4, 2));
        assert!(matches!(sc_dense(x.view(), 5, 1.0), Err(Error::Param(_))));
        assert!(matches!(
            sc_dense_with_limit(x.view(), 2, 1.0, 3),
            Err(Error::TooLarge { n: 4, limit: 3 })
        ));
    }

    #[test]
    fn esc_block_indicator() {
        let x = array![[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]];
        let sf = esc(x.view(), 2).unwrap();
        assert!((sf.eigenvalues[0] - 1.0).abs() < 1e-12);
        assert!((sf.eigenvalues[1] - 1.0).abs() < 1e-12);
        // span{e0 + e1, e2}
        let indicator = array![
            [1.0 / 2f64.sqrt(), 0.0],
            [1.0 / 2f64.sqrt(), 0.0],
            [0.0, 1.0]
        ];
        assert!(linalg::subspace_sin_angle(indicator.view(), sf.f.view()) < 1e-12);
    }

    #[test]
    fn esc_zero_row_is_degenerate() {
        let x = array![[1.0, 0.0], [0.0, 0.0], [0.0, 1.0]];
        assert!(matches!(esc(x.view(), 1), Err(Error::Degeneracy { row: 1, .. })));
    }

    #[test]
    fn esc_rejects_negative_features() {
        let x = array![[1.0, -0.5], [0.5, 1.0]];
        assert!(matches!(esc(x.view(), 1), Err(Error::Param(_))));
    }

    #[test]
    fn esc_anch_duplicate_rows() {
        let x = array![[1.0, 0.0, 0.5], [0.2, 1.0, 0.0], [0.2, 1.0, 0.0], [0.0, 0.3, 1.0], [1.0, 1.0, 1.0]];
        let anchors = AnchorSet::new(vec![0, 3, 4], 5).unwrap();
        let sf = esc_anch(x.view(), &anchors, 2).unwrap();
        for k in 0..2 {
            assert!((sf.f[[1, k]] - sf.f[[2, k]]).abs() < 1e-14);
        }
        assert!(matches!(esc_anch(x.view(), &anchors, 4), Err(Error::Param(_))));
    }

    #[test]
    fn anchor_sampling() {
        let a = AnchorSet::sample(50, 10, 3).unwrap();
        assert_eq!(a, AnchorSet::sample(50, 10, 3).unwrap());
        let mut idx = a.indices().to_vec();
        idx.sort_unstable();
        idx.dedup();
        assert_eq!(idx.len(), 10);
        assert!(AnchorSet::new(vec![1, 1], 5).is_err());
        assert!(AnchorSet::sample(5, 6, 0).is_err());
    }

    #[test]
    fn median_distance_of_line() {
        let x = array![[0.0], [1.0], [3.0]];
        // distances 1, 3, 2
        assert_eq!(median_pairwise_distance(x.view()), 2.0);
    }
}
