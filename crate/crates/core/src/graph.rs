//! Sparse graph model, adjacency normalisations, homophily and splits.

use std::collections::BTreeSet;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};

/// Real-valued matrix in compressed-row form with sorted, unique column
/// indices inside every row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsrMatrix {
    nrows: usize,
    ncols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Builds a matrix from `(row, col, value)` triplets. Duplicate
    /// coordinates are summed.
    pub fn from_triplets(
        nrows: usize,
        ncols: usize,
        mut triplets: Vec<(usize, usize, f64)>,
    ) -> Result<Self> {
        if let Some(&(i, j, _)) = triplets.iter().find(|t| t.0 >= nrows || t.1 >= ncols) {
            return Err(Error::Shape(format!(
                "entry ({i}, {j}) outside a {nrows}x{ncols} matrix"
            )));
        }
        triplets.sort_by_key(|t| (t.0, t.1));
        let mut indptr = vec![0usize; nrows + 1];
        let mut indices = Vec::with_capacity(triplets.len());
        let mut values: Vec<f64> = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for (i, j, v) in triplets {
            if last == Some((i, j)) {
                *values.last_mut().unwrap() += v;
                continue;
            }
            indices.push(j);
            values.push(v);
            indptr[i + 1] += 1;
            last = Some((i, j));
        }
        for i in 0..nrows {
            indptr[i + 1] += indptr[i];
        }
        Ok(Self {
            nrows,
            ncols,
            indptr,
            indices,
            values,
        })
    }

    /// Builds a matrix from raw compressed-row arrays, checking the layout.
    pub fn from_parts(
        nrows: usize,
        ncols: usize,
        indptr: Vec<usize>,
        indices: Vec<usize>,
        values: Vec<f64>,
    ) -> Result<Self> {
        if indptr.len() != nrows + 1 || indptr[0] != 0 || indptr[nrows] != indices.len() {
            return Err(Error::InvalidMatrix("malformed row pointer".into()));
        }
        if indices.len() != values.len() {
            return Err(Error::InvalidMatrix("indices and values differ in length".into()));
        }
        for i in 0..nrows {
            if indptr[i] > indptr[i + 1] {
                return Err(Error::InvalidMatrix("row pointer decreases".into()));
            }
            let row = &indices[indptr[i]..indptr[i + 1]];
            if row.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::InvalidMatrix(format!(
                    "row {i} has unsorted or duplicate columns"
                )));
            }
            if row.last().is_some_and(|&j| j >= ncols) {
                return Err(Error::InvalidMatrix(format!("row {i} has a column out of range")));
            }
        }
        Ok(Self {
            nrows,
            ncols,
            indptr,
            indices,
            values,
        })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            nrows: n,
            ncols: n,
            indptr: (0..=n).collect(),
            indices: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    /// Keeps entries with `|a_ij| > 0`; the pattern follows the dense input.
    pub fn from_dense(dense: ArrayView2<'_, f64>) -> Self {
        let (nrows, ncols) = dense.dim();
        let mut indptr = Vec::with_capacity(nrows + 1);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        indptr.push(0);
        for row in dense.axis_iter(Axis(0)) {
            for (j, &v) in row.iter().enumerate() {
                if v != 0.0 {
                    indices.push(j);
                    values.push(v);
                }
            }
            indptr.push(indices.len());
        }
        Self {
            nrows,
            ncols,
            indptr,
            indices,
            values,
        }
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn indptr(&self) -> &[usize] {
        &self.indptr
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Same sparsity pattern, new values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        if values.len() != self.nnz() {
            return Err(Error::Shape(format!(
                "{} values for a pattern with {} entries",
                values.len(),
                self.nnz()
            )));
        }
        Ok(Self {
            values,
            ..self.clone()
        })
    }

    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let span = self.indptr[i]..self.indptr[i + 1];
        (&self.indices[span.clone()], &self.values[span])
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (cols, vals) = self.row(i);
        cols.binary_search(&j).map(|k| vals[k]).unwrap_or(0.0)
    }

    /// Iterates stored entries as `(row, col, value)` in row-major order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.nrows).flat_map(move |i| {
            let (cols, vals) = self.row(i);
            cols.iter().zip(vals).map(move |(&j, &v)| (i, j, v))
        })
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.nrows, self.ncols));
        for (i, j, v) in self.iter() {
            out[[i, j]] = v;
        }
        out
    }

    pub fn transpose(&self) -> Self {
        let triplets = self.iter().map(|(i, j, v)| (j, i, v)).collect();
        Self::from_triplets(self.ncols, self.nrows, triplets).expect("transpose stays in range")
    }

    /// Largest `|a_ij - a_ji|` over the union of both patterns.
    pub fn max_asymmetry(&self) -> f64 {
        self.iter()
            .map(|(i, j, v)| (v - self.get(j, i)).abs())
            .fold(0.0, f64::max)
    }

    /// `self * dense`, accumulating each row in stored column order.
    pub fn spmm(&self, dense: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if dense.nrows() != self.ncols {
            return Err(Error::Shape(format!(
                "sparse {}x{} times dense {}x{}",
                self.nrows,
                self.ncols,
                dense.nrows(),
                dense.ncols()
            )));
        }
        let mut out = Array2::zeros((self.nrows, dense.ncols()));
        for (i, mut out_row) in out.axis_iter_mut(Axis(0)).enumerate() {
            let (cols, vals) = self.row(i);
            for (&j, &a) in cols.iter().zip(vals) {
                out_row.scaled_add(a, &dense.row(j));
            }
        }
        Ok(out)
    }

    /// `self^T * dense` without materialising the transpose.
    pub fn spmm_transpose(&self, dense: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if dense.nrows() != self.nrows {
            return Err(Error::Shape(format!(
                "transposed sparse {}x{} times dense {}x{}",
                self.ncols,
                self.nrows,
                dense.nrows(),
                dense.ncols()
            )));
        }
        let mut out = Array2::zeros((self.ncols, dense.ncols()));
        for i in 0..self.nrows {
            let (cols, vals) = self.row(i);
            let src = dense.row(i);
            for (&j, &a) in cols.iter().zip(vals) {
                out.row_mut(j).scaled_add(a, &src);
            }
        }
        Ok(out)
    }
}

/// Undirected, unweighted graph with node features and labels.
///
/// Adjacency is stored symmetrically without self-loops; `n_edges` counts
/// each undirected edge once.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    n_nodes: usize,
    n_edges: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    features: Array2<f64>,
    labels: Vec<usize>,
    class_count: usize,
}

impl Graph {
    /// Builds a graph from an edge list. Edges are symmetrised, duplicates
    /// merged and self-loops dropped.
    pub fn from_edges(
        features: Array2<f64>,
        labels: Vec<usize>,
        class_count: usize,
        edges: &[(usize, usize)],
    ) -> Result<Self> {
        let n = features.nrows();
        if labels.len() != n {
            return Err(Error::Validation(format!(
                "{} labels for {n} feature rows",
                labels.len()
            )));
        }
        if let Some((i, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= class_count) {
            return Err(Error::Validation(format!(
                "node {i} has label {y} outside [0, {class_count})"
            )));
        }
        let mut neighbours = vec![BTreeSet::new(); n];
        for &(u, v) in edges {
            if u >= n || v >= n {
                return Err(Error::Validation(format!(
                    "edge ({u}, {v}) references a node outside [0, {n})"
                )));
            }
            if u != v {
                neighbours[u].insert(v);
                neighbours[v].insert(u);
            }
        }
        let mut indptr = Vec::with_capacity(n + 1);
        let mut indices = Vec::new();
        indptr.push(0);
        for set in &neighbours {
            indices.extend(set.iter().copied());
            indptr.push(indices.len());
        }
        let n_edges = indices.len() / 2;
        Ok(Self {
            n_nodes: n,
            n_edges,
            indptr,
            indices,
            features,
            labels,
            class_count,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn n_edges(&self) -> usize {
        self.n_edges
    }

    pub fn n_features(&self) -> usize {
        self.features.ncols()
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn neighbors(&self, node: usize) -> &[usize] {
        &self.indices[self.indptr[node]..self.indptr[node + 1]]
    }

    /// Each undirected edge once, as `(u, v)` with `u < v`.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.n_nodes).flat_map(move |u| {
            self.neighbors(u)
                .iter()
                .filter(move |&&v| v > u)
                .map(move |&v| (u, v))
        })
    }

    /// Binary adjacency as a real matrix.
    pub fn adjacency(&self) -> CsrMatrix {
        CsrMatrix {
            nrows: self.n_nodes,
            ncols: self.n_nodes,
            indptr: self.indptr.clone(),
            indices: self.indices.clone(),
            values: vec![1.0; self.indices.len()],
        }
    }

    /// Relabels nodes so that old node `i` becomes `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let n = self.n_nodes;
        let mut seen = vec![false; n];
        if perm.len() != n || perm.iter().any(|&p| p >= n || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Param("not a permutation of the node set".into()));
        }
        let mut features = Array2::zeros(self.features.dim());
        let mut labels = vec![0; n];
        for i in 0..n {
            features.row_mut(perm[i]).assign(&self.features.row(i));
            labels[perm[i]] = self.labels[i];
        }
        let edges: Vec<_> = self.edges().map(|(u, v)| (perm[u], perm[v])).collect();
        Self::from_edges(features, labels, self.class_count, &edges)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NormKind {
    /// `D^{-1/2} (A + I) D^{-1/2}`
    Symmetric,
    /// Each nonzero row scaled to sum to one.
    Row,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedAdjacency {
    pub matrix: CsrMatrix,
    pub kind: NormKind,
}

impl NormalizedAdjacency {
    pub fn spmm(&self, dense: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.matrix.spmm(dense)
    }

    pub fn identity(n: usize, kind: NormKind) -> Self {
        Self {
            matrix: CsrMatrix::identity(n),
            kind,
        }
    }
}

/// Symmetric normalisation with self-loops, `D~^{-1/2} (A + I) D~^{-1/2}`.
pub fn normalize_sym(graph: &Graph) -> NormalizedAdjacency {
    let n = graph.n_nodes();
    let degree: Vec<f64> = (0..n).map(|i| graph.neighbors(i).len() as f64 + 1.0).collect();
    let mut indptr = Vec::with_capacity(n + 1);
    let mut indices = Vec::with_capacity(graph.indices.len() + n);
    let mut values = Vec::with_capacity(graph.indices.len() + n);
    indptr.push(0);
    for i in 0..n {
        let neighbours = graph.neighbors(i);
        let split = neighbours.partition_point(|&j| j < i);
        let cols = neighbours[..split]
            .iter()
            .copied()
            .chain(std::iter::once(i))
            .chain(neighbours[split..].iter().copied());
        for j in cols {
            indices.push(j);
            values.push(1.0 / (degree[i] * degree[j]).sqrt());
        }
        indptr.push(indices.len());
    }
    NormalizedAdjacency {
        matrix: CsrMatrix {
            nrows: n,
            ncols: n,
            indptr,
            indices,
            values,
        },
        kind: NormKind::Symmetric,
    }
}

/// Divides each row by its sum. All-zero rows stay zero.
pub fn row_normalize(matrix: &CsrMatrix) -> Result<NormalizedAdjacency> {
    if let Some((i, j, v)) = matrix.iter().find(|&(_, _, v)| v < 0.0 || v.is_nan()) {
        return Err(Error::InvalidMatrix(format!("entry ({i}, {j}) = {v} is negative")));
    }
    let mut values = matrix.values.clone();
    for i in 0..matrix.nrows {
        let span = matrix.indptr[i]..matrix.indptr[i + 1];
        let sum: f64 = values[span.clone()].iter().sum();
        if sum > 0.0 {
            values[span].iter_mut().for_each(|v| *v /= sum);
        }
    }
    Ok(NormalizedAdjacency {
        matrix: matrix.with_values(values)?,
        kind: NormKind::Row,
    })
}

/// Fraction of `pairs` whose endpoints share a label. Self-pairs are skipped.
pub fn edge_homophily<I>(pairs: I, labels: &[usize]) -> Result<f64>
where
    I: IntoIterator<Item = (usize, usize)>,
{
    let (mut same, mut total) = (0usize, 0usize);
    for (u, v) in pairs {
        if u == v {
            continue;
        }
        total += 1;
        if labels[u] == labels[v] {
            same += 1;
        }
    }
    if total == 0 {
        return Err(Error::UndefinedRatio);
    }
    Ok(same as f64 / total as f64)
}

/// Edge homophily ratio `h`: intra-class edges over all undirected edges.
pub fn homophily_ratio(graph: &Graph) -> Result<f64> {
    edge_homophily(graph.edges(), graph.labels())
}

/// Sparse-dense product `adj * dense`.
pub fn spmm(adj: &NormalizedAdjacency, dense: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    adj.spmm(dense)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitMasks {
    pub train: Vec<bool>,
    pub val: Vec<bool>,
    pub test: Vec<bool>,
}

impl SplitMasks {
    pub fn counts(&self) -> (usize, usize, usize) {
        let count = |m: &[bool]| m.iter().filter(|&&b| b).count();
        (count(&self.train), count(&self.val), count(&self.test))
    }
}

/// Per-class 48/32/20 split. Train takes `floor(0.48 n_c)`, validation
/// `floor(0.32 n_c)`, test the remainder.
pub fn stratified_split(graph: &Graph, seed: u64) -> Result<SplitMasks> {
    let n = graph.n_nodes();
    let mut by_class = vec![Vec::new(); graph.class_count()];
    for (i, &y) in graph.labels().iter().enumerate() {
        by_class[y].push(i);
    }
    let mut rng = stream_rng(seed, Stream::Split);
    let mut masks = SplitMasks {
        train: vec![false; n],
        val: vec![false; n],
        test: vec![false; n],
    };
    for (class, mut nodes) in by_class.into_iter().enumerate() {
        let count = nodes.len();
        if count < 3 {
            return Err(Error::Split(format!(
                "class {class} has {count} nodes, at least 3 are needed"
            )));
        }
        nodes.shuffle(&mut rng);
        let n_train = count * 48 / 100;
        let n_val = count * 32 / 100;
        for (k, &node) in nodes.iter().enumerate() {
            let mask = if k < n_train {
                &mut masks.train
            } else if k < n_train + n_val {
                &mut masks.val
            } else {
                &mut masks.test
            };
            mask[node] = true;
        }
    }
    Ok(masks)
}
