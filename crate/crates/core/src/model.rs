//! Forward pass of the structure-learning GCN and the two-layer GCN baseline.
//!
//! ```text
//! H      = ReLU((X Wx + F Wf) / 2)          (av)
//!        | ReLU(X Wx || F Wf)               (cc)
//! H_A(k) = A_hat H_A(k-1),  H_A(0) = H,  k = 1..K
//! H_S    = A*_hat H
//! H_cb   = H || H_A(K-1) || H_A(K) || H_S
//! H_fin  = ReLU(w * H_cb)
//! Z      = softmax(H_fin W1)
//! ```
//!
//! Dropout, when training, is applied to `H` and to `H_cb`. No layer has a
//! bias.

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{normalize_sym, CsrMatrix, Graph, NormKind, NormalizedAdjacency};
use crate::structure::{projected_unit_rows, similarities_on_support, uniform_fan_in, SimilarityHead};

/// Number of blocks concatenated into `H_cb`.
pub const COMBINED_BLOCKS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CombineMode {
    /// Average of the two projections.
    Av,
    /// Concatenation of the two projections.
    Cc,
}

impl std::str::FromStr for CombineMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "av" => Ok(Self::Av),
            "cc" => Ok(Self::Cc),
            other => Err(Error::Param(format!("combine mode must be 'av' or 'cc', got '{other}'"))),
        }
    }
}

impl std::fmt::Display for CombineMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Av => "av",
            Self::Cc => "cc",
        })
    }
}

/// Which aggregation blocks feed `H_cb`. A disabled block is zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Branches {
    pub adjacency: bool,
    pub reconnected: bool,
}

impl Default for Branches {
    fn default() -> Self {
        Self {
            adjacency: true,
            reconnected: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GcnSlParams {
    /// `d x q`
    pub w0x: Array2<f64>,
    /// `c x q`
    pub w0f: Array2<f64>,
    /// Gate over `H_cb`, length `4 * width(H)`.
    pub w: Array1<f64>,
    /// `4 * width(H) x classes`
    pub w1: Array2<f64>,
    pub combine: CombineMode,
    /// Aggregation rounds over the original graph, `K >= 1`.
    pub rounds: usize,
}

impl GcnSlParams {
    /// Uniform fan-in initialisation for the matrices, all-ones gate.
    pub fn init<R: Rng>(
        d: usize,
        c: usize,
        q: usize,
        classes: usize,
        combine: CombineMode,
        rounds: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if rounds == 0 {
            return Err(Error::Param("aggregation rounds K must be at least 1".into()));
        }
        if q == 0 || classes == 0 {
            return Err(Error::Param("hidden width and class count must be positive".into()));
        }
        let w0x = uniform_fan_in(d, q, rng);
        let w0f = uniform_fan_in(c, q, rng);
        let width = hidden_width(q, combine) * COMBINED_BLOCKS;
        let w1 = uniform_fan_in(width, classes, rng);
        Ok(Self {
            w0x,
            w0f,
            w: Array1::ones(width),
            w1,
            combine,
            rounds,
        })
    }

    pub fn q(&self) -> usize {
        self.w0x.ncols()
    }

    pub fn hidden_width(&self) -> usize {
        hidden_width(self.q(), self.combine)
    }

    pub fn combined_width(&self) -> usize {
        self.hidden_width() * COMBINED_BLOCKS
    }

    pub fn classes(&self) -> usize {
        self.w1.ncols()
    }

    pub fn check_shapes(&self, d: usize, c: usize) -> Result<()> {
        let q = self.q();
        let width = self.combined_width();
        let checks = [
            ("W0x rows", self.w0x.nrows(), d),
            ("W0f rows", self.w0f.nrows(), c),
            ("W0f columns", self.w0f.ncols(), q),
            ("w length", self.w.len(), width),
            ("W1 rows", self.w1.nrows(), width),
        ];
        for (what, got, want) in checks {
            if got != want {
                return Err(Error::Shape(format!("{what}: {got}, expected {want}")));
            }
        }
        if self.rounds == 0 {
            return Err(Error::Param("aggregation rounds K must be at least 1".into()));
        }
        Ok(())
    }
}

pub fn hidden_width(q: usize, combine: CombineMode) -> usize {
    match combine {
        CombineMode::Av => q,
        CombineMode::Cc => 2 * q,
    }
}

/// Scaled keep-masks (entries `0` or `1 / (1 - rate)`).
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMasks {
    pub hidden: Array2<f64>,
    pub combined: Array2<f64>,
}

impl DropoutMasks {
    pub fn sample<R: Rng>(n: usize, hidden_width: usize, rate: f64, rng: &mut R) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Param(format!("dropout rate {rate} outside [0, 1)")));
        }
        let keep = 1.0 / (1.0 - rate);
        let mut draw = |cols: usize| {
            Array2::from_shape_fn((n, cols), |_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        };
        let hidden = draw(hidden_width);
        let combined = draw(hidden_width * COMBINED_BLOCKS);
        Ok(Self { hidden, combined })
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Mode<'a> {
    Eval,
    Train(&'a DropoutMasks),
}

/// Everything the forward pass reads besides the trainable tensors.
#[derive(Debug, Clone, Copy)]
pub struct ForwardInputs<'a> {
    /// Features after the constant-column injection, `n x d`.
    pub x_aug: ArrayView2<'a, f64>,
    /// Spectral features, `n x c`.
    pub spectral: ArrayView2<'a, f64>,
    pub a_hat: &'a NormalizedAdjacency,
    /// Support of the re-connected adjacency for this epoch.
    pub support: &'a CsrMatrix,
    pub labels: &'a [usize],
    pub loss_mask: &'a [bool],
    pub branches: Branches,
}

/// Re-connected adjacency evaluated on a fixed support.
#[derive(Debug, Clone, PartialEq)]
pub struct ReconnectedTrace {
    /// Unit rows of `x_aug Q`.
    pub unit: Array2<f64>,
    /// Norms of the rows of `x_aug Q`.
    pub norms: Vec<f64>,
    /// Raw cosine values on the support.
    pub raw: Vec<f64>,
    pub row_sums: Vec<f64>,
    pub normalized: NormalizedAdjacency,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// Pre-activation of the first layer.
    pub h_pre: Array2<f64>,
    /// `H` after ReLU and dropout.
    pub h: Array2<f64>,
    /// `H_A(0..=K)`.
    pub h_a: Vec<Array2<f64>>,
    pub h_astar: Array2<f64>,
    pub reconnected: Option<ReconnectedTrace>,
    /// `H_cb` after dropout.
    pub h_cb: Array2<f64>,
    pub h_final: Array2<f64>,
    pub logits: Array2<f64>,
    pub z: Array2<f64>,
    pub loss: f64,
    pub dropout: Option<DropoutMasks>,
}

/// First layer: `(H_pre, ReLU(H_pre))`.
pub fn enhanced_features(
    x_aug: ArrayView2<'_, f64>,
    spectral: ArrayView2<'_, f64>,
    params: &GcnSlParams,
) -> Result<(Array2<f64>, Array2<f64>)> {
    params.check_shapes(x_aug.ncols(), spectral.ncols())?;
    if x_aug.nrows() != spectral.nrows() {
        return Err(Error::Shape(format!(
            "{} feature rows but {} spectral rows",
            x_aug.nrows(),
            spectral.nrows()
        )));
    }
    let from_x = x_aug.dot(&params.w0x);
    let from_f = spectral.dot(&params.w0f);
    let pre = match params.combine {
        CombineMode::Av => (from_x + from_f) * 0.5,
        CombineMode::Cc => concatenate![Axis(1), from_x, from_f],
    };
    let h = pre.mapv(relu);
    Ok((pre, h))
}

/// `K` rounds over `A_hat` and one round over `A*_hat`. The returned list
/// holds `H_A(0) = H` through `H_A(K)`.
pub fn propagate(
    h: ArrayView2<'_, f64>,
    a_hat: &NormalizedAdjacency,
    a_star_hat: &NormalizedAdjacency,
    rounds: usize,
) -> Result<(Vec<Array2<f64>>, Array2<f64>)> {
    if rounds == 0 {
        return Err(Error::Param("aggregation rounds K must be at least 1".into()));
    }
    let mut h_a = Vec::with_capacity(rounds + 1);
    h_a.push(h.to_owned());
    for k in 1..=rounds {
        let next = a_hat.spmm(h_a[k - 1].view())?;
        h_a.push(next);
    }
    let h_astar = a_star_hat.spmm(h)?;
    Ok((h_a, h_astar))
}

/// `H || H_A(K-1) || H_A(K) || H_S`.
pub fn combine(h: ArrayView2<'_, f64>, h_a: &[Array2<f64>], h_astar: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    let rounds = h_a.len().checked_sub(1).filter(|&k| k >= 1).ok_or_else(|| {
        Error::Param("propagation must include H_A(0) and at least one round".into())
    })?;
    Ok(concatenate![Axis(1), h, h_a[rounds - 1], h_a[rounds], h_astar])
}

/// `ReLU(w * H_cb)` with `w` broadcast over rows.
pub fn reweight(h_cb: ArrayView2<'_, f64>, w: &Array1<f64>) -> Result<Array2<f64>> {
    if w.len() != h_cb.ncols() {
        return Err(Error::Shape(format!("gate has {} entries, H_cb has {} columns", w.len(), h_cb.ncols())));
    }
    Ok((&h_cb * w).mapv(relu))
}

/// Combines the intermediate representations and applies the gate.
/// Returns `(H_cb, H_final)`.
pub fn combine_and_reweight(
    h: ArrayView2<'_, f64>,
    h_a: &[Array2<f64>],
    h_astar: ArrayView2<'_, f64>,
    params: &GcnSlParams,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let h_cb = combine(h, h_a, h_astar)?;
    let h_final = reweight(h_cb.view(), &params.w)?;
    Ok((h_cb, h_final))
}

pub fn softmax_rows(logits: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut z = logits.to_owned();
    for mut row in z.axis_iter_mut(Axis(0)) {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    z
}

/// Mean cross-entropy over masked rows, computed from logits with
/// log-sum-exp.
pub fn masked_cross_entropy(logits: ArrayView2<'_, f64>, labels: &[usize], mask: &[bool]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, row) in logits.axis_iter(Axis(0)).enumerate() {
        if !mask[i] {
            continue;
        }
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[labels[i]];
        count += 1;
    }
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(total / count as f64)
}

/// `Z = softmax(H_final W1)` and the mean cross-entropy over `mask`.
pub fn classify_and_loss(
    h_final: ArrayView2<'_, f64>,
    w1: ArrayView2<'_, f64>,
    labels: &[usize],
    mask: &[bool],
) -> Result<(Array2<f64>, f64)> {
    let (logits, z, loss) = classify(h_final, w1, labels, mask)?;
    drop(logits);
    Ok((z, loss))
}

fn classify(
    h_final: ArrayView2<'_, f64>,
    w1: ArrayView2<'_, f64>,
    labels: &[usize],
    mask: &[bool],
) -> Result<(Array2<f64>, Array2<f64>, f64)> {
    if h_final.ncols() != w1.nrows() {
        return Err(Error::Shape(format!(
            "H_final has {} columns, W1 has {} rows",
            h_final.ncols(),
            w1.nrows()
        )));
    }
    if labels.len() != h_final.nrows() || mask.len() != h_final.nrows() {
        return Err(Error::Shape("labels and mask must have one entry per node".into()));
    }
    let logits = h_final.dot(&w1);
    let loss = masked_cross_entropy(logits.view(), labels, mask)?;
    let z = softmax_rows(logits.view());
    Ok((logits, z, loss))
}

/// Row-normalised re-connected adjacency on `support` for the current `Q`.
pub fn reconnected_on_support(
    x_aug: ArrayView2<'_, f64>,
    head: &SimilarityHead,
    support: &CsrMatrix,
) -> Result<ReconnectedTrace> {
    let n = x_aug.nrows();
    if support.nrows() != n || support.ncols() != n {
        return Err(Error::Shape(format!(
            "support is {}x{}, graph has {n} nodes",
            support.nrows(),
            support.ncols()
        )));
    }
    let (unit, norms) = projected_unit_rows(x_aug, head.q.view())?;
    let raw = similarities_on_support(unit.view(), support);
    let mut row_sums = Vec::with_capacity(n);
    let mut values = raw.clone();
    for i in 0..n {
        let span = support.indptr()[i]..support.indptr()[i + 1];
        let sum: f64 = raw[span.clone()].iter().sum();
        if !(sum > 0.0) {
            return Err(Error::Numerics(format!("row {i} of the re-connected adjacency sums to {sum}")));
        }
        values[span].iter_mut().for_each(|v| *v /= sum);
        row_sums.push(sum);
    }
    let normalized = NormalizedAdjacency {
        matrix: support.with_values(values)?,
        kind: NormKind::Row,
    };
    Ok(ReconnectedTrace {
        unit,
        norms,
        raw,
        row_sums,
        normalized,
    })
}

/// Full forward pass. With [`Mode::Eval`] no dropout is applied.
pub fn forward(
    inputs: &ForwardInputs<'_>,
    head: &SimilarityHead,
    params: &GcnSlParams,
    mode: Mode<'_>,
) -> Result<ForwardTrace> {
    let n = inputs.x_aug.nrows();
    let (h_pre, mut h) = enhanced_features(inputs.x_aug, inputs.spectral, params)?;
    let dropout = match mode {
        Mode::Eval => None,
        Mode::Train(masks) => {
            if masks.hidden.dim() != h.dim() || masks.combined.dim() != (n, params.combined_width()) {
                return Err(Error::Shape("dropout masks do not match the layer shapes".into()));
            }
            h *= &masks.hidden;
            Some(masks.clone())
        }
    };

    let reconnected = if inputs.branches.reconnected {
        Some(reconnected_on_support(inputs.x_aug, head, inputs.support)?)
    } else {
        None
    };
    let identity;
    let a_star_hat = match &reconnected {
        Some(r) => &r.normalized,
        None => {
            identity = NormalizedAdjacency::identity(n, NormKind::Row);
            &identity
        }
    };
    let (h_a, h_astar) = propagate(h.view(), inputs.a_hat, a_star_hat, params.rounds)?;

    let mut h_cb = combine(h.view(), &h_a, h_astar.view())?;
    let width = params.hidden_width();
    if !inputs.branches.adjacency {
        h_cb.slice_mut(s![.., width..3 * width]).fill(0.0);
    }
    if !inputs.branches.reconnected {
        h_cb.slice_mut(s![.., 3 * width..]).fill(0.0);
    }
    if let Some(masks) = &dropout {
        h_cb *= &masks.combined;
    }
    let h_final = reweight(h_cb.view(), &params.w)?;
    let (logits, z, loss) = classify(h_final.view(), params.w1.view(), inputs.labels, inputs.loss_mask)?;

    Ok(ForwardTrace {
        h_pre,
        h,
        h_a,
        h_astar,
        reconnected,
        h_cb,
        h_final,
        logits,
        z,
        loss,
        dropout,
    })
}

/// Two-layer GCN, `softmax(A_hat ReLU(A_hat X W0) W1)`.
pub fn gcn_baseline_forward(graph: &Graph, w0: ArrayView2<'_, f64>, w1: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    if w0.nrows() != graph.n_features() || w0.ncols() != w1.nrows() {
        return Err(Error::Shape(format!(
            "W0 is {}x{}, W1 is {}x{}, features have {} columns",
            w0.nrows(),
            w0.ncols(),
            w1.nrows(),
            w1.ncols(),
            graph.n_features()
        )));
    }
    let a_hat = normalize_sym(graph);
    let ax = a_hat.spmm(graph.features().view())?;
    let hidden = ax.dot(&w0).mapv(relu);
    let logits = a_hat.spmm(hidden.view())?.dot(&w1);
    Ok(softmax_rows(logits.view()))
}

pub fn predictions(z: ArrayView2<'_, f64>) -> Vec<usize> {
    z.axis_iter(Axis(0))
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (k, &v)| if v > best.1 { (k, v) } else { best })
                .0
        })
        .collect()
}

/// Fraction of masked nodes whose arg-max class equals the label.
pub fn accuracy(z: ArrayView2<'_, f64>, labels: &[usize], mask: &[bool]) -> f64 {
    let pred = predictions(z);
    let (hit, total) = mask
        .iter()
        .zip(pred.iter().zip(labels))
        .filter(|(m, _)| **m)
        .fold((0usize, 0usize), |(h, t), (_, (p, y))| (h + usize::from(p == y), t + 1));
    if total == 0 {
        0.0
    } else {
        hit as f64 / total as f64
    }
}

#[inline]
pub(crate) fn relu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params(d: usize, c: usize, q: usize, combine: CombineMode, rounds: usize) -> GcnSlParams {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        GcnSlParams::init(d, c, q, 3, combine, rounds, &mut rng).unwrap()
    }

    #[test]
    fn zero_first_layer_gives_zero_h() {
        let mut p = params(3, 2, 4, CombineMode::Av, 1);
        p.w0x.fill(0.0);
        p.w0f.fill(0.0);
        let x = array![[1.0, 2.0, 3.0], [0.0, 1.0, 0.0]];
        let f = array![[0.5, 0.5], [1.0, -1.0]];
        let (_, h) = enhanced_features(x.view(), f.view(), &p).unwrap();
        assert!(h.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn average_of_equal_terms() {
        // F W0f == X W0x when F = X and W0f = W0x
        let mut p = params(2, 2, 3, CombineMode::Av, 1);
        p.w0f = p.w0x.clone();
        let x = array![[1.0, -2.0], [0.5, 1.0]];
        let (_, h) = enhanced_features(x.view(), x.view(), &p).unwrap();
        assert_eq!(h, x.dot(&p.w0x).mapv(relu));
    }

    #[test]
    fn concat_width() {
        let p = params(5, 3, 16, CombineMode::Cc, 2);
        assert_eq!(p.hidden_width(), 32);
        assert_eq!(p.combined_width(), 128);
        let x = Array2::ones((4, 5));
        let f = Array2::ones((4, 3));
        let (_, h) = enhanced_features(x.view(), f.view(), &p).unwrap();
        assert_eq!(h.ncols(), 32);
    }

    #[test]
    fn propagation_examples() {
        let h = array![[1.0, 0.0], [0.0, 1.0]];
        let eye = NormalizedAdjacency::identity(2, NormKind::Symmetric);
        let (h_a, h_s) = propagate(h.view(), &eye, &eye, 3).unwrap();
        assert!(h_a.iter().all(|m| m == h));
        assert_eq!(h_s, h);

        let clique = NormalizedAdjacency {
            matrix: CsrMatrix::from_dense(array![[0.5, 0.5], [0.5, 0.5]].view()),
            kind: NormKind::Symmetric,
        };
        let (h_a, _) = propagate(h.view(), &clique, &eye, 2).unwrap();
        assert_eq!(h_a[1], array![[0.5, 0.5], [0.5, 0.5]]);
        assert_eq!(h_a[2], array![[0.5, 0.5], [0.5, 0.5]]);
    }

    #[test]
    fn combine_keeps_blocks_and_reweights() {
        let h = array![[1.0, -2.0]];
        let h_a = vec![h.clone(), array![[3.0, 4.0]], array![[5.0, 6.0]]];
        let h_s = array![[7.0, 8.0]];
        let cb = combine(h.view(), &h_a, h_s.view()).unwrap();
        assert_eq!(cb, array![[1.0, -2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]]);
        assert_eq!(reweight(cb.view(), &Array1::ones(8)).unwrap(), cb.mapv(relu));
        assert!(reweight(cb.view(), &Array1::zeros(8)).unwrap().iter().all(|&v| v == 0.0));
        assert!(matches!(reweight(cb.view(), &Array1::ones(7)), Err(Error::Shape(_))));
    }

    #[test]
    fn uniform_logits_give_ln3() {
        let h = Array2::zeros((1, 2));
        let w1 = Array2::zeros((2, 3));
        let (z, loss) = classify_and_loss(h.view(), w1.view(), &[2], &[true]).unwrap();
        for k in 0..3 {
            assert!((z[[0, k]] - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!((loss - 3f64.ln()).abs() < 1e-15);
        assert!((loss - 1.0986).abs() < 1e-4);
    }

    #[test]
    fn confident_correct_logit_has_vanishing_loss() {
        let h = array![[1.0]];
        let w1 = array![[60.0, 0.0]];
        let (_, loss) = classify_and_loss(h.view(), w1.view(), &[0], &[true]).unwrap();
        assert!(loss < 1e-25);
    }

    #[test]
    fn empty_mask_is_error() {
        let h = Array2::zeros((2, 2));
        let w1 = Array2::zeros((2, 2));
        assert!(matches!(
            classify_and_loss(h.view(), w1.view(), &[0, 1], &[false, false]),
            Err(Error::EmptyMask)
        ));
    }

    #[test]
    fn edgeless_baseline_is_mlp() {
        let x = array![[1.0, 0.0], [0.5, -1.0], [2.0, 1.0]];
        let g = Graph::from_edges(x.clone(), vec![0, 1, 0], 2, &[]).unwrap();
        let w0 = array![[1.0, -1.0, 0.5], [0.3, 0.2, -0.7]];
        let w1 = array![[1.0, 0.0], [0.0, 1.0], [0.5, 0.5]];
        let z = gcn_baseline_forward(&g, w0.view(), w1.view()).unwrap();
        let mlp = softmax_rows(x.dot(&w0).mapv(relu).dot(&w1).view());
        assert!((&z - &mlp).iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn combine_mode_parsing() {
        assert_eq!("cc".parse::<CombineMode>().unwrap(), CombineMode::Cc);
        assert!("sum".parse::<CombineMode>().is_err());
    }
}
