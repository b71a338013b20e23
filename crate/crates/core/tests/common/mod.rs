//! Shared test oracles. Nothing here calls the code paths under test to
//! produce an expected value, except `loss_at`, which only evaluates the
//! forward pass for finite differences.

#![allow(dead_code)]

use hetero_gnn::graph::{normalize_sym, CsrMatrix, Graph, NormalizedAdjacency};
use hetero_gnn::model::{forward, Branches, CombineMode, DropoutMasks, ForwardInputs, GcnSlParams, Mode};
use hetero_gnn::spectral::{esc_anch, AnchorSet};
use hetero_gnn::structure::{build_reconnected, preprocess_features, SimilarityHead};
use ndarray::{Array1, Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A fully specified forward problem with frozen support and dropout.
pub struct Instance {
    pub graph: Graph,
    pub a_hat: NormalizedAdjacency,
    pub x_aug: Array2<f64>,
    pub spectral: Array2<f64>,
    pub support: CsrMatrix,
    pub mask: Vec<bool>,
    pub head: SimilarityHead,
    pub params: GcnSlParams,
    pub dropout: Option<DropoutMasks>,
    pub branches: Branches,
}

impl Instance {
    pub fn inputs(&self) -> ForwardInputs<'_> {
        ForwardInputs {
            x_aug: self.x_aug.view(),
            spectral: self.spectral.view(),
            a_hat: &self.a_hat,
            support: &self.support,
            labels: self.graph.labels(),
            loss_mask: &self.mask,
            branches: self.branches,
        }
    }

    pub fn mode(&self) -> Mode<'_> {
        match &self.dropout {
            Some(m) => Mode::Train(m),
            None => Mode::Eval,
        }
    }

    pub fn loss_at(&self, head: &SimilarityHead, params: &GcnSlParams) -> f64 {
        forward(&self.inputs(), head, params, self.mode()).unwrap().loss
    }
}

pub fn random_graph(n: usize, d: usize, classes: usize, p_edge: f64, seed: u64) -> Graph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let features = Array2::from_shape_fn((n, d), |_| rng.random::<f64>());
    let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            if rng.random::<f64>() < p_edge {
                edges.push((u, v));
            }
        }
    }
    Graph::from_edges(features, labels, classes, &edges).unwrap()
}

/// Random 12-node instance.
pub fn random_instance(seed: u64, combine: CombineMode, rounds: usize, with_dropout: bool) -> Instance {
    random_instance_of_size(12, seed, combine, rounds, with_dropout)
}

/// Random instance whose threshold splits the off-diagonal pairs roughly
/// in half between retained and dropped.
pub fn random_instance_of_size(
    n: usize,
    seed: u64,
    combine: CombineMode,
    rounds: usize,
    with_dropout: bool,
) -> Instance {
    let (d, classes, c, p, q) = (6, 3, 3, 4, 5);
    let graph = random_graph(n, d, classes, 0.3, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let spectral = esc_anch(graph.features().view(), &AnchorSet::all(n), c).unwrap().f;
    let (x_aug, _) = preprocess_features(graph.features().view(), seed);

    let q_mat = Array2::from_shape_fn((d, p), |_| rng.random_range(-1.0..1.0));
    let head = SimilarityHead::new(q_mat, 0.0).unwrap();
    let mut sims: Vec<f64> = {
        let full = cosine_oracle(x_aug.view(), head.q.view());
        (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).map(|(i, j)| full[[i, j]]).collect()
    };
    sims.sort_by(f64::total_cmp);
    // threshold halfway between two neighbouring similarities near the median
    let k = sims.len() / 2;
    let eps = ((sims[k] + sims[k + 1]) / 2.0).clamp(0.0, 1.0);
    let head = SimilarityHead::new(head.q, eps).unwrap();
    let support = build_reconnected(x_aug.view(), &head).unwrap().a_star;

    let mut params = GcnSlParams::init(d, c, q, classes, combine, rounds, &mut rng).unwrap();
    params.w = Array1::from_shape_fn(params.w.len(), |_| rng.random_range(0.5..1.5));
    let mask: Vec<bool> = (0..n).map(|i| i % 4 != 3).collect();
    let dropout = with_dropout.then(|| DropoutMasks::sample(n, params.hidden_width(), 0.3, &mut rng).unwrap());
    Instance {
        a_hat: normalize_sym(&graph),
        graph,
        x_aug,
        spectral,
        support,
        mask,
        head,
        params,
        dropout,
        branches: Branches::default(),
    }
}

/// Naive double-loop cosine similarity of the rows of `x q`.
pub fn cosine_oracle(x: ArrayView2<'_, f64>, q: ArrayView2<'_, f64>) -> Array2<f64> {
    let n = x.nrows();
    let mut proj = vec![vec![0.0; q.ncols()]; n];
    for i in 0..n {
        for k in 0..q.ncols() {
            for j in 0..x.ncols() {
                proj[i][k] += x[[i, j]] * q[[j, k]];
            }
        }
    }
    let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
    Array2::from_shape_fn((n, n), |(i, j)| {
        let dot: f64 = proj[i].iter().zip(&proj[j]).map(|(a, b)| a * b).sum();
        dot / (norm(&proj[i]) * norm(&proj[j]))
    })
}

/// `max |a - b| / max |b|`, or the absolute difference when `b` is
/// numerically zero.
pub fn relative_error<'a>(a: impl Iterator<Item = &'a f64>, b: impl Iterator<Item = &'a f64> + Clone) -> f64 {
    let scale = b.clone().fold(0.0f64, |m, v| m.max(v.abs()));
    let diff = a.zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    if scale < 1e-10 {
        diff
    } else {
        diff / scale
    }
}

pub const FD_STEP: f64 = 1e-5;

/// Central-difference gradient of `f` with respect to every entry of the
/// tensor selected by `which`.
pub fn central_difference<F>(inst: &Instance, which: Tensor, f: F) -> Vec<f64>
where
    F: Fn(&SimilarityHead, &GcnSlParams) -> f64,
{
    let len = which.len(&inst.head, &inst.params);
    (0..len)
        .map(|idx| {
            let mut head = inst.head.clone();
            let mut params = inst.params.clone();
            *which.entry(&mut head, &mut params, idx) += FD_STEP;
            let up = f(&head, &params);
            *which.entry(&mut head, &mut params, idx) -= 2.0 * FD_STEP;
            let down = f(&head, &params);
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tensor {
    Q,
    W0x,
    W0f,
    W,
    W1,
}

impl Tensor {
    pub const ALL: [Tensor; 5] = [Tensor::Q, Tensor::W0x, Tensor::W0f, Tensor::W, Tensor::W1];

    fn len(self, head: &SimilarityHead, params: &GcnSlParams) -> usize {
        match self {
            Tensor::Q => head.q.len(),
            Tensor::W0x => params.w0x.len(),
            Tensor::W0f => params.w0f.len(),
            Tensor::W => params.w.len(),
            Tensor::W1 => params.w1.len(),
        }
    }

    fn entry<'a>(self, head: &'a mut SimilarityHead, params: &'a mut GcnSlParams, idx: usize) -> &'a mut f64 {
        match self {
            Tensor::Q => flat_entry(&mut head.q, idx),
            Tensor::W0x => flat_entry(&mut params.w0x, idx),
            Tensor::W0f => flat_entry(&mut params.w0f, idx),
            Tensor::W => &mut params.w[idx],
            Tensor::W1 => flat_entry(&mut params.w1, idx),
        }
    }
}

fn flat_entry(m: &mut Array2<f64>, idx: usize) -> &mut f64 {
    let cols = m.ncols();
    &mut m[[idx / cols, idx % cols]]
}

/// Row-major copy of the analytic gradient for `which`.
pub fn analytic(grads: &hetero_gnn::train::GradientSet, which: Tensor) -> Vec<f64> {
    match which {
        Tensor::Q => grads.q.iter().copied().collect(),
        Tensor::W0x => grads.w0x.iter().copied().collect(),
        Tensor::W0f => grads.w0f.iter().copied().collect(),
        Tensor::W => grads.w.to_vec(),
        Tensor::W1 => grads.w1.iter().copied().collect(),
    }
}

/// Worst relative error over all five tensors of one instance.
pub fn gradient_errors(inst: &Instance) -> Vec<(Tensor, f64)> {
    let trace = forward(&inst.inputs(), &inst.head, &inst.params, inst.mode()).unwrap();
    let grads = hetero_gnn::train::backward_gradients(&trace, &inst.inputs(), &inst.head, &inst.params).unwrap();
    Tensor::ALL
        .iter()
        .map(|&t| {
            let fd = central_difference(inst, t, |h, p| inst.loss_at(h, p));
            let an = analytic(&grads, t);
            (t, relative_error(an.iter(), fd.iter()))
        })
        .collect()
}

/// Dense spectral oracle: top-`c` eigenvectors of `D^{-1/2} G D^{-1/2}`
/// from an explicit affinity matrix, via nalgebra.
pub fn dense_spectral_oracle(g: &Array2<f64>, c: usize) -> Array2<f64> {
    let n = g.nrows();
    let degree: Vec<f64> = (0..n).map(|i| g.row(i).sum()).collect();
    let m = nalgebra::DMatrix::from_fn(n, n, |i, j| g[[i, j]] / (degree[i] * degree[j]).sqrt());
    let eig = nalgebra::SymmetricEigen::new(m);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    Array2::from_shape_fn((n, c), |(i, k)| eig.eigenvectors[(i, order[k])])
}

/// Sine of the largest principal angle between two orthonormal bases,
/// computed from the singular values of `A^T B` via nalgebra's SVD.
pub fn principal_sin(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let to = |m: &Array2<f64>| nalgebra::DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[[i, j]]);
    let (a, b) = (to(a), to(b));
    let residual = &b - &a * (a.transpose() * &b);
    let svd = residual.svd(false, false);
    svd.singular_values.iter().copied().fold(0.0, f64::max)
}
