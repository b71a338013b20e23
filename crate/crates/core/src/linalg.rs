//! Dense helpers shared by the spectral and structure-learning code.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array2, ArrayView2, Axis};

use crate::error::{Error, Result};

/// Singular values below this fraction of the largest are treated as zero.
pub const RELATIVE_RANK_TOL: f64 = 1e-10;

pub fn to_dmatrix(a: ArrayView2<'_, f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

pub fn from_dmatrix(m: &DMatrix<f64>) -> Array2<f64> {
    Array2::from_shape_fn((m.nrows(), m.ncols()), |(i, j)| m[(i, j)])
}

/// Eigenpairs of a symmetric matrix, ordered by descending eigenvalue.
/// Eigenvectors are the columns of the returned matrix.
pub fn symmetric_eigen_desc(a: ArrayView2<'_, f64>) -> (Vec<f64>, Array2<f64>) {
    let eig = SymmetricEigen::new(to_dmatrix(a));
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]).then(i.cmp(&j)));
    let values = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let n = eig.eigenvectors.nrows();
    let vectors = Array2::from_shape_fn((n, order.len()), |(i, k)| eig.eigenvectors[(i, order[k])]);
    (values, vectors)
}

/// Top `c` left singular vectors of a tall matrix `p` (n x k) through the
/// `k x k` Gram matrix: `P^T P = V S^2 V^T`, `U = P V S^{-1}`.
///
/// Returns `U` (n x c) and the singular values in descending order.
pub fn gram_left_singular_vectors(p: ArrayView2<'_, f64>, c: usize) -> Result<(Array2<f64>, Vec<f64>)> {
    let k = p.ncols();
    if c > k {
        return Err(Error::Param(format!("requested {c} singular vectors from a rank-{k} factor")));
    }
    let gram = p.t().dot(&p);
    let (eigenvalues, v) = symmetric_eigen_desc(gram.view());
    let sigma_max = eigenvalues.first().copied().unwrap_or(0.0).max(0.0).sqrt();
    let sigmas: Vec<f64> = eigenvalues.iter().take(c).map(|&l| l.max(0.0).sqrt()).collect();
    if let Some(pos) = sigmas.iter().position(|&s| !(s > RELATIVE_RANK_TOL * sigma_max)) {
        return Err(Error::Param(format!(
            "factor has numerical rank {pos}, fewer than the {c} requested components"
        )));
    }
    let v_top = v.slice(ndarray::s![.., ..c]).to_owned();
    let mut u = p.dot(&v_top);
    for (mut col, &s) in u.axis_iter_mut(Axis(1)).zip(&sigmas) {
        col /= s;
    }
    reorthonormalize(&mut u);
    Ok((u, sigmas))
}

/// Two passes of modified Gram-Schmidt over the columns. The span of every
/// leading block of columns is preserved.
pub fn reorthonormalize(u: &mut Array2<f64>) {
    for _ in 0..2 {
        for k in 0..u.ncols() {
            for j in 0..k {
                let proj = u.column(j).dot(&u.column(k));
                let prev = u.column(j).to_owned();
                u.column_mut(k).scaled_add(-proj, &prev);
            }
            let norm = u.column(k).dot(&u.column(k)).sqrt();
            if norm > 0.0 {
                u.column_mut(k).mapv_inplace(|x| x / norm);
            }
        }
    }
}

/// Flips each column so its largest-magnitude entry is positive (first
/// occurrence wins ties).
pub fn orient_columns(u: &mut Array2<f64>) {
    for mut col in u.axis_iter_mut(Axis(1)) {
        let mut best = 0.0f64;
        for &x in col.iter() {
            if x.abs() > best.abs() {
                best = x;
            }
        }
        if best < 0.0 {
            col.mapv_inplace(|x| -x);
        }
    }
}

/// Rows scaled to unit Euclidean norm; zero rows stay zero. Also returns the
/// original norms.
pub fn normalize_rows(x: ArrayView2<'_, f64>) -> (Array2<f64>, Vec<f64>) {
    let mut out = x.to_owned();
    let mut norms = Vec::with_capacity(x.nrows());
    for mut row in out.axis_iter_mut(Axis(0)) {
        let norm = row.dot(&row).sqrt();
        if norm > 0.0 {
            row /= norm;
        }
        norms.push(norm);
    }
    (out, norms)
}

/// `max |F^T F - I|`.
pub fn orthonormality_error(f: ArrayView2<'_, f64>) -> f64 {
    let gram = f.t().dot(&f);
    gram.indexed_iter()
        .map(|((i, j), &g)| (g - if i == j { 1.0 } else { 0.0 }).abs())
        .fold(0.0, f64::max)
}

/// Sine of the largest principal angle between the column spaces of two
/// matrices with orthonormal columns and equal width.
///
/// Uses `||(I - A A^T) B||_2`, which stays accurate for angles far below
/// `sqrt(machine epsilon)` where `acos` of the cosines would not.
pub fn subspace_sin_angle(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> f64 {
    let residual = &b - &a.dot(&a.t().dot(&b));
    let (values, _) = symmetric_eigen_desc(residual.t().dot(&residual).view());
    values.first().copied().unwrap_or(0.0).max(0.0).sqrt()
}
