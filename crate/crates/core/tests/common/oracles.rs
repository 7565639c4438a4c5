//! Brute-force reference implementations shared by the integration and
//! acceptance tests. Deliberately naive: no SVD, no clever indexing.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};

/// Per-sample raster oracle. `starts` are trace indices of each segment's
/// first bin; every bin is `per_bin` samples long.
pub fn naive_raster(samples: &[f64], starts: &[usize], n_nodes: usize, per_bin: usize, threshold: f64) -> Vec<Vec<u8>> {
    let mut rows = vec![vec![0u8; n_nodes]; starts.len()];
    for (j, &v) in samples.iter().enumerate() {
        for (k, &s) in starts.iter().enumerate() {
            if j >= s && j < s + n_nodes * per_bin && v > threshold {
                rows[k][(j - s) / per_bin] = 1;
            }
        }
    }
    rows
}

/// Orthonormal basis of the span of `vectors` by twice-repeated modified
/// Gram-Schmidt; vectors whose remainder falls below `tol` times the
/// largest input norm are dropped.
pub fn gram_schmidt(vectors: &[DVector<f64>], tol: f64) -> Vec<DVector<f64>> {
    let scale = vectors.iter().map(|v| v.norm()).fold(0.0, f64::max);
    let mut basis: Vec<DVector<f64>> = Vec::new();
    for v in vectors {
        let mut r = v.clone();
        for _ in 0..2 {
            for q in &basis {
                let c = q.dot(&r);
                r -= q * c;
            }
        }
        let n = r.norm();
        if n > tol * scale.max(1.0) {
            basis.push(r / n);
        }
    }
    basis
}

/// Minimum-norm least-squares solution of `S W = L` and its residual
/// `||S W - L||_F`, built from a row-space basis and a Gram-Schmidt QR.
pub fn min_norm_oracle(s: &DMatrix<f64>, l: &DMatrix<f64>) -> (DMatrix<f64>, f64) {
    let (n, m) = s.shape();
    let rows: Vec<DVector<f64>> = (0..n).map(|i| s.row(i).transpose()).collect();
    let v_basis = gram_schmidt(&rows, 1e-9);
    let r = v_basis.len();
    if r == 0 {
        return (DMatrix::zeros(m, l.ncols()), l.norm());
    }
    let v = DMatrix::from_columns(&v_basis);
    // S V has full column rank r.
    let a = s * &v;
    let mut q: Vec<DVector<f64>> = Vec::with_capacity(r);
    let mut rr = DMatrix::<f64>::zeros(r, r);
    for j in 0..r {
        let mut w: DVector<f64> = a.column(j).into_owned();
        for _ in 0..2 {
            for (i, qi) in q.iter().enumerate() {
                let c = qi.dot(&w);
                rr[(i, j)] += c;
                w -= qi * c;
            }
        }
        let nrm = w.norm();
        rr[(j, j)] = nrm;
        q.push(w / nrm);
    }
    let qm = DMatrix::from_columns(&q);
    let qtl = qm.transpose() * l;
    let mut c = DMatrix::<f64>::zeros(r, l.ncols());
    for col in 0..l.ncols() {
        for i in (0..r).rev() {
            let mut acc = qtl[(i, col)];
            for k in i + 1..r {
                acc -= rr[(i, k)] * c[(k, col)];
            }
            c[(i, col)] = acc / rr[(i, i)];
        }
    }
    let w = v * c;
    let residual = (s * &w - l).norm();
    (w, residual)
}

/// Component of `w` orthogonal to the row space of `s`.
pub fn null_space_component(s: &DMatrix<f64>, w: &DMatrix<f64>) -> f64 {
    let rows: Vec<DVector<f64>> = (0..s.nrows()).map(|i| s.row(i).transpose()).collect();
    let basis = gram_schmidt(&rows, 1e-9);
    let mut rest = w.clone();
    for q in &basis {
        let proj = q * (q.transpose() * &rest);
        rest -= proj;
    }
    rest.norm()
}

/// One-hot label matrix from 0-based classes.
pub fn one_hot(classes: &[usize], k: usize) -> DMatrix<f64> {
    DMatrix::from_fn(classes.len(), k, |i, j| f64::from(u8::from(classes[i] == j)))
}
