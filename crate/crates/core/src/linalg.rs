//! Dense least-squares and subspace helpers.
//!
//! Rank decisions go through the symmetric eigen-decomposition of the Gram
//! matrix, which behaves predictably on exactly rank-deficient inputs.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Relative eigenvalue cutoff for rank decisions on `AᵀA`.
pub const GRAM_RANK_TOL: f64 = 1e-13;

/// Eigenvectors of `AᵀA` whose eigenvalues exceed `rel_tol · λ_max`, with
/// those eigenvalues, in descending order.
pub fn gram_range(a: &DMatrix<f64>, rel_tol: f64) -> (DMatrix<f64>, Vec<f64>) {
    let n = a.ncols();
    if n == 0 || a.nrows() == 0 {
        return (DMatrix::zeros(n, 0), Vec::new());
    }
    let eig = SymmetricEigen::new(a.tr_mul(a));
    let lmax = eig.eigenvalues.max();
    if !(lmax > 0.0) {
        return (DMatrix::zeros(n, 0), Vec::new());
    }
    let mut idx: Vec<usize> = (0..n).filter(|&k| eig.eigenvalues[k] > rel_tol * lmax).collect();
    idx.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]).then(i.cmp(&j)));
    let v = eig.eigenvectors.select_columns(&idx);
    let l = idx.iter().map(|&k| eig.eigenvalues[k]).collect();
    (v, l)
}

pub fn rank(a: &DMatrix<f64>) -> usize {
    gram_range(a, GRAM_RANK_TOL).1.len()
}

/// Orthonormal basis of the column space of `a`.
pub fn column_basis(a: &DMatrix<f64>) -> DMatrix<f64> {
    let (v, l) = gram_range(a, GRAM_RANK_TOL);
    if l.is_empty() {
        return DMatrix::zeros(a.nrows(), 0);
    }
    let mut q = a * v;
    for (c, lc) in l.iter().enumerate() {
        q.column_mut(c).scale_mut(1.0 / lc.sqrt());
    }
    // one Householder pass restores orthonormality to working precision
    q.qr().q()
}

/// Minimum-norm least-squares solution of `min ‖b − A x‖`.
pub fn lstsq(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let n = a.ncols();
    if n == 0 {
        return DVector::zeros(0);
    }
    if a.nrows() >= n {
        let qr = a.clone().qr();
        let r = qr.r();
        let dmax = r.diagonal().amax();
        if dmax > 0.0 && r.diagonal().iter().all(|d| d.abs() > 1e-7 * dmax) {
            let qtb = qr.q().tr_mul(b);
            if let Some(x) = r.solve_upper_triangular(&qtb) {
                return x;
            }
        }
    }
    let (v, l) = gram_range(a, GRAM_RANK_TOL);
    let mut coef = v.tr_mul(&a.tr_mul(b));
    for (k, lk) in l.iter().enumerate() {
        coef[k] /= lk;
    }
    v * coef
}

/// Leading singular triplet `(σ, u, v)` with `A ≈ σ u vᵀ`.
pub fn top_singular(a: &DMatrix<f64>) -> (f64, DVector<f64>, DVector<f64>) {
    let (m, n) = a.shape();
    if m == 0 || n == 0 {
        return (0.0, DVector::zeros(m), DVector::zeros(n));
    }
    let eig = SymmetricEigen::new(a.tr_mul(a));
    let k = eig.eigenvalues.imax();
    let mut v = eig.eigenvectors.column(k).into_owned();
    let mut u = a * &v;
    // two power steps sharpen the pair
    for _ in 0..2 {
        let un = u.norm();
        if un == 0.0 {
            break;
        }
        u /= un;
        v = a.tr_mul(&u);
        let vn = v.norm();
        if vn == 0.0 {
            break;
        }
        v /= vn;
        u = a * &v;
    }
    let sigma = u.norm();
    if sigma > 0.0 {
        u /= sigma;
    }
    (sigma, u, v)
}
