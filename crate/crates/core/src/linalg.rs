//! Dense helpers on top of LAPACK: block functions of SPD matrices and
//! general eigenvalues.

use std::ops::Range;

use ndarray::Array2;
use ndarray_linalg::{Eig, Eigh, UPLO};
use num_complex::Complex64;

use crate::sparse::{Csr, TripletBuilder};

/// Contiguous diagonal blocks of a block-diagonal matrix.
pub fn diagonal_blocks(m: &Csr) -> Vec<Range<usize>> {
    let mut blocks = Vec::new();
    let mut start = 0;
    let mut reach = 0;
    for i in 0..m.nrows() {
        for (j, _) in m.row(i) {
            reach = reach.max(j);
        }
        // A symmetric block structure is closed once no earlier row reaches
        // past the current one.
        if reach <= i {
            blocks.push(start..i + 1);
            start = i + 1;
            reach = i + 1;
        }
    }
    blocks
}

pub fn to_dense(m: &Csr) -> Array2<f64> {
    let mut a = Array2::zeros((m.nrows(), m.ncols()));
    for (i, j, v) in m.triplets() {
        a[[i, j]] += v;
    }
    a
}

/// `f(M)` for symmetric block-diagonal `M`, evaluated block by block through
/// the eigendecomposition. Returns `None` if some eigenvalue is not positive.
pub fn spd_block_function(m: &Csr, f: impl Fn(f64) -> f64) -> Option<Csr> {
    let n = m.nrows();
    let mut b = TripletBuilder::new(n, n);
    for r in diagonal_blocks(m) {
        let s = r.len();
        if s == 1 {
            let d = m.get(r.start, r.start);
            if !(d > 0.0) {
                return None;
            }
            b.add(r.start, r.start, f(d));
            continue;
        }
        let mut a = Array2::<f64>::zeros((s, s));
        for (ii, i) in r.clone().enumerate() {
            for (j, v) in m.row(i) {
                a[[ii, j - r.start]] += v;
            }
        }
        let (vals, vecs) = a.eigh(UPLO::Lower).ok()?;
        if vals.iter().any(|&l| !(l > 0.0)) {
            return None;
        }
        for i in 0..s {
            for j in 0..s {
                let v: f64 = (0..s).map(|q| vecs[[i, q]] * f(vals[q]) * vecs[[j, q]]).sum();
                b.add(r.start + i, r.start + j, v);
            }
        }
    }
    Some(b.build())
}

/// All eigenvalues of a dense square matrix.
pub fn eigenvalues(a: &Array2<f64>) -> Option<Vec<Complex64>> {
    if a.nrows() == 0 {
        return Some(Vec::new());
    }
    let (vals, _) = a.eig().ok()?;
    Some(vals.to_vec())
}

/// Largest eigenvalue modulus of a dense square matrix.
pub fn dense_spectral_radius(a: &Array2<f64>) -> Option<f64> {
    Some(eigenvalues(a)?.iter().map(|z| z.norm()).fold(0.0, f64::max))
}
