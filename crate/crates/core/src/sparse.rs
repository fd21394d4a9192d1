//! Compressed sparse row matrices and the handful of kernels the solvers need.

use std::io::{self, Write};

/// Row-major compressed sparse matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Csr {
    nrows: usize,
    ncols: usize,
    row_ptr: Vec<usize>,
    col: Vec<usize>,
    val: Vec<f64>,
}

/// Accumulates `(row, col, value)` triplets; duplicates are summed.
#[derive(Clone, Debug, Default)]
pub struct TripletBuilder {
    nrows: usize,
    ncols: usize,
    entries: Vec<(usize, usize, f64)>,
}

impl TripletBuilder {
    pub fn new(nrows: usize, ncols: usize) -> Self {
        Self { nrows, ncols, entries: Vec::new() }
    }

    pub fn add(&mut self, row: usize, col: usize, value: f64) {
        debug_assert!(row < self.nrows && col < self.ncols);
        self.entries.push((row, col, value));
    }

    pub fn build(mut self) -> Csr {
        self.entries.sort_by_key(|&(r, c, _)| (r, c));
        let mut row_ptr = vec![0; self.nrows + 1];
        let mut col = Vec::with_capacity(self.entries.len());
        let mut val: Vec<f64> = Vec::with_capacity(self.entries.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in self.entries {
            if last == Some((r, c)) {
                *val.last_mut().unwrap() += v;
            } else {
                col.push(c);
                val.push(v);
                row_ptr[r + 1] += 1;
                last = Some((r, c));
            }
        }
        for r in 0..self.nrows {
            row_ptr[r + 1] += row_ptr[r];
        }
        Csr { nrows: self.nrows, ncols: self.ncols, row_ptr, col, val }
    }
}

impl Csr {
    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        Self { nrows, ncols, row_ptr: vec![0; nrows + 1], col: Vec::new(), val: Vec::new() }
    }

    pub fn identity(n: usize) -> Self {
        Self::diagonal(&vec![1.0; n])
    }

    pub fn diagonal(d: &[f64]) -> Self {
        let n = d.len();
        Self {
            nrows: n,
            ncols: n,
            row_ptr: (0..=n).collect(),
            col: (0..n).collect(),
            val: d.to_vec(),
        }
    }

    pub fn from_dense(rows: &[Vec<f64>]) -> Self {
        let nrows = rows.len();
        let ncols = rows.first().map_or(0, Vec::len);
        let mut b = TripletBuilder::new(nrows, ncols);
        for (i, r) in rows.iter().enumerate() {
            for (j, &v) in r.iter().enumerate() {
                if v != 0.0 {
                    b.add(i, j, v);
                }
            }
        }
        b.build()
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.val.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        self.col[r.clone()].iter().copied().zip(self.val[r].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.row(i).filter(|&(c, _)| c == j).map(|(_, v)| v).sum()
    }

    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.nrows).flat_map(move |i| self.row(i).map(move |(j, v)| (i, j, v)))
    }

    /// `out = self * x`.
    pub fn mul_vec_into(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.ncols);
        debug_assert_eq!(out.len(), self.nrows);
        for (o, w) in out.iter_mut().zip(self.row_ptr.windows(2)) {
            let r = w[0]..w[1];
            *o = self.col[r.clone()].iter().zip(&self.val[r]).map(|(&c, v)| v * x[c]).sum();
        }
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.nrows];
        self.mul_vec_into(x, &mut out);
        out
    }

    pub fn transpose(&self) -> Csr {
        let mut b = TripletBuilder::new(self.ncols, self.nrows);
        for (i, j, v) in self.triplets() {
            b.add(j, i, v);
        }
        b.build()
    }

    pub fn scale(&self, s: f64) -> Csr {
        let mut out = self.clone();
        out.val.iter_mut().for_each(|v| *v *= s);
        out
    }

    pub fn add(&self, other: &Csr) -> Csr {
        assert_eq!((self.nrows, self.ncols), (other.nrows, other.ncols));
        let mut b = TripletBuilder::new(self.nrows, self.ncols);
        for (i, j, v) in self.triplets().chain(other.triplets()) {
            b.add(i, j, v);
        }
        b.build()
    }

    /// Sparse product `self * other`.
    pub fn matmul(&self, other: &Csr) -> Csr {
        assert_eq!(self.ncols, other.nrows);
        let mut b = TripletBuilder::new(self.nrows, other.ncols);
        for i in 0..self.nrows {
            for (k, a) in self.row(i) {
                for (j, v) in other.row(k) {
                    b.add(i, j, a * v);
                }
            }
        }
        b.build()
    }

    /// Copy keeping only the columns `j` with `keep(j)`.
    pub fn filter_columns(&self, keep: impl Fn(usize) -> bool) -> Csr {
        let mut b = TripletBuilder::new(self.nrows, self.ncols);
        for (i, j, v) in self.triplets() {
            if keep(j) {
                b.add(i, j, v);
            }
        }
        b.build()
    }

    /// Drops stored zeros.
    pub fn pruned(&self) -> Csr {
        let mut b = TripletBuilder::new(self.nrows, self.ncols);
        for (i, j, v) in self.triplets() {
            if v != 0.0 {
                b.add(i, j, v);
            }
        }
        b.build()
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut d = vec![vec![0.0; self.ncols]; self.nrows];
        for (i, j, v) in self.triplets() {
            d[i][j] += v;
        }
        d
    }

    /// Largest `|i - j|` over stored entries.
    pub fn bandwidth(&self) -> usize {
        self.triplets().map(|(i, j, _)| i.abs_diff(j)).max().unwrap_or(0)
    }

    /// `max |a_ij - a_ji|`.
    pub fn asymmetry(&self) -> f64 {
        let t = self.transpose();
        self.triplets()
            .map(|(i, j, v)| (v - t.get(i, j)).abs())
            .chain(t.triplets().map(|(i, j, v)| (v - self.get(i, j)).abs()))
            .fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.val.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Matrix Market coordinate format (general, real).
    pub fn write_matrix_market<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "%%MatrixMarket matrix coordinate real general")?;
        writeln!(w, "{} {} {}", self.nrows, self.ncols, self.nnz())?;
        for (i, j, v) in self.triplets() {
            writeln!(w, "{} {} {:.17e}", i + 1, j + 1, v)?;
        }
        Ok(())
    }
}

/// Operator restricted to a subset of columns (input is compact over those
/// columns) and producing values only on the rows it touches.
#[derive(Clone, Debug)]
pub struct CompactOperator {
    /// Global row index of each output slot.
    pub rows: Vec<usize>,
    row_ptr: Vec<usize>,
    /// Compact column index (position within the input column set).
    col: Vec<usize>,
    val: Vec<f64>,
}

impl CompactOperator {
    /// Restricts `m` to `columns`; `columns` must be sorted and unique.
    pub fn from_columns(m: &Csr, columns: &[usize]) -> Self {
        let mut pos = vec![usize::MAX; m.ncols()];
        for (c, &j) in columns.iter().enumerate() {
            pos[j] = c;
        }
        let mut rows = Vec::new();
        let mut row_ptr = vec![0];
        let mut col = Vec::new();
        let mut val = Vec::new();
        for i in 0..m.nrows() {
            let before = col.len();
            for (j, v) in m.row(i) {
                if pos[j] != usize::MAX && v != 0.0 {
                    col.push(pos[j]);
                    val.push(v);
                }
            }
            if col.len() > before {
                rows.push(i);
                row_ptr.push(col.len());
            }
        }
        Self { rows, row_ptr, col, val }
    }

    pub fn nnz(&self) -> usize {
        self.val.len()
    }

    /// `out[r] = sum_c a[r, c] x[c]` for every output slot `r`.
    pub fn apply(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.rows.len());
        self.for_each_row(x, |r, v| out[r] = v);
    }

    /// Calls `f(r, sum_c a[r, c] x[c])` for every output slot `r` in order.
    #[inline]
    pub fn for_each_row(&self, x: &[f64], mut f: impl FnMut(usize, f64)) {
        for (r, w) in self.row_ptr.windows(2).enumerate() {
            let span = w[0]..w[1];
            f(r, self.col[span.clone()].iter().zip(&self.val[span]).map(|(&c, v)| v * x[c]).sum());
        }
    }
}

/// Symmetric banded matrix stored as its lower band, with an in-place
/// Cholesky factorization.
#[derive(Clone, Debug)]
pub struct BandedSym {
    n: usize,
    bw: usize,
    /// `band[i][d] = a[i][i - d]` for `d <= min(i, bw)`.
    band: Vec<Vec<f64>>,
}

impl BandedSym {
    /// Lower band of a symmetric CSR matrix.
    pub fn from_csr(m: &Csr) -> Self {
        let n = m.nrows();
        let bw = m.bandwidth();
        let mut band = vec![vec![0.0; bw + 1]; n];
        for (i, j, v) in m.triplets() {
            if j <= i {
                band[i][i - j] += v;
            }
        }
        Self { n, bw, band }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// `self + s I`.
    pub fn shifted(&self, s: f64) -> Self {
        let mut out = self.clone();
        out.band.iter_mut().for_each(|r| r[0] += s);
        out
    }

    pub fn negated(&self) -> Self {
        let mut out = self.clone();
        out.band.iter_mut().flatten().for_each(|v| *v = -*v);
        out
    }

    /// Cholesky factor `L` (same band layout), or `None` if the matrix is not
    /// numerically positive definite.
    pub fn cholesky(&self) -> Option<BandedCholesky> {
        let (n, bw) = (self.n, self.bw);
        let mut l = self.band.clone();
        for i in 0..n {
            let jmin = i.saturating_sub(bw);
            for j in jmin..=i {
                let mut s = l[i][i - j];
                let kmin = jmin.max(j.saturating_sub(bw));
                for k in kmin..j {
                    s -= l[i][i - k] * l[j][j - k];
                }
                if j == i {
                    if !(s > 0.0) || !s.is_finite() {
                        return None;
                    }
                    l[i][0] = s.sqrt();
                } else {
                    l[i][i - j] = s / l[j][0];
                }
            }
        }
        Some(BandedCholesky { n, bw, l })
    }
}

#[derive(Clone, Debug)]
pub struct BandedCholesky {
    n: usize,
    bw: usize,
    l: Vec<Vec<f64>>,
}

impl BandedCholesky {
    /// Solves `A x = b` in place.
    pub fn solve_in_place(&self, x: &mut [f64]) {
        assert_eq!(x.len(), self.n);
        for i in 0..self.n {
            let mut s = x[i];
            for k in i.saturating_sub(self.bw)..i {
                s -= self.l[i][i - k] * x[k];
            }
            x[i] = s / self.l[i][0];
        }
        for i in (0..self.n).rev() {
            let mut s = x[i];
            for k in (i + 1)..(i + 1 + self.bw).min(self.n) {
                s -= self.l[k][k - i] * x[k];
            }
            x[i] = s / self.l[i][0];
        }
    }
}

/// Bounds `[lambda_min, lambda_max]` of a symmetric banded matrix, located by
/// bisection on Cholesky definiteness tests of `A - sI` and `sI - A`.
pub fn symmetric_spectrum_bounds(m: &Csr, rel_tol: f64) -> (f64, f64) {
    let a = BandedSym::from_csr(m);
    let neg = a.negated();
    // Gershgorin enclosure.
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for i in 0..m.nrows() {
        let mut d = 0.0;
        let mut r = 0.0;
        for (j, v) in m.row(i) {
            if j == i {
                d += v;
            } else {
                r += v.abs();
            }
        }
        lo = lo.min(d - r);
        hi = hi.max(d + r);
    }
    let scale = lo.abs().max(hi.abs()).max(f64::MIN_POSITIVE);
    // lambda_max: smallest s with sI - A positive definite.
    let (mut a_lo, mut a_hi) = (lo, hi + 1e-12 * scale);
    while a_hi - a_lo > rel_tol * scale {
        let mid = 0.5 * (a_lo + a_hi);
        if neg.shifted(mid).cholesky().is_some() {
            a_hi = mid;
        } else {
            a_lo = mid;
        }
    }
    let lambda_max = 0.5 * (a_lo + a_hi);
    // lambda_min: largest s with A - sI positive definite.
    let (mut b_lo, mut b_hi) = (lo - 1e-12 * scale, hi);
    while b_hi - b_lo > rel_tol * scale {
        let mid = 0.5 * (b_lo + b_hi);
        if a.shifted(-mid).cholesky().is_some() {
            b_lo = mid;
        } else {
            b_hi = mid;
        }
    }
    (0.5 * (b_lo + b_hi), lambda_max)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lap(n: usize) -> Csr {
        let mut b = TripletBuilder::new(n, n);
        for i in 0..n {
            b.add(i, i, 2.0);
            if i + 1 < n {
                b.add(i, i + 1, -1.0);
                b.add(i + 1, i, -1.0);
            }
        }
        b.build()
    }

    #[test]
    fn duplicates_are_summed() {
        let mut b = TripletBuilder::new(2, 2);
        b.add(0, 1, 1.0);
        b.add(0, 1, 2.5);
        b.add(1, 0, -1.0);
        let m = b.build();
        assert_eq!(m.nnz(), 2);
        assert_eq!(m.get(0, 1), 3.5);
        assert_eq!(m.mul_vec(&[1.0, 2.0]), vec![7.0, -1.0]);
    }

    #[test]
    fn banded_cholesky_solves() {
        let m = lap(7);
        let x: Vec<f64> = (0..7).map(|i| (i as f64).sin()).collect();
        let mut b = m.mul_vec(&x);
        BandedSym::from_csr(&m).cholesky().unwrap().solve_in_place(&mut b);
        for (u, v) in b.iter().zip(&x) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn spectrum_bounds_of_discrete_laplacian() {
        let n = 40;
        let (lo, hi) = symmetric_spectrum_bounds(&lap(n), 1e-13);
        let theta = std::f64::consts::PI / (2.0 * (n as f64 + 1.0));
        let exact_lo = 4.0 * theta.sin().powi(2);
        let exact_hi = 4.0 * (n as f64 * theta).sin().powi(2);
        assert!((lo - exact_lo).abs() < 1e-10, "{lo} vs {exact_lo}");
        assert!((hi - exact_hi).abs() < 1e-10, "{hi} vs {exact_hi}");
    }

    #[test]
    fn compact_operator_matches_masked_product() {
        let m = lap(6);
        let cols = vec![2, 3];
        let op = CompactOperator::from_columns(&m, &cols);
        assert_eq!(op.rows, vec![1, 2, 3, 4]);
        let mut out = vec![0.0; 4];
        op.apply(&[1.0, 10.0], &mut out);
        let full = m.mul_vec(&[0.0, 0.0, 1.0, 10.0, 0.0, 0.0]);
        assert_eq!(out, vec![full[1], full[2], full[3], full[4]]);
    }
}
