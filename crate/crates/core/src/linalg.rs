//! Compressed-row sparse operators and direct factorizations.
//!
//! Symmetric positive definite operators are factored with an envelope
//! (skyline) Cholesky decomposition; the structured mesh numbering keeps the
//! envelope narrow. General operators fall back to a dense LU.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Square sparse matrix in compressed-row form with sorted column indices.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseOperator {
    dim: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl SparseOperator {
    /// Assembles from `(row, col, value)` triplets; duplicates are summed.
    pub fn from_triplets(dim: usize, mut triplets: Vec<(usize, usize, f64)>) -> Self {
        triplets.sort_unstable_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut row_ptr = vec![0usize; dim + 1];
        let mut cols = Vec::with_capacity(triplets.len());
        let mut vals: Vec<f64> = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in triplets {
            assert!(r < dim && c < dim, "triplet ({r}, {c}) out of range for dim {dim}");
            if last == Some((r, c)) {
                *vals.last_mut().unwrap() += v;
            } else {
                cols.push(c);
                vals.push(v);
                row_ptr[r + 1] += 1;
                last = Some((r, c));
            }
        }
        for r in 0..dim {
            row_ptr[r + 1] += row_ptr[r];
        }
        SparseOperator { dim, row_ptr, cols, vals }
    }

    pub fn identity(dim: usize) -> Self {
        Self::from_triplets(dim, (0..dim).map(|i| (i, i, 1.0)).collect())
    }

    pub fn from_dense(a: &DMatrix<f64>) -> Self {
        assert_eq!(a.nrows(), a.ncols());
        let mut t = Vec::new();
        for i in 0..a.nrows() {
            for j in 0..a.ncols() {
                if a[(i, j)] != 0.0 {
                    t.push((i, j, a[(i, j)]));
                }
            }
        }
        Self::from_triplets(a.nrows(), t)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.row_ptr[i]..self.row_ptr[i + 1];
        self.cols[range.clone()].iter().copied().zip(self.vals[range].iter().copied())
    }

    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.dim).flat_map(move |i| self.row(i).map(move |(j, v)| (i, j, v)))
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let range = self.row_ptr[i]..self.row_ptr[i + 1];
        match self.cols[range.clone()].binary_search(&j) {
            Ok(k) => self.vals[range.start + k],
            Err(_) => 0.0,
        }
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.dim, "dimension mismatch in sparse product");
        (0..self.dim).map(|i| self.row(i).map(|(j, v)| v * x[j]).sum()).collect()
    }

    pub fn mul_dvec(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_vec(self.mul_vec(x.as_slice()))
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut a = DMatrix::zeros(self.dim, self.dim);
        for (i, j, v) in self.triplets() {
            a[(i, j)] += v;
        }
        a
    }

    pub fn transpose(&self) -> Self {
        Self::from_triplets(self.dim, self.triplets().map(|(i, j, v)| (j, i, v)).collect())
    }

    /// `alpha * self + beta * other`.
    pub fn combine(&self, alpha: f64, other: &SparseOperator, beta: f64) -> Self {
        assert_eq!(self.dim, other.dim);
        let t = self
            .triplets()
            .map(|(i, j, v)| (i, j, alpha * v))
            .chain(other.triplets().map(|(i, j, v)| (i, j, beta * v)))
            .collect();
        Self::from_triplets(self.dim, t)
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        let mut out = self.clone();
        out.vals.iter_mut().for_each(|v| *v *= alpha);
        out
    }

    /// Largest `|A_ij - A_ji|` relative to the largest entry.
    pub fn asymmetry(&self) -> f64 {
        let scale = self.vals.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
        self.triplets().map(|(i, j, v)| (v - self.get(j, i)).abs()).fold(0.0, f64::max) / scale
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        self.asymmetry() <= tol
    }

    /// Symmetric elimination of the given rows and columns: they are zeroed and
    /// a unit diagonal is placed on the eliminated rows.
    pub fn eliminate(&self, fixed: &[bool]) -> Self {
        assert_eq!(fixed.len(), self.dim);
        let t = self
            .triplets()
            .filter(|&(i, j, _)| !fixed[i] && !fixed[j])
            .chain((0..self.dim).filter(|&i| fixed[i]).map(|i| (i, i, 1.0)))
            .collect();
        Self::from_triplets(self.dim, t)
    }

    pub fn quadratic_form(&self, x: &[f64]) -> f64 {
        dot(x, &self.mul_vec(x))
    }

    pub fn entry_sum(&self) -> f64 {
        self.vals.iter().sum()
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Envelope Cholesky factor `A = L L^T`, stored row by row from each row's
/// first nonzero column to the diagonal.
#[derive(Debug, Clone)]
pub struct SkylineCholesky {
    dim: usize,
    first: Vec<usize>,
    offsets: Vec<usize>,
    data: Vec<f64>,
}

const PIVOT_TOL: f64 = 1e-13;

impl SkylineCholesky {
    pub fn factor(a: &SparseOperator) -> Result<Self> {
        let n = a.dim();
        let mut first: Vec<usize> = (0..n).collect();
        for (i, j, _) in a.triplets() {
            if j < i {
                first[i] = first[i].min(j);
            } else if i < j {
                first[j] = first[j].min(i);
            }
        }
        let mut offsets = Vec::with_capacity(n + 1);
        offsets.push(0);
        for i in 0..n {
            offsets.push(offsets[i] + (i - first[i] + 1));
        }
        let mut data = vec![0.0; offsets[n]];
        for (i, j, v) in a.triplets() {
            if j <= i {
                data[offsets[i] + j - first[i]] += v;
            }
        }

        let (mut dmin, mut dmax) = (f64::INFINITY, 0.0f64);
        for i in 0..n {
            let fi = first[i];
            let row_i = offsets[i];
            for j in fi..i {
                let fj = first[j];
                let k0 = fi.max(fj);
                let row_j = offsets[j];
                let mut s = data[row_i + j - fi];
                for k in k0..j {
                    s -= data[row_i + k - fi] * data[row_j + k - fj];
                }
                data[row_i + j - fi] = s / data[row_j + j - fj];
            }
            let diag_pos = row_i + i - fi;
            let aii = data[diag_pos];
            let mut d = aii;
            for k in fi..i {
                let l = data[row_i + k - fi];
                d -= l * l;
            }
            if !(d > PIVOT_TOL * aii.abs()) || !d.is_finite() {
                let condition = if dmin.is_finite() && d > 0.0 { dmax / d } else { f64::INFINITY };
                return Err(Error::SolverFailure {
                    reason: format!("non-positive or vanishing pivot {d:.3e} at row {i} (operator not SPD)"),
                    condition,
                });
            }
            data[diag_pos] = d.sqrt();
            dmin = dmin.min(d);
            dmax = dmax.max(d);
        }
        Ok(SkylineCholesky { dim: n, first, offsets, data })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn l(&self, i: usize, k: usize) -> f64 {
        self.data[self.offsets[i] + k - self.first[i]]
    }

    /// Ratio of the largest to smallest squared pivot; a cheap condition proxy.
    pub fn condition_estimate(&self) -> f64 {
        let diag = (0..self.dim).map(|i| self.l(i, i).powi(2));
        let (lo, hi) = diag.fold((f64::INFINITY, 0.0f64), |(lo, hi), d| (lo.min(d), hi.max(d)));
        hi / lo
    }

    /// Solves `L y = b` in place.
    pub fn lower_solve_in_place(&self, b: &mut [f64]) {
        for i in 0..self.dim {
            let fi = self.first[i];
            let row = &self.data[self.offsets[i]..self.offsets[i + 1]];
            let mut s = b[i];
            for (k, l) in (fi..i).zip(row) {
                s -= l * b[k];
            }
            b[i] = s / row[i - fi];
        }
    }

    /// Solves `L^T x = y` in place.
    pub fn lower_transpose_solve_in_place(&self, y: &mut [f64]) {
        for i in (0..self.dim).rev() {
            let fi = self.first[i];
            let row = &self.data[self.offsets[i]..self.offsets[i + 1]];
            let xi = y[i] / row[i - fi];
            y[i] = xi;
            for (k, l) in (fi..i).zip(row) {
                y[k] -= l * xi;
            }
        }
    }

    /// `L x`.
    pub fn lower_mul(&self, x: &[f64]) -> Vec<f64> {
        (0..self.dim)
            .map(|i| {
                let fi = self.first[i];
                let row = &self.data[self.offsets[i]..self.offsets[i + 1]];
                (fi..=i).zip(row).map(|(k, l)| l * x[k]).sum()
            })
            .collect()
    }

    /// `L^T x`.
    pub fn lower_transpose_mul(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for i in 0..self.dim {
            let fi = self.first[i];
            let row = &self.data[self.offsets[i]..self.offsets[i + 1]];
            for (k, l) in (fi..=i).zip(row) {
                out[k] += l * x[i];
            }
        }
        out
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut x = b.to_vec();
        self.lower_solve_in_place(&mut x);
        self.lower_transpose_solve_in_place(&mut x);
        x
    }
}

#[derive(Debug, Clone)]
enum Inner {
    Cholesky(SkylineCholesky),
    Lu { lu: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>, lu_t: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn> },
}

/// A reusable direct factorization of a [`SparseOperator`].
#[derive(Debug, Clone)]
pub struct Factorization {
    dim: usize,
    inner: Inner,
}

impl Factorization {
    /// Cholesky factorization; fails with `SolverFailure` if `a` is not SPD.
    pub fn cholesky(a: &SparseOperator) -> Result<Self> {
        Ok(Factorization { dim: a.dim(), inner: Inner::Cholesky(SkylineCholesky::factor(a)?) })
    }

    /// Dense partial-pivoting LU for general (nonsymmetric) operators.
    pub fn lu(a: &SparseOperator) -> Result<Self> {
        let dense = a.to_dense();
        let lu = dense.clone().lu();
        let u = lu.u();
        let diag = u.diagonal().map(f64::abs);
        let (lo, hi) = (diag.min(), diag.max());
        if a.dim() > 0 && !(lo > 1e-14 * hi) {
            return Err(Error::SolverFailure {
                reason: "singular or near-singular LU pivot".into(),
                condition: if lo > 0.0 { hi / lo } else { f64::INFINITY },
            });
        }
        let lu_t = dense.transpose().lu();
        Ok(Factorization { dim: a.dim(), inner: Inner::Lu { lu, lu_t } })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_cholesky(&self) -> bool {
        matches!(self.inner, Inner::Cholesky(_))
    }

    pub fn cholesky_factor(&self) -> Option<&SkylineCholesky> {
        match &self.inner {
            Inner::Cholesky(c) => Some(c),
            Inner::Lu { .. } => None,
        }
    }

    pub fn solve(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        linear_solve(self, rhs, false)
    }
}

/// Solves `A x = rhs`, or `A^T x = rhs` when `transpose` is set.
pub fn linear_solve(fact: &Factorization, rhs: &[f64], transpose: bool) -> Result<Vec<f64>> {
    if rhs.len() != fact.dim {
        return Err(Error::invalid(format!(
            "right-hand side has length {} but the operator has dimension {}",
            rhs.len(),
            fact.dim
        )));
    }
    match &fact.inner {
        Inner::Cholesky(c) => Ok(c.solve(rhs)),
        Inner::Lu { lu, lu_t } => {
            let b = DVector::from_column_slice(rhs);
            let f = if transpose { lu_t } else { lu };
            f.solve(&b).map(|x| x.as_slice().to_vec()).ok_or_else(|| Error::SolverFailure {
                reason: "LU solve failed".into(),
                condition: f64::INFINITY,
            })
        }
    }
}
