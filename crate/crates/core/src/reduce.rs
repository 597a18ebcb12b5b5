//! Output POD basis in the mass inner product and input active subspace in
//! the prior precision geometry, with their encoders and decoders.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::linalg::{SkylineCholesky, SparseOperator};
use crate::prior::GaussianGeometry;

#[derive(Debug, Clone, PartialEq)]
pub struct PodBasis {
    pub mean: Vec<f64>,
    /// Columns are `M`-orthonormal modes.
    pub phi: DMatrix<f64>,
    /// Full descending spectrum of the unbiased snapshot covariance.
    pub eigenvalues: Vec<f64>,
    /// `M Phi`, so that encoding needs no mass product.
    pub mass_phi: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AsBasis {
    pub mean: Vec<f64>,
    /// Columns are precision-orthonormal: `Psi^T C^{-1} Psi = I`.
    pub psi: DMatrix<f64>,
    pub eigenvalues: Vec<f64>,
    /// `C^{-1} Psi`.
    pub precision_psi: DMatrix<f64>,
}

/// Flip each column so that its entry of largest magnitude is positive.
fn fix_signs(v: &mut DMatrix<f64>) {
    for mut col in v.column_iter_mut() {
        let mut best = 0.0f64;
        for &x in col.iter() {
            if x.abs() > best.abs() {
                best = x;
            }
        }
        if best < 0.0 {
            col.neg_mut();
        }
    }
}

/// Descending eigenpairs of a symmetric matrix.
fn sorted_symmetric_eigen(a: DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(a);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let values = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let vectors = DMatrix::from_fn(eig.eigenvectors.nrows(), order.len(), |r, c| eig.eigenvectors[(r, order[c])]);
    (values, vectors)
}

fn mean_of(samples: &[Vec<f64>]) -> Vec<f64> {
    let n = samples.len() as f64;
    let mut mean = vec![0.0; samples[0].len()];
    for s in samples {
        for (m, v) in mean.iter_mut().zip(s) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    mean
}

pub fn compute_pod(snapshots: &[Vec<f64>], mass: &SparseOperator, r_u: usize) -> Result<PodBasis> {
    let n = snapshots.len();
    if n < 2 {
        return Err(Error::invalid("POD needs at least two snapshots"));
    }
    let dim = mass.dim();
    if snapshots.iter().any(|s| s.len() != dim) {
        return Err(Error::invalid("snapshot length does not match the mass operator"));
    }
    if r_u > (n - 1).min(dim) {
        return Err(Error::invalid(format!("POD rank {r_u} exceeds min(n - 1, dofs) = {}", (n - 1).min(dim))));
    }
    let chol = SkylineCholesky::factor(mass)?;
    let mean = mean_of(snapshots);
    let scale = 1.0 / ((n - 1) as f64).sqrt();
    // Y = L^T D / sqrt(n - 1); its left singular vectors are L^T-images of the modes.
    let mut y = DMatrix::zeros(dim, n);
    for (j, s) in snapshots.iter().enumerate() {
        let centered: Vec<f64> = s.iter().zip(&mean).map(|(a, b)| (a - b) * scale).collect();
        y.column_mut(j).copy_from_slice(&chol.lower_transpose_mul(&centered));
    }
    // Y Y^T = Q (R R^T) Q^T; the small symmetric eigenproblem stays accurate
    // on rank-deficient data, where the bidiagonal SVD loses digits.
    let qr = y.qr();
    let (q, r) = (qr.q(), qr.r());
    let (eigenvalues, w) = sorted_symmetric_eigen(&r * r.transpose());
    let u = q * w;

    let mut phi = DMatrix::zeros(dim, r_u);
    for c in 0..r_u {
        let mut col: Vec<f64> = u.column(c).iter().copied().collect();
        chol.lower_transpose_solve_in_place(&mut col);
        phi.column_mut(c).copy_from_slice(&col);
    }
    fix_signs(&mut phi);
    let mass_phi = mass_times(mass, &phi);
    Ok(PodBasis { mean, phi, eigenvalues, mass_phi })
}

fn mass_times(mass: &SparseOperator, a: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(a.nrows(), a.ncols());
    for (j, col) in a.column_iter().enumerate() {
        out.column_mut(j).copy_from_slice(&mass.mul_vec(col.as_slice()));
    }
    out
}

impl PodBasis {
    pub fn rank(&self) -> usize {
        self.phi.ncols()
    }

    pub fn dim(&self) -> usize {
        self.phi.nrows()
    }

    /// Rebuild from stored mean and modes.
    pub fn from_parts(mean: Vec<f64>, phi: DMatrix<f64>, eigenvalues: Vec<f64>, mass: &SparseOperator) -> Result<Self> {
        if mean.len() != mass.dim() || phi.nrows() != mass.dim() {
            return Err(Error::invalid("POD basis does not match the mass operator"));
        }
        let mass_phi = mass_times(mass, &phi);
        Ok(PodBasis { mean, phi, eigenvalues, mass_phi })
    }

    /// `Phi^T M (u - mean)`.
    pub fn encode(&self, u: &[f64]) -> Vec<f64> {
        let d = DVector::from_iterator(u.len(), u.iter().zip(&self.mean).map(|(a, b)| a - b));
        (self.mass_phi.transpose() * d).as_slice().to_vec()
    }

    /// `mean + Phi c`.
    pub fn decode(&self, coords: &[f64]) -> Vec<f64> {
        let v = &self.phi * DVector::from_column_slice(coords);
        v.iter().zip(&self.mean).map(|(a, b)| a + b).collect()
    }

    /// `Phi^T M A` for a matrix whose columns are nodal fields.
    pub fn project_columns(&self, a: &DMatrix<f64>) -> DMatrix<f64> {
        self.mass_phi.transpose() * a
    }
}

/// Active subspace from per-sample dual Jacobian rows `Phi^T M D_m u`.
///
/// Solves `H psi = lambda C^{-1} psi` with `H = mean_i B_i^T B_i` by writing
/// `psi = S y` for a covariance square root `S`, which turns it into the
/// symmetric problem for `S^T H S`.
pub fn compute_active_subspace(
    jacobian_rows: &[DMatrix<f64>],
    geometry: &impl GaussianGeometry,
    mean: Vec<f64>,
    r_m: usize,
) -> Result<AsBasis> {
    let dim = geometry.dim();
    if jacobian_rows.is_empty() {
        return Err(Error::invalid("active subspace needs at least one Jacobian sample"));
    }
    if r_m > dim {
        return Err(Error::invalid(format!("active-subspace rank {r_m} exceeds the parameter dimension {dim}")));
    }
    if mean.len() != dim || jacobian_rows.iter().any(|b| b.ncols() != dim) {
        return Err(Error::invalid("Jacobian rows do not match the parameter dimension"));
    }
    let n = jacobian_rows.len() as f64;
    let mut h = DMatrix::zeros(dim, dim);
    for b in jacobian_rows {
        let mut w = DMatrix::zeros(b.nrows(), dim);
        for (i, row) in b.row_iter().enumerate() {
            let v: Vec<f64> = row.iter().copied().collect();
            w.row_mut(i).copy_from_slice(&geometry.sqrt_cov_t(&v));
        }
        h.gemm_tr(1.0 / n, &w, &w, 1.0);
    }
    let (eigenvalues, y) = sorted_symmetric_eigen(h);
    let mut psi = DMatrix::zeros(dim, r_m);
    for c in 0..r_m {
        let col: Vec<f64> = y.column(c).iter().copied().collect();
        psi.column_mut(c).copy_from_slice(&geometry.sqrt_cov(&col));
    }
    fix_signs(&mut psi);
    let mut precision_psi = DMatrix::zeros(dim, r_m);
    for c in 0..r_m {
        precision_psi.column_mut(c).copy_from_slice(&geometry.precision(psi.column(c).as_slice()));
    }
    Ok(AsBasis { mean, psi, eigenvalues, precision_psi })
}

impl AsBasis {
    pub fn rank(&self) -> usize {
        self.psi.ncols()
    }

    pub fn dim(&self) -> usize {
        self.psi.nrows()
    }

    pub fn from_parts(mean: Vec<f64>, psi: DMatrix<f64>, eigenvalues: Vec<f64>, geometry: &impl GaussianGeometry) -> Result<Self> {
        if mean.len() != geometry.dim() || psi.nrows() != geometry.dim() {
            return Err(Error::invalid("active-subspace basis does not match the prior"));
        }
        let mut precision_psi = DMatrix::zeros(psi.nrows(), psi.ncols());
        for c in 0..psi.ncols() {
            precision_psi.column_mut(c).copy_from_slice(&geometry.precision(psi.column(c).as_slice()));
        }
        Ok(AsBasis { mean, psi, eigenvalues, precision_psi })
    }

    /// `Psi^T C^{-1} (m - mean)`.
    pub fn encode(&self, m: &[f64]) -> Vec<f64> {
        let d = DVector::from_iterator(m.len(), m.iter().zip(&self.mean).map(|(a, b)| a - b));
        (self.precision_psi.transpose() * d).as_slice().to_vec()
    }

    /// `mean + Psi c`.
    pub fn decode(&self, coords: &[f64]) -> Vec<f64> {
        let v = &self.psi * DVector::from_column_slice(coords);
        v.iter().zip(&self.mean).map(|(a, b)| a + b).collect()
    }
}

pub fn encode_state(pod: &PodBasis, u: &[f64]) -> Vec<f64> {
    pod.encode(u)
}

pub fn decode_state(pod: &PodBasis, coords: &[f64]) -> Vec<f64> {
    pod.decode(coords)
}

pub fn encode_param(basis: &AsBasis, m: &[f64]) -> Vec<f64> {
    basis.encode(m)
}

pub fn decode_param(basis: &AsBasis, coords: &[f64]) -> Vec<f64> {
    basis.decode(coords)
}
