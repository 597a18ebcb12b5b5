//! Discrete bi-Laplacian Gaussian random field on the reference mesh.
//!
//! With `A = delta M + gamma K_Theta` and `M = L L^T` (sparse Cholesky), the
//! covariance is `C = A^{-1} M A^{-1}` and samples are `m = A^{-1} L xi`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fem::{assemble_mass, assemble_stiffness};
use crate::linalg::{SkylineCholesky, SparseOperator};
use crate::mat2::{self, Mat2};
use crate::mesh::Mesh;

/// Independent, reproducible random stream `stream` under `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn standard_normal_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorCoefficients {
    pub gamma: f64,
    pub delta: f64,
    pub theta: Mat2,
}

impl PriorCoefficients {
    /// `gamma = 1`, `delta = 25`, eigenvalue 2 along `(sin pi/4, cos pi/4)` and 0.5 across.
    pub fn poisson_default() -> Self {
        PriorCoefficients {
            gamma: 1.0,
            delta: 25.0,
            theta: mat2::anisotropic_tensor(2.0, 0.5, std::f64::consts::FRAC_PI_4),
        }
    }
}

/// Covariance geometry of a centered Gaussian measure on nodal vectors.
///
/// `S` is any square root with `S S^T = C`.
pub trait GaussianGeometry: Sync {
    fn dim(&self) -> usize;
    /// `S y`.
    fn sqrt_cov(&self, y: &[f64]) -> Vec<f64>;
    /// `S^T v`.
    fn sqrt_cov_t(&self, v: &[f64]) -> Vec<f64>;
    /// `C^{-1} m`.
    fn precision(&self, m: &[f64]) -> Vec<f64>;
}

#[derive(Debug, Clone)]
pub struct BiLaplacianPrior {
    coefficients: PriorCoefficients,
    operator: SparseOperator,
    mass: SparseOperator,
    operator_factor: SkylineCholesky,
    mass_factor: SkylineCholesky,
}

pub fn build_prior(mesh: &Mesh, gamma: f64, delta: f64, theta: Mat2) -> Result<BiLaplacianPrior> {
    if !(delta > 0.0) || !(gamma >= 0.0) {
        return Err(Error::invalid(format!("prior needs delta > 0 and gamma >= 0, got delta = {delta}, gamma = {gamma}")));
    }
    let mass = assemble_mass(mesh);
    let stiffness = assemble_stiffness(mesh, &theta)?;
    let operator = mass.combine(delta, &stiffness, gamma);
    let operator_factor = SkylineCholesky::factor(&operator)?;
    let mass_factor = SkylineCholesky::factor(&mass)?;
    Ok(BiLaplacianPrior {
        coefficients: PriorCoefficients { gamma, delta, theta },
        operator,
        mass,
        operator_factor,
        mass_factor,
    })
}

impl BiLaplacianPrior {
    pub fn from_coefficients(mesh: &Mesh, c: &PriorCoefficients) -> Result<Self> {
        build_prior(mesh, c.gamma, c.delta, c.theta)
    }

    pub fn coefficients(&self) -> &PriorCoefficients {
        &self.coefficients
    }

    pub fn operator(&self) -> &SparseOperator {
        &self.operator
    }

    pub fn mass(&self) -> &SparseOperator {
        &self.mass
    }

    pub fn mass_factor(&self) -> &SkylineCholesky {
        &self.mass_factor
    }

    /// `A^{-1} L xi` for given standard-normal noise.
    pub fn sample_from_noise(&self, xi: &[f64]) -> Vec<f64> {
        self.operator_factor.solve(&self.mass_factor.lower_mul(xi))
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Vec<f64> {
        let xi = standard_normal_vec(rng, self.operator.dim());
        self.sample_from_noise(&xi)
    }

    /// `A M^{-1} A m`.
    pub fn apply_precision(&self, m: &[f64]) -> Vec<f64> {
        let am = self.operator.mul_vec(m);
        self.operator.mul_vec(&self.mass_factor.solve(&am))
    }

    /// `A^{-1} M A^{-1} v`.
    pub fn apply_covariance(&self, v: &[f64]) -> Vec<f64> {
        let w = self.operator_factor.solve(v);
        self.operator_factor.solve(&self.mass.mul_vec(&w))
    }

    /// `L^{-1} A m`; maps prior samples back to their standard-normal noise.
    pub fn whiten(&self, m: &[f64]) -> Vec<f64> {
        let mut w = self.operator.mul_vec(m);
        self.mass_factor.lower_solve_in_place(&mut w);
        w
    }
}

pub fn sample_prior(prior: &BiLaplacianPrior, rng: &mut impl Rng) -> Vec<f64> {
    prior.sample(rng)
}

pub fn apply_precision(prior: &BiLaplacianPrior, m: &[f64]) -> Vec<f64> {
    prior.apply_precision(m)
}

impl GaussianGeometry for BiLaplacianPrior {
    fn dim(&self) -> usize {
        self.operator.dim()
    }

    fn sqrt_cov(&self, y: &[f64]) -> Vec<f64> {
        self.sample_from_noise(y)
    }

    fn sqrt_cov_t(&self, v: &[f64]) -> Vec<f64> {
        self.mass_factor.lower_transpose_mul(&self.operator_factor.solve(v))
    }

    fn precision(&self, m: &[f64]) -> Vec<f64> {
        self.apply_precision(m)
    }
}

/// Gaussian geometry given by an explicit dense covariance square root.
#[derive(Debug, Clone)]
pub struct DenseGaussian {
    sqrt: nalgebra::DMatrix<f64>,
    precision: nalgebra::DMatrix<f64>,
}

impl DenseGaussian {
    pub fn from_sqrt(sqrt: nalgebra::DMatrix<f64>) -> Result<Self> {
        let cov = &sqrt * sqrt.transpose();
        let precision = cov
            .try_inverse()
            .ok_or_else(|| Error::invalid("dense covariance is singular"))?;
        Ok(DenseGaussian { sqrt, precision })
    }

    pub fn identity(n: usize) -> Self {
        DenseGaussian { sqrt: nalgebra::DMatrix::identity(n, n), precision: nalgebra::DMatrix::identity(n, n) }
    }
}

impl GaussianGeometry for DenseGaussian {
    fn dim(&self) -> usize {
        self.sqrt.nrows()
    }

    fn sqrt_cov(&self, y: &[f64]) -> Vec<f64> {
        (&self.sqrt * nalgebra::DVector::from_column_slice(y)).as_slice().to_vec()
    }

    fn sqrt_cov_t(&self, v: &[f64]) -> Vec<f64> {
        (self.sqrt.transpose() * nalgebra::DVector::from_column_slice(v)).as_slice().to_vec()
    }

    fn precision(&self, m: &[f64]) -> Vec<f64> {
        (&self.precision * nalgebra::DVector::from_column_slice(m)).as_slice().to_vec()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::norm2;
    use crate::mesh::build_rect_mesh;
    use nalgebra::{DMatrix, SymmetricEigen};

    fn desk_prior(nx: usize, ny: usize) -> (Mesh, BiLaplacianPrior) {
        let mesh = build_rect_mesh(nx, ny, 4.0, 1.0).unwrap();
        let c = PriorCoefficients::poisson_default();
        let prior = build_prior(&mesh, c.gamma, c.delta, c.theta).unwrap();
        (mesh, prior)
    }

    #[test]
    fn operator_is_spd() {
        let (_, prior) = desk_prior(4, 2);
        let a = prior.operator().to_dense();
        assert!(prior.operator().is_symmetric(1e-14));
        assert!(SymmetricEigen::new(a).eigenvalues.min() > 0.0);
    }

    #[test]
    fn rejects_bad_coefficients() {
        let mesh = build_rect_mesh(2, 1, 4.0, 1.0).unwrap();
        assert!(build_prior(&mesh, 1.0, 0.0, mat2::IDENTITY).is_err());
        assert!(build_prior(&mesh, 1.0, 1.0, [[1.0, 0.0], [0.0, -1.0]]).is_err());
    }

    #[test]
    fn zero_noise_gives_zero_field() {
        let (mesh, prior) = desk_prior(4, 2);
        assert!(prior.sample_from_noise(&vec![0.0; mesh.num_vertices()]).iter().all(|v| *v == 0.0));
        assert!(prior.apply_precision(&vec![0.0; mesh.num_vertices()]).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn sampling_is_deterministic_per_stream() {
        let (_, prior) = desk_prior(8, 2);
        let a = prior.sample(&mut stream_rng(42, 3));
        let b = prior.sample(&mut stream_rng(42, 3));
        let c = prior.sample(&mut stream_rng(42, 4));
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn vanishing_diffusion_is_scaled_white_noise() {
        let mesh = build_rect_mesh(4, 2, 4.0, 1.0).unwrap();
        let delta = 25.0;
        let prior = build_prior(&mesh, 0.0, delta, mat2::IDENTITY).unwrap();
        let xi: Vec<f64> = (0..mesh.num_vertices()).map(|i| (i as f64 * 0.37).sin()).collect();
        let m = prior.sample_from_noise(&xi);
        // delta M m = L xi
        let lhs: Vec<f64> = prior.mass().mul_vec(&m).iter().map(|v| v * delta).collect();
        let rhs = prior.mass_factor().lower_mul(&xi);
        for (a, b) in lhs.iter().zip(&rhs) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn precision_matches_dense_and_round_trips() {
        let (mesh, prior) = desk_prior(2, 1);
        let a = prior.operator().to_dense();
        let m_inv = prior.mass().to_dense().try_inverse().unwrap();
        let dense = &a * m_inv * &a;
        let m: Vec<f64> = (0..mesh.num_vertices()).map(|i| 1.0 + (i as f64).cos()).collect();
        let got = prior.apply_precision(&m);
        let want = &dense * nalgebra::DVector::from_vec(m.clone());
        let scale = want.norm();
        for (g, w) in got.iter().zip(want.iter()) {
            assert!((g - w).abs() <= 1e-10 * scale);
        }
        let back = prior.apply_covariance(&got);
        let err: f64 = back.iter().zip(&m).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        assert!(err <= 1e-8 * norm2(&m));
    }

    #[test]
    fn sqrt_factors_compose_to_covariance() {
        let (mesh, prior) = desk_prior(3, 2);
        let n = mesh.num_vertices();
        let s = DMatrix::from_fn(n, n, |i, j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            prior.sqrt_cov(&e)[i]
        });
        let a_inv = prior.operator().to_dense().try_inverse().unwrap();
        let cov = &a_inv * prior.mass().to_dense() * &a_inv;
        assert!((&s * s.transpose() - &cov).amax() <= 1e-12 * cov.amax());
        let v: Vec<f64> = (0..n).map(|i| (i as f64).sin()).collect();
        let st = s.transpose() * nalgebra::DVector::from_vec(v.clone());
        for (a, b) in prior.sqrt_cov_t(&v).iter().zip(st.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        // whitening inverts the sampling map
        let xi: Vec<f64> = (0..n).map(|i| (i as f64 * 1.3).cos()).collect();
        for (a, b) in prior.whiten(&prior.sample_from_noise(&xi)).iter().zip(&xi) {
            assert!((a - b).abs() < 1e-10);
        }
    }
}
