//! Reduced-basis neural operator `u(m, z) = mean_u + Phi g(Psi^* (m - mean_m), z)`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::SparseOperator;
use crate::network::LatentNet;
use crate::reduce::{AsBasis, PodBasis};

#[derive(Debug, Clone)]
pub struct Rbno {
    pub pod: PodBasis,
    pub as_basis: AsBasis,
    pub net: LatentNet,
    /// The network sees `z_scale * z`; its `z` Jacobian is rescaled to match.
    pub z_scale: f64,
}

/// Full-order prediction, optionally with `D_z u` as nodal columns.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub u: Vec<f64>,
    pub dz: Option<DMatrix<f64>>,
}

/// A held-out sample with its full-order state and reduced Jacobians.
#[derive(Debug, Clone)]
pub struct TestRecord {
    pub m: Vec<f64>,
    pub z: Vec<f64>,
    pub u: Vec<f64>,
    pub j_mr: DMatrix<f64>,
    pub j_zr: DMatrix<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TestErrors {
    pub state: f64,
    pub jac_m: f64,
    pub jac_z: f64,
}

impl Rbno {
    pub fn new(pod: PodBasis, as_basis: AsBasis, net: LatentNet) -> Result<Self> {
        if net.output_dim() != pod.rank() {
            return Err(Error::invalid(format!("network output {} does not match POD rank {}", net.output_dim(), pod.rank())));
        }
        if net.input_dim() < as_basis.rank() {
            return Err(Error::invalid("network input is narrower than the active-subspace rank"));
        }
        if pod.dim() != as_basis.dim() {
            return Err(Error::invalid("state and parameter bases live on different meshes"));
        }
        Ok(Rbno { pod, as_basis, net, z_scale: 1.0 })
    }

    pub fn with_z_scale(mut self, z_scale: f64) -> Result<Self> {
        if !(z_scale.is_finite() && z_scale > 0.0) {
            return Err(Error::invalid("z_scale must be positive"));
        }
        self.z_scale = z_scale;
        Ok(self)
    }

    /// Network input for a shape vector.
    pub fn scaled_z(&self, z: &[f64]) -> Vec<f64> {
        z.iter().map(|v| v * self.z_scale).collect()
    }

    fn net_jacobian(&self, m_r: &[f64], z: &[f64]) -> Result<(Vec<f64>, DMatrix<f64>, DMatrix<f64>)> {
        let (y, d1, d2) = self.net.forward_and_jacobian(m_r, &self.scaled_z(z))?;
        Ok((y, d1, d2 * self.z_scale))
    }

    pub fn shape_dim(&self) -> usize {
        self.net.input_dim() - self.as_basis.rank()
    }

    fn check(&self, m: &[f64], z: &[f64]) -> Result<()> {
        if m.len() != self.as_basis.dim() || z.len() != self.shape_dim() {
            return Err(Error::invalid("field or shape vector does not match the surrogate"));
        }
        Ok(())
    }

    /// Latent output and `D_2 g` for a parameter field.
    pub fn latent(&self, m: &[f64], z: &[f64], with_dz: bool) -> Result<(Vec<f64>, Option<DMatrix<f64>>)> {
        self.check(m, z)?;
        self.latent_encoded(&self.as_basis.encode(m), z, with_dz)
    }

    /// As [`Self::latent`] for already encoded parameter coordinates.
    pub fn latent_encoded(&self, m_r: &[f64], z: &[f64], with_dz: bool) -> Result<(Vec<f64>, Option<DMatrix<f64>>)> {
        if with_dz {
            let (y, _, dz) = self.net_jacobian(m_r, z)?;
            Ok((y, Some(dz)))
        } else {
            Ok((self.net.forward(m_r, &self.scaled_z(z))?, None))
        }
    }

    pub fn predict(&self, m: &[f64], z: &[f64], with_dz: bool) -> Result<Prediction> {
        let (y, dz) = self.latent(m, z, with_dz)?;
        Ok(Prediction { u: self.pod.decode(&y), dz: dz.map(|d| &self.pod.phi * d) })
    }

    /// Mean relative errors over held-out samples: state in the mass norm,
    /// reduced Jacobians in the Frobenius norm.
    pub fn test_errors(&self, records: &[TestRecord], mass: &SparseOperator) -> Result<TestErrors> {
        if records.is_empty() {
            return Err(Error::invalid("test set is empty"));
        }
        let mut acc = TestErrors { state: 0.0, jac_m: 0.0, jac_z: 0.0 };
        for r in records {
            self.check(&r.m, &r.z)?;
            let m_r = self.as_basis.encode(&r.m);
            let (y, d1, d2) = self.net_jacobian(&m_r, &r.z)?;
            let u = self.pod.decode(&y);
            let diff: Vec<f64> = u.iter().zip(&r.u).map(|(a, b)| a - b).collect();
            acc.state += (mass.quadratic_form(&diff) / mass.quadratic_form(&r.u)).sqrt();
            acc.jac_m += (&d1 - &r.j_mr).norm() / r.j_mr.norm();
            acc.jac_z += (&d2 - &r.j_zr).norm() / r.j_zr.norm();
        }
        let n = records.len() as f64;
        Ok(TestErrors { state: acc.state / n, jac_m: acc.jac_m / n, jac_z: acc.jac_z / n })
    }
}

pub fn rbno_predict(rbno: &Rbno, m: &[f64], z: &[f64], with_dz: bool) -> Result<Prediction> {
    rbno.predict(m, z, with_dz)
}

/// `u - mean` expressed in the POD coordinates, for range checks.
pub fn range_residual(pod: &PodBasis, u: &[f64], mass: &SparseOperator) -> f64 {
    let c = pod.encode(u);
    let proj = &pod.phi * DVector::from_column_slice(&c);
    let r: Vec<f64> = u.iter().zip(&pod.mean).zip(proj.iter()).map(|((a, b), p)| a - b - p).collect();
    mass.quadratic_form(&r).max(0.0).sqrt()
}
