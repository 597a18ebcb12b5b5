//! P1 assembly of the reference-domain mass and anisotropic stiffness forms.

use crate::error::{Error, Result};
use crate::linalg::SparseOperator;
use crate::mat2::{self, Mat2};
use crate::mesh::{Mesh, MID_EDGE_BARY};

/// Consistent mass matrix, `M_ij = (phi_i, phi_j)_{L2}`.
pub fn assemble_mass(mesh: &Mesh) -> SparseOperator {
    let mut t = Vec::with_capacity(9 * mesh.num_triangles());
    for el in mesh.elements() {
        let w = el.quad_weight();
        for a in 0..3 {
            for b in 0..3 {
                let v: f64 = MID_EDGE_BARY.iter().map(|bary| w * bary[a] * bary[b]).sum();
                t.push((el.vertices[a], el.vertices[b], v));
            }
        }
    }
    SparseOperator::from_triplets(mesh.num_vertices(), t)
}

/// Stiffness matrix of `-div(Theta grad .)` with natural boundary conditions.
pub fn assemble_stiffness(mesh: &Mesh, theta: &Mat2) -> Result<SparseOperator> {
    if !mat2::is_spd(theta) {
        return Err(Error::invalid(format!("anisotropy tensor {theta:?} is not symmetric positive definite")));
    }
    let mut t = Vec::with_capacity(9 * mesh.num_triangles());
    for el in mesh.elements() {
        for a in 0..3 {
            for b in 0..3 {
                let v = el.area * mat2::bilinear(&el.grads[a], theta, &el.grads[b]);
                t.push((el.vertices[a], el.vertices[b], v));
            }
        }
    }
    Ok(SparseOperator::from_triplets(mesh.num_vertices(), t))
}
