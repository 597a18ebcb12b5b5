//! Reference-domain Poisson problem with shape and log-permeability
//! parameters, its adjoint, and the bottom-flux tracking functional.
//!
//! The residual for test function `v` is
//! `int exp(m) (F^{-T} grad u).(F^{-T} grad v) det F - int (f o chi_z) v det F`,
//! with `u = 0` on the bottom, `u = 1` on the top and natural conditions on the
//! sides. Dirichlet rows and columns are eliminated symmetrically so the same
//! Cholesky factor serves the state, the adjoint and every reduced-Jacobian
//! right-hand side.

use nalgebra::DMatrix;
use std::sync::atomic::{AtomicUsize, Ordering};

use crate::error::{Error, Result};
use crate::linalg::{Factorization, SparseOperator};
use crate::mat2::{self, Mat2};
use crate::mesh::{BoundaryTag, Element, Mesh, Point, EDGE_GAUSS, MID_EDGE_BARY};
use crate::shape::{deform_from_evals, BasisEval, DisplacementBasis, Source, SpatialField};

/// Outward unit normal of the bottom boundary.
const BOTTOM_NORMAL: [f64; 2] = [0.0, -1.0];

/// Linear-solve bookkeeping, shared by every solve against one problem.
#[derive(Debug, Default)]
pub struct SolveCounters {
    factorizations: AtomicUsize,
    state_solves: AtomicUsize,
    adjoint_solves: AtomicUsize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct SolveCounts {
    pub factorizations: usize,
    pub state_solves: usize,
    pub adjoint_solves: usize,
}

impl SolveCounters {
    pub fn snapshot(&self) -> SolveCounts {
        SolveCounts {
            factorizations: self.factorizations.load(Ordering::Relaxed),
            state_solves: self.state_solves.load(Ordering::Relaxed),
            adjoint_solves: self.adjoint_solves.load(Ordering::Relaxed),
        }
    }

    pub fn reset(&self) {
        self.factorizations.store(0, Ordering::Relaxed);
        self.state_solves.store(0, Ordering::Relaxed);
        self.adjoint_solves.store(0, Ordering::Relaxed);
    }
}

#[derive(Debug, Clone)]
struct EdgePoint {
    x: Point,
    weight: f64,
    /// Bottom-edge endpoints as vertex indices and as positions in the bottom list.
    vertices: [usize; 2],
    bottom_index: [usize; 2],
    /// Linear weights of the two endpoints at this point.
    bary: [f64; 2],
    triangle: usize,
}

pub struct PoissonProblem {
    mesh: Mesh,
    basis: DisplacementBasis,
    source: Source,
    tau_target: Vec<f64>,
    bottom: Vec<usize>,
    dirichlet: Vec<bool>,
    dirichlet_values: Vec<f64>,
    mass: SparseOperator,
    /// Basis evaluations at volume quadrature points, `(3 e + q) d_z + i`.
    qp_evals: Vec<BasisEval>,
    edge_points: Vec<EdgePoint>,
    /// Basis evaluations at bottom-edge quadrature points, `g d_z + i`.
    edge_evals: Vec<BasisEval>,
    counters: SolveCounters,
}

impl std::fmt::Debug for PoissonProblem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PoissonProblem")
            .field("mesh", &self.mesh.spec())
            .field("basis", &self.basis)
            .field("source", &self.source)
            .finish_non_exhaustive()
    }
}

/// Per-quadrature-point quantities cached by a state solve.
#[derive(Debug, Clone, Copy)]
struct QpState {
    det_f: f64,
    f_inv: Mat2,
    /// `F^{-1} F^{-T}`.
    b: Mat2,
    exp_m: f64,
    f_val: f64,
    f_grad: [f64; 2],
}

/// Quantity of interest and its partial derivatives (as Euclidean duals).
#[derive(Debug, Clone)]
pub struct QoiEval {
    pub value: f64,
    pub du: Vec<f64>,
    pub dm: Vec<f64>,
    pub dz: Vec<f64>,
}

impl PoissonProblem {
    /// `tau_target` holds one value per bottom vertex, ordered by vertex index.
    pub fn new(mesh: Mesh, basis: DisplacementBasis, source: Source, tau_target: Vec<f64>) -> Result<Self> {
        let bottom = mesh.boundary_dofs(BoundaryTag::Bottom);
        let top = mesh.boundary_dofs(BoundaryTag::Top);
        if bottom.is_empty() || top.is_empty() {
            return Err(Error::invalid("mesh lacks bottom or top boundary"));
        }
        if tau_target.len() != bottom.len() {
            return Err(Error::invalid(format!(
                "target flux has {} values but the bottom boundary has {} vertices",
                tau_target.len(),
                bottom.len()
            )));
        }
        let n = mesh.num_vertices();
        let mut dirichlet = vec![false; n];
        let mut dirichlet_values = vec![0.0; n];
        for &v in &bottom {
            dirichlet[v] = true;
        }
        for &v in &top {
            dirichlet[v] = true;
            dirichlet_values[v] = 1.0;
        }
        let mass = crate::fem::assemble_mass(&mesh);

        let qp_evals = mesh
            .elements()
            .iter()
            .flat_map(|el| el.quad_points.iter().flat_map(|&x| basis.eval_all(x)))
            .collect();

        let mut edge_points = Vec::new();
        for edge in mesh.edges_with_tag(BoundaryTag::Bottom) {
            let [v0, v1] = edge.vertices;
            let (p0, p1) = (mesh.vertices()[v0], mesh.vertices()[v1]);
            let len = (p1[0] - p0[0]).hypot(p1[1] - p0[1]);
            let bottom_index = [bottom.binary_search(&v0).unwrap(), bottom.binary_search(&v1).unwrap()];
            for &(s, w) in &EDGE_GAUSS {
                edge_points.push(EdgePoint {
                    x: [(1.0 - s) * p0[0] + s * p1[0], (1.0 - s) * p0[1] + s * p1[1]],
                    weight: w * len,
                    vertices: [v0, v1],
                    bottom_index,
                    bary: [1.0 - s, s],
                    triangle: edge.triangle,
                });
            }
        }
        let edge_evals = edge_points.iter().flat_map(|p| basis.eval_all(p.x)).collect();

        Ok(PoissonProblem {
            mesh,
            basis,
            source,
            tau_target,
            bottom,
            dirichlet,
            dirichlet_values,
            mass,
            qp_evals,
            edge_points,
            edge_evals,
            counters: SolveCounters::default(),
        })
    }

    pub fn with_uniform_target(mesh: Mesh, basis: DisplacementBasis, source: Source, tau: f64) -> Result<Self> {
        let n = mesh.boundary_dofs(BoundaryTag::Bottom).len();
        Self::new(mesh, basis, source, vec![tau; n])
    }

    pub fn mesh(&self) -> &Mesh {
        &self.mesh
    }

    pub fn basis(&self) -> &DisplacementBasis {
        &self.basis
    }

    pub fn source(&self) -> Source {
        self.source
    }

    pub fn mass(&self) -> &SparseOperator {
        &self.mass
    }

    pub fn dim(&self) -> usize {
        self.mesh.num_vertices()
    }

    pub fn shape_dim(&self) -> usize {
        self.basis.dim()
    }

    pub fn bottom_dofs(&self) -> &[usize] {
        &self.bottom
    }

    pub fn tau_target(&self) -> &[f64] {
        &self.tau_target
    }

    pub fn set_tau_target(&mut self, tau: Vec<f64>) -> Result<()> {
        if tau.len() != self.bottom.len() {
            return Err(Error::invalid("target flux length does not match the bottom boundary"));
        }
        self.tau_target = tau;
        Ok(())
    }

    pub fn dirichlet_mask(&self) -> &[bool] {
        &self.dirichlet
    }

    pub fn counters(&self) -> &SolveCounters {
        &self.counters
    }

    fn check_inputs(&self, m: &[f64], z: &[f64]) -> Result<()> {
        if m.len() != self.dim() {
            return Err(Error::invalid(format!("parameter field has length {} but the mesh has {} vertices", m.len(), self.dim())));
        }
        if z.len() != self.shape_dim() {
            return Err(Error::invalid(format!("shape vector has length {} but the basis has dimension {}", z.len(), self.shape_dim())));
        }
        Ok(())
    }

    fn qp_basis(&self, e: usize, q: usize) -> &[BasisEval] {
        let d = self.shape_dim();
        let start = (3 * e + q) * d;
        &self.qp_evals[start..start + d]
    }

    fn edge_basis(&self, g: usize) -> &[BasisEval] {
        let d = self.shape_dim();
        &self.edge_evals[g * d..(g + 1) * d]
    }

    fn qp_states(&self, m: &[f64], z: &[f64]) -> Result<Vec<QpState>> {
        let mut out = Vec::with_capacity(3 * self.mesh.num_triangles());
        for (e, el) in self.mesh.elements().iter().enumerate() {
            for (q, bary) in MID_EDGE_BARY.iter().enumerate() {
                let x = el.quad_points[q];
                let d = deform_from_evals(self.qp_basis(e, q), z, x)?;
                let m_q: f64 = (0..3).map(|a| bary[a] * m[el.vertices[a]]).sum();
                out.push(QpState {
                    det_f: d.det_f,
                    f_inv: d.f_inv,
                    b: mat2::mul(&d.f_inv, &mat2::transpose(&d.f_inv)),
                    exp_m: m_q.exp(),
                    f_val: self.source.value(d.chi),
                    f_grad: self.source.gradient(d.chi),
                });
            }
        }
        Ok(out)
    }

    fn assemble_from(&self, qps: &[QpState]) -> (SparseOperator, Vec<f64>) {
        let mut t = Vec::with_capacity(9 * self.mesh.num_triangles());
        let mut load = vec![0.0; self.dim()];
        for (e, el) in self.mesh.elements().iter().enumerate() {
            let w = el.quad_weight();
            let mut ke = [[0.0; 3]; 3];
            for (q, bary) in MID_EDGE_BARY.iter().enumerate() {
                let s = &qps[3 * e + q];
                let g = mat2::scale(&s.b, s.det_f * s.exp_m * w);
                for a in 0..3 {
                    for b in 0..3 {
                        ke[a][b] += mat2::bilinear(&el.grads[a], &g, &el.grads[b]);
                    }
                    load[el.vertices[a]] += w * s.f_val * s.det_f * bary[a];
                }
            }
            for a in 0..3 {
                for b in 0..3 {
                    t.push((el.vertices[a], el.vertices[b], ke[a][b]));
                }
            }
        }
        (SparseOperator::from_triplets(self.dim(), t), load)
    }

    /// Unconstrained stiffness operator and load vector at `(m, z)`.
    pub fn assemble_system(&self, m: &[f64], z: &[f64]) -> Result<(SparseOperator, Vec<f64>)> {
        self.check_inputs(m, z)?;
        Ok(self.assemble_from(&self.qp_states(m, z)?))
    }

    pub fn solve_state(&self, m: &[f64], z: &[f64]) -> Result<StateSolution<'_>> {
        self.check_inputs(m, z)?;
        let qps = self.qp_states(m, z)?;
        let (stiffness, load) = self.assemble_from(&qps);
        let reduced = stiffness.eliminate(&self.dirichlet);
        let factor = Factorization::cholesky(&reduced)?;
        self.counters.factorizations.fetch_add(1, Ordering::Relaxed);

        // lifted right-hand side: b_f - K_fd g_d on free rows, g_d on fixed rows
        let lifted = stiffness.mul_vec(&self.dirichlet_values);
        let rhs: Vec<f64> = (0..self.dim())
            .map(|i| if self.dirichlet[i] { self.dirichlet_values[i] } else { load[i] - lifted[i] })
            .collect();
        let u = factor.solve(&rhs)?;
        self.counters.state_solves.fetch_add(1, Ordering::Relaxed);
        Ok(StateSolution { problem: self, m: m.to_vec(), z: z.to_vec(), u, stiffness, load, factor, qps })
    }

    /// Flux-tracking functional `1/2 int_bottom (-exp(m) F^{-T} grad u . N - tau)^2`
    /// and its partial derivatives, for any state field `u`.
    pub fn qoi(&self, u: &[f64], m: &[f64], z: &[f64]) -> Result<QoiEval> {
        self.check_inputs(m, z)?;
        if u.len() != self.dim() {
            return Err(Error::invalid("state field length does not match the mesh"));
        }
        let d = self.shape_dim();
        let mut out = QoiEval { value: 0.0, du: vec![0.0; self.dim()], dm: vec![0.0; self.dim()], dz: vec![0.0; d] };
        for (g, p) in self.edge_points.iter().enumerate() {
            let evals = self.edge_basis(g);
            let def = deform_from_evals(evals, z, p.x)?;
            let el = &self.mesh.elements()[p.triangle];
            let grad_u = element_gradient(el, u);
            let m_g = p.bary[0] * m[p.vertices[0]] + p.bary[1] * m[p.vertices[1]];
            let tau = p.bary[0] * self.tau_target[p.bottom_index[0]] + p.bary[1] * self.tau_target[p.bottom_index[1]];
            let exp_m = m_g.exp();
            let w_vec = mat2::apply(&def.f_inv, &BOTTOM_NORMAL);
            let flux = -exp_m * dot2(&grad_u, &w_vec);
            let r = flux - tau;
            out.value += 0.5 * p.weight * r * r;
            let c = p.weight * r;
            for a in 0..3 {
                out.du[el.vertices[a]] += c * (-exp_m * dot2(&el.grads[a], &w_vec));
            }
            for k in 0..2 {
                out.dm[p.vertices[k]] += c * flux * p.bary[k];
            }
            for (i, e) in evals.iter().enumerate() {
                let dw = mat2::apply(&mat2::mul(&def.f_inv, &e.grad), &w_vec);
                out.dz[i] += c * exp_m * dot2(&grad_u, &dw);
            }
        }
        Ok(out)
    }

    /// Normal flux at each bottom vertex, averaged over the adjacent edges.
    pub fn bottom_flux_profile(&self, u: &[f64], m: &[f64], z: &[f64]) -> Result<Vec<f64>> {
        self.check_inputs(m, z)?;
        let mut sum = vec![0.0; self.bottom.len()];
        let mut count = vec![0usize; self.bottom.len()];
        for edge in self.mesh.edges_with_tag(BoundaryTag::Bottom) {
            let el = &self.mesh.elements()[edge.triangle];
            let grad_u = element_gradient(el, u);
            for &v in &edge.vertices {
                let x = self.mesh.vertices()[v];
                let def = deform_from_evals(&self.basis.eval_all(x), z, x)?;
                let w_vec = mat2::apply(&def.f_inv, &BOTTOM_NORMAL);
                let k = self.bottom.binary_search(&v).unwrap();
                sum[k] += -m[v].exp() * dot2(&grad_u, &w_vec);
                count[k] += 1;
            }
        }
        Ok(sum.iter().zip(&count).map(|(s, &c)| s / c as f64).collect())
    }

    /// `Q(u(m, z), m, z)` and its total `z`-gradient via one adjoint solve.
    pub fn qoi_total_gradient(&self, m: &[f64], z: &[f64]) -> Result<(f64, Vec<f64>)> {
        let state = self.solve_state(m, z)?;
        let q = state.qoi()?;
        let (_, z_row) = state.vjp(&q.du)?;
        Ok((q.value, z_row.iter().zip(&q.dz).map(|(a, b)| a + b).collect()))
    }
}

fn dot2(a: &[f64; 2], b: &[f64; 2]) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

fn element_gradient(el: &Element, u: &[f64]) -> [f64; 2] {
    let mut g = [0.0; 2];
    for a in 0..3 {
        g[0] += u[el.vertices[a]] * el.grads[a][0];
        g[1] += u[el.vertices[a]] * el.grads[a][1];
    }
    g
}

/// Derivative of `det F * F^{-1} F^{-T}` along a perturbation `D` of `F`.
fn d_metric(s: &QpState, dir: &Mat2) -> Mat2 {
    let p = mat2::mul(&s.f_inv, dir);
    let pb = mat2::mul(&p, &s.b);
    let sym = mat2::add(&pb, &mat2::transpose(&pb));
    mat2::scale(&mat2::add(&mat2::scale(&s.b, mat2::trace(&p)), &mat2::scale(&sym, -1.0)), s.det_f)
}

/// A solved state with its cached factorization and quadrature data.
pub struct StateSolution<'a> {
    problem: &'a PoissonProblem,
    m: Vec<f64>,
    z: Vec<f64>,
    u: Vec<f64>,
    stiffness: SparseOperator,
    load: Vec<f64>,
    factor: Factorization,
    qps: Vec<QpState>,
}

impl<'a> StateSolution<'a> {
    pub fn problem(&self) -> &'a PoissonProblem {
        self.problem
    }

    pub fn u(&self) -> &[f64] {
        &self.u
    }

    pub fn into_u(self) -> Vec<f64> {
        self.u
    }

    pub fn m(&self) -> &[f64] {
        &self.m
    }

    pub fn z(&self) -> &[f64] {
        &self.z
    }

    pub fn stiffness(&self) -> &SparseOperator {
        &self.stiffness
    }

    pub fn load(&self) -> &[f64] {
        &self.load
    }

    /// `K u - b` on free rows, zero on Dirichlet rows.
    pub fn residual(&self) -> Vec<f64> {
        let ku = self.stiffness.mul_vec(&self.u);
        let mask = self.problem.dirichlet_mask();
        (0..ku.len()).map(|i| if mask[i] { 0.0 } else { ku[i] - self.load[i] }).collect()
    }

    fn free_solve(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        let mask = self.problem.dirichlet_mask();
        if rhs.len() != mask.len() {
            return Err(Error::invalid("right-hand side length does not match the mesh"));
        }
        let r: Vec<f64> = rhs.iter().zip(mask).map(|(v, &fixed)| if fixed { 0.0 } else { *v }).collect();
        self.factor.solve(&r)
    }

    /// Solves `(D_u R)^T p = rhs` on free rows with `p = 0` on Dirichlet rows.
    pub fn solve_adjoint(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        let p = self.free_solve(rhs)?;
        self.problem.counters.adjoint_solves.fetch_add(1, Ordering::Relaxed);
        Ok(p)
    }

    /// `D_u R h` restricted to free rows (Dirichlet entries of `h` are ignored).
    pub fn apply_state_jacobian(&self, h: &[f64]) -> Vec<f64> {
        let mask = self.problem.dirichlet_mask();
        let hf: Vec<f64> = h.iter().zip(mask).map(|(v, &fixed)| if fixed { 0.0 } else { *v }).collect();
        let r = self.stiffness.mul_vec(&hf);
        r.iter().zip(mask).map(|(v, &fixed)| if fixed { 0.0 } else { *v }).collect()
    }

    /// `D_m R h_m + D_z R h_z` over all rows.
    fn parameter_residual_derivative(&self, h_m: &[f64], h_z: &[f64]) -> Vec<f64> {
        let p = self.problem;
        let mut out = vec![0.0; p.dim()];
        for (e, el) in p.mesh.elements().iter().enumerate() {
            let w = el.quad_weight();
            let grad_u = element_gradient(el, &self.u);
            for (q, bary) in MID_EDGE_BARY.iter().enumerate() {
                let s = &self.qps[3 * e + q];
                let evals = p.qp_basis(e, q);
                let hm_q: f64 = (0..3).map(|a| bary[a] * h_m[el.vertices[a]]).sum();
                let mut dir = mat2::ZERO;
                let mut disp = [0.0; 2];
                for (ev, &hz) in evals.iter().zip(h_z) {
                    dir = mat2::add(&dir, &mat2::scale(&ev.grad, hz));
                    disp[0] += hz * ev.disp[0];
                    disp[1] += hz * ev.disp[1];
                }
                let dg = mat2::add(&mat2::scale(&s.b, s.det_f * hm_q), &d_metric(s, &dir));
                let flux = mat2::apply(&dg, &grad_u);
                let d_source = s.det_f * (dot2(&s.f_grad, &disp) + s.f_val * mat2::trace(&mat2::mul(&s.f_inv, &dir)));
                for a in 0..3 {
                    out[el.vertices[a]] += w * (s.exp_m * dot2(&el.grads[a], &flux) - d_source * bary[a]);
                }
            }
        }
        out
    }

    /// `((D_m R)^T p, (D_z R)^T p)`.
    fn parameter_residual_transpose(&self, p_field: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let p = self.problem;
        let mut dm = vec![0.0; p.dim()];
        let mut dz = vec![0.0; p.shape_dim()];
        for (e, el) in p.mesh.elements().iter().enumerate() {
            let w = el.quad_weight();
            let grad_u = element_gradient(el, &self.u);
            let grad_p = element_gradient(el, p_field);
            for (q, bary) in MID_EDGE_BARY.iter().enumerate() {
                let s = &self.qps[3 * e + q];
                let p_q: f64 = (0..3).map(|a| bary[a] * p_field[el.vertices[a]]).sum();
                let energy = s.det_f * mat2::bilinear(&grad_p, &s.b, &grad_u);
                for a in 0..3 {
                    dm[el.vertices[a]] += w * s.exp_m * energy * bary[a];
                }
                for (i, ev) in p.qp_basis(e, q).iter().enumerate() {
                    let dg = d_metric(s, &ev.grad);
                    let d_source = s.det_f * (dot2(&s.f_grad, &ev.disp) + s.f_val * mat2::trace(&mat2::mul(&s.f_inv, &ev.grad)));
                    dz[i] += w * (s.exp_m * mat2::bilinear(&grad_p, &dg, &grad_u) - d_source * p_q);
                }
            }
        }
        (dm, dz)
    }

    /// Directional derivative of the solution map along `(h_m, h_z)`.
    pub fn jvp(&self, h_m: &[f64], h_z: &[f64]) -> Result<Vec<f64>> {
        if h_m.len() != self.problem.dim() || h_z.len() != self.problem.shape_dim() {
            return Err(Error::invalid("direction dimensions do not match the problem"));
        }
        let r = self.parameter_residual_derivative(h_m, h_z);
        let mut h_u = self.free_solve(&r)?;
        h_u.iter_mut().for_each(|v| *v = -*v);
        Ok(h_u)
    }

    /// Rows `v^T D_m u` and `v^T D_z u` from one adjoint solve.
    pub fn vjp(&self, v: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let p = self.solve_adjoint(v)?;
        let (mut dm, mut dz) = self.parameter_residual_transpose(&p);
        dm.iter_mut().chain(dz.iter_mut()).for_each(|x| *x = -*x);
        Ok((dm, dz))
    }

    /// Rows of `Phi^* D_m u` (as dual vectors) and `Phi^* D_z u`, where
    /// `Phi^* = Phi^T M`. Columns of `phi` are the output basis.
    pub fn jacobian_rows(&self, phi: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let n = self.problem.dim();
        if phi.nrows() != n && phi.ncols() != 0 {
            return Err(Error::invalid("output basis does not match the mesh"));
        }
        let r = phi.ncols();
        let mut rows_m = DMatrix::zeros(r, n);
        let mut rows_z = DMatrix::zeros(r, self.problem.shape_dim());
        for i in 0..r {
            let v = self.problem.mass.mul_vec(phi.column(i).as_slice());
            let (dm, dz) = self.vjp(&v)?;
            rows_m.row_mut(i).copy_from_slice(&dm);
            rows_z.row_mut(i).copy_from_slice(&dz);
        }
        Ok((rows_m, rows_z))
    }

    /// `J_mr = Phi^* D_m u Psi` and `J_zr = Phi^* D_z u`.
    pub fn reduced_jacobians(&self, phi: &DMatrix<f64>, psi: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        if psi.nrows() != self.problem.dim() && psi.ncols() != 0 {
            return Err(Error::invalid("input basis does not match the mesh"));
        }
        let (rows_m, rows_z) = self.jacobian_rows(phi)?;
        let j_mr = if phi.ncols() == 0 || psi.ncols() == 0 {
            DMatrix::zeros(phi.ncols(), psi.ncols())
        } else {
            rows_m * psi
        };
        Ok((j_mr, rows_z))
    }

    pub fn qoi(&self) -> Result<QoiEval> {
        self.problem.qoi(&self.u, &self.m, &self.z)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{dot, norm2};
    use crate::mesh::build_rect_mesh;
    use crate::shape::fourier_basis;

    fn problem(nx: usize, ny: usize, source: Source) -> PoissonProblem {
        let mesh = build_rect_mesh(nx, ny, 4.0, 1.0).unwrap();
        PoissonProblem::with_uniform_target(mesh, fourier_basis(5, 4.0).unwrap(), source, 1.0).unwrap()
    }

    fn wavy(n: usize, amp: f64, phase: f64) -> Vec<f64> {
        (0..n).map(|i| amp * ((i as f64) * 0.73 + phase).sin()).collect()
    }

    #[test]
    fn homogeneous_problem_is_linear_in_height() {
        let p = problem(8, 4, Source::Zero);
        for c in [0.0, 0.7] {
            let s = p.solve_state(&vec![c; p.dim()], &[0.0; 11]).unwrap();
            for (u, x) in s.u().iter().zip(p.mesh().vertices()) {
                assert!((u - x[1]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn residual_is_small() {
        let p = problem(16, 4, Source::SinCos { amplitude: 0.1 });
        let m = wavy(p.dim(), 0.5, 0.1);
        let z = wavy(11, 0.1, 0.4);
        let s = p.solve_state(&m, &z).unwrap();
        let scale = norm2(s.load()) + norm2(&s.stiffness().mul_vec(&p.dirichlet_values));
        assert!(norm2(&s.residual()) <= 1e-9 * scale);
    }

    #[test]
    fn adjoint_duality_and_symmetry() {
        let p = problem(8, 4, Source::SinCos { amplitude: 0.1 });
        let s = p.solve_state(&wavy(p.dim(), 0.3, 0.0), &wavy(11, 0.05, 1.0)).unwrap();
        assert!(s.solve_adjoint(&vec![0.0; p.dim()]).unwrap().iter().all(|v| *v == 0.0));
        let rhs = wavy(p.dim(), 1.0, 0.5);
        let pa = s.solve_adjoint(&rhs).unwrap();
        let pf = s.free_solve(&rhs).unwrap();
        assert!(pa.iter().zip(&pf).all(|(a, b)| (a - b).abs() <= 1e-12));
        let mut h = wavy(p.dim(), 1.0, 2.0);
        for (hi, &fixed) in h.iter_mut().zip(p.dirichlet_mask()) {
            if fixed {
                *hi = 0.0;
            }
        }
        let lhs = dot(&pa, &s.apply_state_jacobian(&h));
        let rhs_dot = dot(&rhs, &h);
        assert!((lhs - rhs_dot).abs() <= 1e-9 * rhs_dot.abs().max(1.0));
    }

    #[test]
    fn zero_directions() {
        let p = problem(4, 2, Source::SinCos { amplitude: 0.1 });
        let s = p.solve_state(&vec![0.0; p.dim()], &[0.0; 11]).unwrap();
        assert!(s.jvp(&vec![0.0; p.dim()], &[0.0; 11]).unwrap().iter().all(|v| *v == 0.0));
        let (dm, dz) = s.vjp(&vec![0.0; p.dim()]).unwrap();
        assert!(dm.iter().chain(&dz).all(|v| *v == 0.0));
        let (jm, jz) = s.reduced_jacobians(&DMatrix::zeros(p.dim(), 0), &DMatrix::zeros(p.dim(), 3)).unwrap();
        assert_eq!((jm.nrows(), jm.ncols(), jz.nrows(), jz.ncols()), (0, 3, 0, 11));
    }

    #[test]
    fn conductivity_scaling_at_reference_shape() {
        let p = problem(6, 3, Source::Zero);
        let c = 0.8;
        let (a0, _) = p.assemble_system(&vec![0.0; p.dim()], &[0.0; 11]).unwrap();
        let (ac, _) = p.assemble_system(&vec![c; p.dim()], &[0.0; 11]).unwrap();
        for (i, j, v) in a0.triplets() {
            assert!((ac.get(i, j) - c.exp() * v).abs() <= 1e-12 * v.abs().max(1.0));
        }
    }

    #[test]
    fn flux_of_linear_state_matches_unit_target() {
        let p = problem(8, 4, Source::Zero);
        let s = p.solve_state(&vec![0.0; p.dim()], &[0.0; 11]).unwrap();
        assert!(s.qoi().unwrap().value.abs() < 1e-8);
        let profile = p.bottom_flux_profile(s.u(), s.m(), s.z()).unwrap();
        assert!(profile.iter().all(|f| (f - 1.0).abs() < 1e-10));
    }

    #[test]
    fn perfect_tracking_has_zero_misfit() {
        let mut p = problem(8, 4, Source::SinCos { amplitude: 0.1 });
        let m = vec![0.4; p.dim()];
        let z = vec![0.0; 11];
        let u = p.solve_state(&m, &z).unwrap().into_u();
        // piecewise-constant flux per edge is not nodal, so track a uniform one
        let mut mm = vec![0.0; p.dim()];
        mm.iter_mut().for_each(|v| *v = 0.0);
        let lin: Vec<f64> = p.mesh().vertices().iter().map(|x| x[1]).collect();
        p.set_tau_target(vec![1.0; p.bottom_dofs().len()]).unwrap();
        assert!(p.qoi(&lin, &mm, &z).unwrap().value.abs() < 1e-20);
        assert!(p.qoi(&u, &m, &z).unwrap().value > 0.0);
    }
}
