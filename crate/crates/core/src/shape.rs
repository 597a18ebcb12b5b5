//! Displacement-basis parameterization of the reference-to-physical map
//! `chi_z(X) = X + sum_i z_i d_i(X)`.
//!
//! Both basis families are evaluated analytically together with their
//! gradients, so shape derivatives carry no interpolation error.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::mat2::{self, Mat2};
use crate::mesh::{Mesh, Point};

/// Designs with `min det F` at or below this value are rejected.
pub const ADMISSIBLE_DET_F: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DisplacementBasis {
    /// Vertical displacements `X_2 cos(k pi X_1)` and `X_2 sin(k pi X_1)`,
    /// ordered `[a_0, a_1, b_1, ..., a_n, b_n]`.
    Fourier { n_z: usize, lx: f64 },
    /// Tensor-product Bernstein free-form deformation over `[lower, upper]`,
    /// interior control points only, extended by zero outside the box.
    BernsteinFfd { k: usize, l: usize, lower: Point, upper: Point },
}

/// Value and gradient of a single displacement basis function.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BasisEval {
    pub disp: [f64; 2],
    /// `grad[r][c] = d disp_r / d X_c`.
    pub grad: Mat2,
}

const ZERO_EVAL: BasisEval = BasisEval { disp: [0.0; 2], grad: mat2::ZERO };

pub fn fourier_basis(n_z: i64, lx: f64) -> Result<DisplacementBasis> {
    if n_z < 0 {
        return Err(Error::invalid(format!("Fourier wavenumber count must be nonnegative, got {n_z}")));
    }
    if !(lx > 0.0) {
        return Err(Error::invalid(format!("domain length must be positive, got {lx}")));
    }
    Ok(DisplacementBasis::Fourier { n_z: n_z as usize, lx })
}

pub fn bernstein_ffd_basis(k: usize, l: usize, lower: Point, upper: Point) -> Result<DisplacementBasis> {
    if k < 2 || l < 2 {
        return Err(Error::invalid(format!("Bernstein lattice needs K, L >= 2, got K = {k}, L = {l}")));
    }
    if !(upper[0] > lower[0] && upper[1] > lower[1]) {
        return Err(Error::invalid("control box must have positive extent"));
    }
    Ok(DisplacementBasis::BernsteinFfd { k, l, lower, upper })
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Bernstein polynomial `C(n, j) t^j (1 - t)^(n - j)`.
pub fn bernstein(n: usize, j: usize, t: f64) -> f64 {
    if j > n {
        return 0.0;
    }
    binomial(n, j) * t.powi(j as i32) * (1.0 - t).powi((n - j) as i32)
}

/// Derivative `n (b_{j-1}^{n-1} - b_j^{n-1})`.
pub fn bernstein_derivative(n: usize, j: usize, t: f64) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let left = if j == 0 { 0.0 } else { bernstein(n - 1, j - 1, t) };
    n as f64 * (left - bernstein(n - 1, j, t))
}

impl DisplacementBasis {
    pub fn dim(&self) -> usize {
        match *self {
            DisplacementBasis::Fourier { n_z, .. } => 2 * n_z + 1,
            DisplacementBasis::BernsteinFfd { k, l, .. } => 2 * (k - 1) * (l - 1),
        }
    }

    pub fn eval(&self, i: usize, x: Point) -> BasisEval {
        assert!(i < self.dim(), "basis index {i} out of range");
        match *self {
            DisplacementBasis::Fourier { .. } => {
                let (k, is_sin) = if i == 0 { (0, false) } else { ((i + 1) / 2, i % 2 == 0) };
                let w = k as f64 * PI;
                let (s, c) = (w * x[0]).sin_cos();
                if is_sin {
                    BasisEval { disp: [0.0, x[1] * s], grad: [[0.0, 0.0], [x[1] * w * c, s]] }
                } else {
                    BasisEval { disp: [0.0, x[1] * c], grad: [[0.0, 0.0], [-x[1] * w * s, c]] }
                }
            }
            DisplacementBasis::BernsteinFfd { k, l, lower, upper } => {
                let (wx, wy) = (upper[0] - lower[0], upper[1] - lower[1]);
                let t1 = (x[0] - lower[0]) / wx;
                let t2 = (x[1] - lower[1]) / wy;
                if !(0.0..=1.0).contains(&t1) || !(0.0..=1.0).contains(&t2) {
                    return ZERO_EVAL;
                }
                let dir = i % 2;
                let node = i / 2;
                let (kk, ll) = (node / (l - 1) + 1, node % (l - 1) + 1);
                let (bx, by) = (bernstein(k, kk, t1), bernstein(l, ll, t2));
                let b = bx * by;
                let db = [bernstein_derivative(k, kk, t1) * by / wx, bx * bernstein_derivative(l, ll, t2) / wy];
                let mut disp = [0.0; 2];
                let mut grad = mat2::ZERO;
                disp[dir] = b;
                grad[dir] = db;
                BasisEval { disp, grad }
            }
        }
    }

    pub fn eval_all(&self, x: Point) -> Vec<BasisEval> {
        (0..self.dim()).map(|i| self.eval(i, x)).collect()
    }

    fn check_len(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.dim() {
            return Err(Error::invalid(format!(
                "shape vector has length {} but the basis has dimension {}",
                z.len(),
                self.dim()
            )));
        }
        Ok(())
    }
}

/// Shape coefficients together with their admissible box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeParams {
    pub z: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl ShapeParams {
    pub fn new(z: Vec<f64>, lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if z.len() != lower.len() || z.len() != upper.len() {
            return Err(Error::invalid("shape vector and box bounds differ in length"));
        }
        if lower.iter().zip(&upper).any(|(l, u)| !(l.is_finite() && u.is_finite() && l < u)) {
            return Err(Error::invalid("box bounds must be finite with lower < upper"));
        }
        Ok(ShapeParams { z, lower, upper })
    }

    /// Box `[lo, hi]^d` centered design `z = 0`.
    pub fn symmetric_box(dim: usize, half_width: f64) -> Result<Self> {
        Self::new(vec![0.0; dim], vec![-half_width; dim], vec![half_width; dim])
    }

    pub fn dim(&self) -> usize {
        self.z.len()
    }

    pub fn contains(&self, z: &[f64]) -> bool {
        z.len() == self.dim() && z.iter().zip(&self.lower).zip(&self.upper).all(|((v, l), u)| l <= v && v <= u)
    }

    pub fn project(&self, z: &mut [f64]) {
        for ((v, l), u) in z.iter_mut().zip(&self.lower).zip(&self.upper) {
            *v = v.clamp(*l, *u);
        }
    }
}

/// Mapped point, deformation gradient and its determinant and inverse.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeformationEval {
    pub chi: Point,
    pub f: Mat2,
    pub det_f: f64,
    pub f_inv: Mat2,
}

/// Evaluates `chi_z`, `F` and derived quantities at `x`, from precomputed basis values.
pub fn deform_from_evals(evals: &[BasisEval], z: &[f64], x: Point) -> Result<DeformationEval> {
    let mut chi = x;
    let mut f = mat2::IDENTITY;
    for (e, &zi) in evals.iter().zip(z) {
        chi[0] += zi * e.disp[0];
        chi[1] += zi * e.disp[1];
        f = mat2::add(&f, &mat2::scale(&e.grad, zi));
    }
    let det_f = mat2::det(&f);
    if !(det_f > 0.0) {
        return Err(Error::DegenerateDeformation { point: x, det_f });
    }
    Ok(DeformationEval { chi, f, det_f, f_inv: mat2::inverse(&f) })
}

pub fn deform(basis: &DisplacementBasis, z: &[f64], x: Point) -> Result<DeformationEval> {
    basis.check_len(z)?;
    deform_from_evals(&basis.eval_all(x), z, x)
}

fn det_f_unchecked(basis: &DisplacementBasis, z: &[f64], x: Point) -> f64 {
    let mut f = mat2::IDENTITY;
    for (i, &zi) in z.iter().enumerate() {
        if zi != 0.0 {
            f = mat2::add(&f, &mat2::scale(&basis.eval(i, x).grad, zi));
        }
    }
    mat2::det(&f)
}

/// Minimum of `det F` over every quadrature point of the mesh.
pub fn check_diffeomorphism(mesh: &Mesh, basis: &DisplacementBasis, z: &[f64]) -> Result<f64> {
    basis.check_len(z)?;
    Ok(mesh.quadrature().map(|(x, _)| det_f_unchecked(basis, z, x)).fold(f64::INFINITY, f64::min))
}

pub fn is_admissible(mesh: &Mesh, basis: &DisplacementBasis, z: &[f64]) -> Result<bool> {
    Ok(check_diffeomorphism(mesh, basis, z)? > ADMISSIBLE_DET_F)
}

/// A scalar field prescribed in physical coordinates, with its gradient.
pub trait SpatialField: Send + Sync {
    fn value(&self, x: Point) -> f64;
    fn gradient(&self, x: Point) -> [f64; 2];
}

/// Source terms used by the Poisson problem.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Source {
    Zero,
    /// `amplitude * sin(x_1) * cos(x_2)`.
    SinCos { amplitude: f64 },
    /// Linear field `c + g . x`.
    Affine { c: f64, g: [f64; 2] },
}

impl SpatialField for Source {
    fn value(&self, x: Point) -> f64 {
        match *self {
            Source::Zero => 0.0,
            Source::SinCos { amplitude } => amplitude * x[0].sin() * x[1].cos(),
            Source::Affine { c, g } => c + g[0] * x[0] + g[1] * x[1],
        }
    }

    fn gradient(&self, x: Point) -> [f64; 2] {
        match *self {
            Source::Zero => [0.0; 2],
            Source::SinCos { amplitude } => {
                [amplitude * x[0].cos() * x[1].cos(), -amplitude * x[0].sin() * x[1].sin()]
            }
            Source::Affine { g, .. } => g,
        }
    }
}

/// `f(chi_z(X))` and its gradient with respect to `z`.
pub fn pullback_scalar(
    f: &dyn SpatialField,
    basis: &DisplacementBasis,
    z: &[f64],
    x: Point,
) -> Result<(f64, Vec<f64>)> {
    basis.check_len(z)?;
    let evals = basis.eval_all(x);
    let mut chi = x;
    for (e, &zi) in evals.iter().zip(z) {
        chi[0] += zi * e.disp[0];
        chi[1] += zi * e.disp[1];
    }
    let g = f.gradient(chi);
    let dz = evals.iter().map(|e| g[0] * e.disp[0] + g[1] * e.disp[1]).collect();
    Ok((f.value(chi), dz))
}

/// `max(|chi|, ||F||_2)` over all quadrature points, a discrete `W^{1,inf}` norm of `chi_z`.
pub fn w1inf_norm(mesh: &Mesh, basis: &DisplacementBasis, z: &[f64]) -> Result<f64> {
    basis.check_len(z)?;
    let mut norm = 0.0f64;
    for (x, _) in mesh.quadrature() {
        let d = deform(basis, z, x)?;
        norm = norm.max(d.chi[0].hypot(d.chi[1])).max(mat2::spectral_norm(&d.f));
    }
    Ok(norm)
}

/// Squared `L2` norm of a nodal P1 field on the reference domain.
pub fn reference_l2_sq(mesh: &Mesh, u: &[f64]) -> f64 {
    quad_sum(mesh, u, |_| 1.0)
}

/// Squared `L2(Omega_z)` norm of the pushforward `u o chi_z^{-1}`, by change of variables.
pub fn pushforward_l2_sq(mesh: &Mesh, basis: &DisplacementBasis, z: &[f64], u: &[f64]) -> Result<f64> {
    basis.check_len(z)?;
    let mut err = None;
    let v = quad_sum(mesh, u, |x| match deform(basis, z, x) {
        Ok(d) => d.det_f,
        Err(e) => {
            err.get_or_insert(e);
            f64::NAN
        }
    });
    match err {
        Some(e) => Err(e),
        None => Ok(v),
    }
}

fn quad_sum(mesh: &Mesh, u: &[f64], mut weight: impl FnMut(Point) -> f64) -> f64 {
    let mut total = 0.0;
    for el in mesh.elements() {
        for (q, bary) in crate::mesh::MID_EDGE_BARY.iter().enumerate() {
            let uq: f64 = (0..3).map(|a| bary[a] * u[el.vertices[a]]).sum();
            total += el.quad_weight() * uq * uq * weight(el.quad_points[q]);
        }
    }
    total
}
