//! Risk-averse design objectives over a PDE or surrogate backend, and a
//! projected L-BFGS method for box constraints.

use std::collections::VecDeque;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::PoissonProblem;
use crate::linalg::dot;
use crate::rbno::Rbno;
use crate::risk::{quantile, risk_saa, Penalty, RiskMeasure};
use crate::shape::{check_diffeomorphism, ADMISSIBLE_DET_F};

/// A differentiable function on a box. `Ok(None)` marks an inadmissible
/// point, treated as `+inf`.
pub trait Objective: Sync {
    fn dim(&self) -> usize;
    fn eval(&self, x: &[f64]) -> Result<Option<(f64, Vec<f64>)>>;
}

/// Adapter for closures returning value and gradient.
pub struct FnObjective<F> {
    dim: usize,
    f: F,
}

impl<F: Fn(&[f64]) -> (f64, Vec<f64>) + Sync> FnObjective<F> {
    pub fn new(dim: usize, f: F) -> Self {
        FnObjective { dim, f }
    }
}

impl<F: Fn(&[f64]) -> (f64, Vec<f64>) + Sync> Objective for FnObjective<F> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, x: &[f64]) -> Result<Option<(f64, Vec<f64>)>> {
        Ok(Some((self.f)(x)))
    }
}

pub enum Backend<'a> {
    Pde(&'a PoissonProblem),
    /// Surrogate states fed to the problem's QoI; no PDE solves.
    Surrogate { rbno: &'a Rbno, problem: &'a PoissonProblem },
}

impl Backend<'_> {
    pub fn problem(&self) -> &PoissonProblem {
        match self {
            Backend::Pde(p) => p,
            Backend::Surrogate { problem, .. } => problem,
        }
    }
}

/// `rho(Q(z; m_i)) + P(z)` over a frozen sample set. For CVaR the variable is
/// `(z, t)`.
pub struct RiskObjective<'a> {
    backend: Backend<'a>,
    risk: RiskMeasure,
    penalty: Penalty,
    samples: Vec<Vec<f64>>,
    encoded: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct ObjectiveEval {
    pub value: f64,
    pub grad_z: Vec<f64>,
    pub dt: f64,
    pub qoi: Vec<f64>,
}

impl<'a> RiskObjective<'a> {
    pub fn new(backend: Backend<'a>, risk: RiskMeasure, penalty: Penalty, samples: Vec<Vec<f64>>) -> Result<Self> {
        risk.validate()?;
        if samples.is_empty() {
            return Err(Error::invalid("sample set is empty"));
        }
        if !(penalty.alpha >= 0.0) {
            return Err(Error::invalid("penalty weight must be nonnegative"));
        }
        let n = backend.problem().dim();
        if samples.iter().any(|m| m.len() != n) {
            return Err(Error::invalid("parameter sample does not match the mesh"));
        }
        let encoded = match &backend {
            Backend::Pde(_) => Vec::new(),
            Backend::Surrogate { rbno, .. } => samples.iter().map(|m| rbno.as_basis.encode(m)).collect(),
        };
        Ok(RiskObjective { backend, risk, penalty, samples, encoded })
    }

    pub fn risk(&self) -> &RiskMeasure {
        &self.risk
    }

    pub fn shape_dim(&self) -> usize {
        self.backend.problem().shape_dim()
    }

    pub fn problem(&self) -> &PoissonProblem {
        self.backend.problem()
    }

    /// Per-sample QoI values and total `z`-gradients.
    pub fn sample_qois(&self, z: &[f64]) -> Result<Vec<(f64, Vec<f64>)>> {
        let problem = self.backend.problem();
        if z.len() != problem.shape_dim() {
            return Err(Error::invalid("design vector does not match the shape basis"));
        }
        let idx: Vec<usize> = (0..self.samples.len()).collect();
        idx.par_iter()
            .map(|&i| match &self.backend {
                Backend::Pde(p) => p.qoi_total_gradient(&self.samples[i], z),
                Backend::Surrogate { rbno, problem } => {
                    let (y, dz) = rbno.latent_encoded(&self.encoded[i], z, true)?;
                    let u = rbno.pod.decode(&y);
                    let q = problem.qoi(&u, &self.samples[i], z)?;
                    // D_z u = Phi D_2 g, so du^T D_z u = (Phi^T du)^T D_2 g
                    let pd = rbno.pod.phi.tr_mul(&nalgebra::DVector::from_column_slice(&q.du));
                    let dz = dz.expect("Jacobian requested");
                    let chain = dz.tr_mul(&pd);
                    Ok((q.value, chain.iter().zip(&q.dz).map(|(a, b)| a + b).collect()))
                }
            })
            .collect()
    }

    /// Full evaluation at `z` (and `t` for CVaR).
    pub fn evaluate(&self, z: &[f64], t: Option<f64>) -> Result<ObjectiveEval> {
        let per = self.sample_qois(z)?;
        let qoi: Vec<f64> = per.iter().map(|p| p.0).collect();
        let r = risk_saa(&qoi, &self.risk, t)?;
        let (pv, pg) = self.penalty.eval(z);
        let mut grad_z = pg;
        for ((_, g), w) in per.iter().zip(&r.dq) {
            for (a, b) in grad_z.iter_mut().zip(g) {
                *a += w * b;
            }
        }
        Ok(ObjectiveEval { value: r.value + pv, grad_z, dt: r.dt, qoi })
    }

    /// Resolves the CVaR smoothing width and returns the initial `t` (the
    /// empirical quantile) for a run starting at `z0`.
    pub fn prepare(&mut self, z0: &[f64]) -> Result<Option<f64>> {
        if let RiskMeasure::Cvar { beta, .. } = self.risk {
            let qoi: Vec<f64> = self.sample_qois(z0)?.into_iter().map(|p| p.0).collect();
            self.risk = self.risk.resolved(&qoi);
            return Ok(Some(quantile(&qoi, beta)));
        }
        Ok(None)
    }
}

impl Objective for RiskObjective<'_> {
    fn dim(&self) -> usize {
        self.shape_dim() + usize::from(self.risk.is_cvar())
    }

    fn eval(&self, x: &[f64]) -> Result<Option<(f64, Vec<f64>)>> {
        let d = self.shape_dim();
        let z = &x[..d];
        let problem = self.backend.problem();
        if check_diffeomorphism(problem.mesh(), problem.basis(), z)? <= ADMISSIBLE_DET_F {
            return Ok(None);
        }
        let t = x.get(d).copied();
        match self.evaluate(z, t) {
            Ok(e) => {
                let mut g = e.grad_z;
                if t.is_some() {
                    g.push(e.dt);
                }
                Ok(Some((e.value, g)))
            }
            Err(Error::DegenerateDeformation { .. }) => Ok(None),
            Err(e) => Err(e),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LbfgsOptions {
    pub memory: usize,
    pub max_iterations: usize,
    pub pgtol: f64,
    /// Stop when the relative decrease of one step falls below this (0 disables).
    pub ftol: f64,
    pub armijo: f64,
    pub max_backtracks: usize,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        LbfgsOptions { memory: 10, max_iterations: 500, pgtol: 1e-8, ftol: 0.0, armijo: 1e-4, max_backtracks: 40 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptStatus {
    Converged,
    SmallDecrease,
    MaxIterations,
    LineSearchFailed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub iteration: usize,
    pub value: f64,
    pub proj_grad_norm: f64,
    pub step: f64,
    pub active_bounds: usize,
    pub wall_time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub proj_grad_norm: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub status: OptStatus,
    pub trace: Vec<IterRecord>,
}

fn project(x: &mut [f64], lower: &[f64], upper: &[f64]) {
    for ((v, l), u) in x.iter_mut().zip(lower).zip(upper) {
        *v = v.clamp(*l, *u);
    }
}

fn projected_gradient(x: &[f64], g: &[f64], lower: &[f64], upper: &[f64]) -> Vec<f64> {
    (0..x.len()).map(|i| (x[i] - g[i]).clamp(lower[i], upper[i]) - x[i]).collect()
}

fn active_set(x: &[f64], g: &[f64], lower: &[f64], upper: &[f64]) -> Vec<bool> {
    (0..x.len()).map(|i| (x[i] <= lower[i] && g[i] > 0.0) || (x[i] >= upper[i] && g[i] < 0.0)).collect()
}

/// Two-loop recursion restricted to the free variables.
fn lbfgs_direction(g: &[f64], pairs: &VecDeque<(Vec<f64>, Vec<f64>)>, active: &[bool]) -> Vec<f64> {
    let mask = |v: &[f64]| -> Vec<f64> { v.iter().zip(active).map(|(x, &a)| if a { 0.0 } else { *x }).collect() };
    let mut q = mask(g);
    let masked: Vec<(Vec<f64>, Vec<f64>)> = pairs.iter().map(|(s, y)| (mask(s), mask(y))).collect();
    let mut alphas = Vec::with_capacity(masked.len());
    for (s, y) in masked.iter().rev() {
        let sy = dot(s, y);
        if sy <= 0.0 {
            alphas.push(0.0);
            continue;
        }
        let a = dot(s, &q) / sy;
        q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
        alphas.push(a);
    }
    if let Some((s, y)) = masked.last() {
        let (sy, yy) = (dot(s, y), dot(y, y));
        if sy > 0.0 && yy > 0.0 {
            q.iter_mut().for_each(|v| *v *= sy / yy);
        }
    }
    for ((s, y), a) in masked.iter().zip(alphas.iter().rev()) {
        let sy = dot(s, y);
        if sy <= 0.0 {
            continue;
        }
        let b = dot(y, &q) / sy;
        q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (a - b) * si);
    }
    q.iter_mut().for_each(|v| *v = -*v);
    q
}

/// Projected L-BFGS with Armijo backtracking along the projection arc.
pub fn minimize_box(obj: &dyn Objective, x0: &[f64], lower: &[f64], upper: &[f64], opts: &LbfgsOptions) -> Result<OptResult> {
    let n = obj.dim();
    if x0.len() != n || lower.len() != n || upper.len() != n {
        return Err(Error::invalid("starting point or bounds have the wrong dimension"));
    }
    if lower.iter().zip(upper).any(|(l, u)| l > u) {
        return Err(Error::invalid("lower bound exceeds upper bound"));
    }
    let start = Instant::now();
    let mut x = x0.to_vec();
    project(&mut x, lower, upper);
    let (mut f, mut g) = obj
        .eval(&x)?
        .ok_or_else(|| Error::InadmissibleDesign("starting design is not admissible".into()))?;
    let mut evaluations = 1;
    let mut pairs: VecDeque<(Vec<f64>, Vec<f64>)> = VecDeque::with_capacity(opts.memory);
    let mut trace = Vec::new();
    let mut status = OptStatus::MaxIterations;
    let mut iterations = 0;
    let mut last_step = 0.0;

    loop {
        let pg = projected_gradient(&x, &g, lower, upper);
        let pg_norm = pg.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let active = active_set(&x, &g, lower, upper);
        trace.push(IterRecord {
            iteration: iterations,
            value: f,
            proj_grad_norm: pg_norm,
            step: last_step,
            active_bounds: active.iter().filter(|&&a| a).count(),
            wall_time: start.elapsed().as_secs_f64(),
        });
        if pg_norm <= opts.pgtol {
            status = OptStatus::Converged;
            break;
        }
        if iterations >= opts.max_iterations {
            break;
        }

        let mut d = lbfgs_direction(&g, &pairs, &active);
        if dot(&d, &g) >= 0.0 {
            pairs.clear();
            d = g.iter().zip(&active).map(|(gi, &a)| if a { 0.0 } else { -gi }).collect();
        }
        let mut alpha = if pairs.is_empty() {
            let dn = d.iter().map(|v| v * v).sum::<f64>().sqrt();
            (1.0 / dn).min(1.0)
        } else {
            1.0
        };

        let mut accepted = None;
        for _ in 0..=opts.max_backtracks {
            let mut trial: Vec<f64> = x.iter().zip(&d).map(|(xi, di)| xi + alpha * di).collect();
            project(&mut trial, lower, upper);
            let step: Vec<f64> = trial.iter().zip(&x).map(|(a, b)| a - b).collect();
            let decrease = dot(&g, &step);
            if decrease >= 0.0 && step.iter().all(|v| *v == 0.0) {
                break;
            }
            evaluations += 1;
            if let Some((ft, gt)) = obj.eval(&trial)? {
                if ft.is_finite() && ft <= f + opts.armijo * decrease {
                    accepted = Some((trial, ft, gt, step));
                    break;
                }
            }
            alpha *= 0.5;
        }

        match accepted {
            Some((xn, fn_, gn, s)) => {
                let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
                let sy = dot(&s, &y);
                if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() {
                    if pairs.len() == opts.memory {
                        pairs.pop_front();
                    }
                    pairs.push_back((s.clone(), y));
                }
                last_step = s.iter().map(|v| v * v).sum::<f64>().sqrt();
                let rel_decrease = (f - fn_) / f.abs().max(fn_.abs()).max(1.0);
                x = xn;
                f = fn_;
                g = gn;
                iterations += 1;
                if opts.ftol > 0.0 && rel_decrease <= opts.ftol {
                    let pg = projected_gradient(&x, &g, lower, upper);
                    let pg_norm = pg.iter().fold(0.0f64, |a, v| a.max(v.abs()));
                    trace.push(IterRecord {
                        iteration: iterations,
                        value: f,
                        proj_grad_norm: pg_norm,
                        step: last_step,
                        active_bounds: active_set(&x, &g, lower, upper).iter().filter(|&&a| a).count(),
                        wall_time: start.elapsed().as_secs_f64(),
                    });
                    status = if pg_norm <= opts.pgtol { OptStatus::Converged } else { OptStatus::SmallDecrease };
                    break;
                }
            }
            None if !pairs.is_empty() => pairs.clear(),
            None => {
                status = OptStatus::LineSearchFailed;
                break;
            }
        }
    }
    let last = trace.last().expect("trace has the initial record");
    Ok(OptResult { proj_grad_norm: last.proj_grad_norm, x, value: f, iterations, evaluations, status, trace })
}

/// Optimizes a risk objective from `z0` inside `[lower, upper]`; for CVaR the
/// auxiliary `t` starts at the empirical quantile and is unbounded.
pub fn optimize(obj: &mut RiskObjective<'_>, z0: &[f64], lower: &[f64], upper: &[f64], opts: &LbfgsOptions) -> Result<OptResult> {
    let mut z = z0.to_vec();
    project(&mut z, lower, upper);
    let problem = obj.problem();
    if check_diffeomorphism(problem.mesh(), problem.basis(), &z)? <= ADMISSIBLE_DET_F {
        return Err(Error::InadmissibleDesign("starting design violates the admissibility threshold".into()));
    }
    let t0 = obj.prepare(&z)?;
    let (mut x0, mut lo, mut hi) = (z, lower.to_vec(), upper.to_vec());
    if let Some(t) = t0 {
        x0.push(t);
        lo.push(f64::NEG_INFINITY);
        hi.push(f64::INFINITY);
    }
    minimize_box(obj, &x0, &lo, &hi, opts)
}
