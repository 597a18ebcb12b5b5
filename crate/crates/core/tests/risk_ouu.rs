use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;
use sdk_core::optimize::{minimize_box, FnObjective, Objective};
use sdk_core::prior::stream_rng;
use sdk_core::risk::{empirical_cvar, risk_saa, smoothed_plus, RiskMeasure};
use sdk_core::shape::{fourier_basis, Source};
use sdk_core::{build_prior, build_rect_mesh, Backend, LbfgsOptions, Penalty, PoissonProblem, PriorCoefficients, RiskObjective};

fn random_samples(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    let scale = rng.random_range(0.1..3.0);
    (0..n).map(|_| scale * rng.random_range(-1.0..1.0) + rng.random_range(-0.5..0.5)).collect()
}

#[test]
fn entropic_dominates_mean() {
    for s in 0..100 {
        let mut rng = stream_rng(s, 0);
        let n = rng.random_range(1..50);
        let q = random_samples(&mut rng, n);
        let beta = rng.random_range(0.01..5.0);
        let mean = risk_saa(&q, &RiskMeasure::Mean, None).unwrap().value;
        let ent = risk_saa(&q, &RiskMeasure::Entropic { beta }, None).unwrap().value;
        assert!(ent >= mean - 1e-14 * mean.abs().max(1.0), "set {s}: {ent} < {mean}");
    }
}

#[test]
fn entropic_is_stable_for_large_values() {
    let q = vec![800.0, 801.0, 799.5];
    let r = risk_saa(&q, &RiskMeasure::Entropic { beta: 2.0 }, None).unwrap();
    assert!(r.value.is_finite() && r.value > 800.0 && r.value < 801.0);
}

fn smoothed_cvar(q: &[f64], beta: f64, eps: f64) -> f64 {
    // minimize over t by golden section; the objective is convex in t
    let risk = RiskMeasure::Cvar { beta, epsilon: Some(eps) };
    let f = |t: f64| risk_saa(q, &risk, Some(t)).unwrap().value;
    let (mut a, mut b) = (q.iter().cloned().fold(f64::INFINITY, f64::min) - 1.0, q.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + 1.0);
    let g = 0.5 * (5f64.sqrt() - 1.0);
    for _ in 0..200 {
        let (c, d) = (b - g * (b - a), a + g * (b - a));
        if f(c) < f(d) {
            b = d;
        } else {
            a = c;
        }
    }
    f(0.5 * (a + b))
}

#[test]
fn cvar_is_monotone_in_beta() {
    for s in 0..30 {
        let mut rng = stream_rng(s, 1);
        let q = random_samples(&mut rng, 40);
        let eps = 1e-3;
        let mut last = f64::NEG_INFINITY;
        for beta in [0.1, 0.3, 0.5, 0.7, 0.9, 0.95, 0.99] {
            let v = smoothed_cvar(&q, beta, eps);
            assert!(v >= last - eps / 2.0, "set {s} beta {beta}: {v} < {last}");
            last = v;
        }
        let mean = q.iter().sum::<f64>() / q.len() as f64;
        assert!(empirical_cvar(&q, 0.9) >= mean - 1e-12);
    }
}

#[test]
fn smoothed_plus_is_c1_with_uniform_gap() {
    for eps in [1e-4, 1e-2, 0.5, 3.0] {
        for x0 in [0.0, eps] {
            let (lv, ld) = smoothed_plus(x0 - 1e-13 * eps, eps).unwrap();
            let (rv, rd) = smoothed_plus(x0 + 1e-13 * eps, eps).unwrap();
            assert!((lv - rv).abs() <= 1e-10 * eps.max(1.0));
            assert!((ld - rd).abs() <= 1e-10);
        }
        let mut worst = 0.0f64;
        for k in 0..=20_000 {
            let x = -eps + 3.0 * eps * k as f64 / 20_000.0;
            let gap = x.max(0.0) - smoothed_plus(x, eps).unwrap().0;
            assert!(gap >= -1e-15 * eps);
            worst = worst.max(gap);
        }
        assert!((worst - 0.5 * eps).abs() <= 1e-12 * eps, "eps {eps}: gap {worst}");
    }
}

fn fd_check_risk(q: &[f64], risk: &RiskMeasure, t: Option<f64>) {
    let r = risk_saa(q, risk, t).unwrap();
    let h = 1e-6;
    let scale = r.dq.iter().fold(r.dt.abs(), |a, b| a.max(b.abs())).max(1e-3);
    for i in 0..q.len() {
        let mut p = q.to_vec();
        p[i] += h;
        let up = risk_saa(&p, risk, t).unwrap().value;
        p[i] -= 2.0 * h;
        let dn = risk_saa(&p, risk, t).unwrap().value;
        let fd = (up - dn) / (2.0 * h);
        assert!((fd - r.dq[i]).abs() <= 1e-8 * scale + 1e-9, "{risk:?} dq[{i}] {} vs {fd}", r.dq[i]);
    }
    if let Some(t) = t {
        let up = risk_saa(q, risk, Some(t + h)).unwrap().value;
        let dn = risk_saa(q, risk, Some(t - h)).unwrap().value;
        let fd = (up - dn) / (2.0 * h);
        assert!((fd - r.dt).abs() <= 1e-8 * scale + 1e-9, "dt {} vs {fd}", r.dt);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn risk_derivatives_match_differences(seed in 0u64..10_000, n in 1usize..30, beta in 0.05f64..0.99) {
        let mut rng = stream_rng(seed, 2);
        let q = random_samples(&mut rng, n);
        fd_check_risk(&q, &RiskMeasure::Mean, None);
        fd_check_risk(&q, &RiskMeasure::Entropic { beta: 1.0 + beta }, None);
        // keep samples away from the smoothing kinks so differences stay exact
        let t = 0.37;
        let q: Vec<f64> = q.iter().map(|v| if (v - t).abs() < 1e-4 || (v - t - 0.05).abs() < 1e-4 { v + 3e-4 } else { *v }).collect();
        fd_check_risk(&q, &RiskMeasure::Cvar { beta, epsilon: Some(0.05) }, Some(t));
    }

    #[test]
    fn penalty_gradient_is_linear(z in proptest::collection::vec(-1.0f64..1.0, 1..12), alpha in 0.0f64..1.0) {
        let p = Penalty { alpha, area: 4.0 };
        let (v, g) = p.eval(&z);
        let norm: f64 = z.iter().map(|x| x * x).sum();
        prop_assert!((v - alpha * 4.0 * norm).abs() < 1e-12);
        for (gi, zi) in g.iter().zip(&z) {
            prop_assert!((gi - 8.0 * alpha * zi).abs() < 1e-12);
        }
    }
}

fn small_problem() -> (PoissonProblem, sdk_core::BiLaplacianPrior) {
    let mesh = build_rect_mesh(12, 4, 4.0, 1.0).unwrap();
    let c = PriorCoefficients::poisson_default();
    let prior = build_prior(&mesh, c.gamma, c.delta, c.theta).unwrap();
    let problem = PoissonProblem::with_uniform_target(mesh, fourier_basis(2, 4.0).unwrap(), Source::SinCos { amplitude: 0.1 }, 1.0).unwrap();
    (problem, prior)
}

fn fd_objective(obj: &dyn Objective, x: &[f64], tol: f64) {
    let (_, g) = obj.eval(x).unwrap().unwrap();
    let scale = g.iter().fold(0.0f64, |a, b| a.max(b.abs()));
    let h = 1e-6;
    for k in 0..x.len() {
        let mut p = x.to_vec();
        p[k] += h;
        let up = obj.eval(&p).unwrap().unwrap().0;
        p[k] -= 2.0 * h;
        let dn = obj.eval(&p).unwrap().unwrap().0;
        let fd = (up - dn) / (2.0 * h);
        assert!((fd - g[k]).abs() <= tol * scale, "component {k}: {} vs {fd}", g[k]);
    }
}

#[test]
fn objective_gradients_match_differences_for_both_backends() {
    let (problem, prior) = small_problem();
    let samples: Vec<Vec<f64>> = (0..4).map(|i| prior.sample(&mut stream_rng(5, i))).collect();
    let penalty = Penalty { alpha: 0.001, area: 4.0 };
    let z = vec![0.05, -0.03, 0.02, 0.04, -0.01];
    let mut rng = stream_rng(6, 0);
    let n = problem.dim();
    let phi = DMatrix::from_fn(n, 6, |_, _| rng.random_range(-0.1..0.1));
    let psi = DMatrix::from_fn(n, 4, |_, _| rng.random_range(-0.1..0.1));
    let pod = sdk_core::PodBasis::from_parts(vec![0.5; n], phi, vec![0.0; 6], problem.mass()).unwrap();
    let as_basis = sdk_core::AsBasis::from_parts(vec![0.0; n], psi, vec![0.0; 4], &prior).unwrap();
    let net = sdk_core::LatentNet::random(&[9, 12, 6], &mut rng).unwrap();
    let rbno = sdk_core::Rbno::new(pod, as_basis, net).unwrap();
    for risk in [RiskMeasure::Mean, RiskMeasure::Entropic { beta: 2.0 }, RiskMeasure::Cvar { beta: 0.5, epsilon: Some(0.02) }] {
        for surrogate in [false, true] {
            let backend = if surrogate { Backend::Surrogate { rbno: &rbno, problem: &problem } } else { Backend::Pde(&problem) };
            let mut obj = RiskObjective::new(backend, risk, penalty, samples.clone()).unwrap();
            let mut x = z.clone();
            if let Some(t) = obj.prepare(&z).unwrap() {
                x.push(t + 0.003);
            }
            fd_objective(&obj, &x, 1e-6);
        }
    }
}

#[test]
fn surrogate_backend_performs_no_solves() {
    let (problem, prior) = small_problem();
    let samples: Vec<Vec<f64>> = (0..8).map(|i| prior.sample(&mut stream_rng(9, i))).collect();
    let mut rng = stream_rng(9, 99);
    let n = problem.dim();
    let pod = sdk_core::PodBasis::from_parts(vec![0.0; n], DMatrix::from_fn(n, 3, |_, _| rng.random_range(-0.1..0.1)), vec![0.0; 3], problem.mass()).unwrap();
    let as_basis = sdk_core::AsBasis::from_parts(vec![0.0; n], DMatrix::from_fn(n, 2, |_, _| rng.random_range(-0.1..0.1)), vec![0.0; 2], &prior).unwrap();
    let rbno = sdk_core::Rbno::new(pod, as_basis, sdk_core::LatentNet::random(&[7, 3], &mut rng).unwrap()).unwrap();
    problem.counters().reset();
    let obj = RiskObjective::new(Backend::Surrogate { rbno: &rbno, problem: &problem }, RiskMeasure::Mean, Penalty { alpha: 0.0, area: 4.0 }, samples.clone()).unwrap();
    obj.evaluate(&[0.0; 5], None).unwrap();
    assert_eq!(problem.counters().snapshot().state_solves, 0);
    let pde = RiskObjective::new(Backend::Pde(&problem), RiskMeasure::Mean, Penalty { alpha: 0.0, area: 4.0 }, samples).unwrap();
    for _ in 0..3 {
        pde.evaluate(&[0.01; 5], None).unwrap();
    }
    assert_eq!(problem.counters().snapshot().state_solves, 24);
}

/// Strongly convex quadratic `1/2 (z - z*)^T A (z - z*)` and its tilted surrogate.
struct Quadratic {
    a: DMatrix<f64>,
    zstar: DVector<f64>,
    tilt: DVector<f64>,
}

impl Quadratic {
    fn grad(&self, z: &[f64], tilted: bool) -> Vec<f64> {
        let g = &self.a * (DVector::from_column_slice(z) - &self.zstar);
        let g = if tilted { g + &self.tilt } else { g };
        g.as_slice().to_vec()
    }

    fn solve(&self, tilted: bool, lo: &[f64], hi: &[f64]) -> Vec<f64> {
        let obj = FnObjective::new(self.zstar.len(), |z: &[f64]| {
            let d = DVector::from_column_slice(z) - &self.zstar;
            let mut v = 0.5 * d.dot(&(&self.a * &d));
            if tilted {
                v += self.tilt.dot(&DVector::from_column_slice(z));
            }
            (v, self.grad(z, tilted))
        });
        let opts = LbfgsOptions { pgtol: 1e-13, max_iterations: 2000, ..LbfgsOptions::default() };
        minimize_box(&obj, &vec![0.0; self.zstar.len()], lo, hi, &opts).unwrap().x
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

#[test]
fn surrogate_optimum_error_bound() {
    // isotropic interior case: equality
    let d = 4;
    let lambda = 2.5;
    let q = Quadratic {
        a: DMatrix::identity(d, d) * lambda,
        zstar: DVector::from_vec(vec![0.1, -0.2, 0.3, 0.0]),
        tilt: DVector::from_vec(vec![0.05, 0.1, -0.02, 0.07]),
    };
    let (lo, hi) = (vec![-10.0; d], vec![10.0; d]);
    let zs = q.solve(false, &lo, &hi);
    let zd = q.solve(true, &lo, &hi);
    let gap: Vec<f64> = q.grad(&zd, false).iter().zip(q.grad(&zd, true)).map(|(a, b)| a - b).collect();
    let bound = gap.iter().map(|v| v * v).sum::<f64>().sqrt() / lambda;
    assert!((dist(&zd, &zs) - bound).abs() <= 1e-8 * bound);

    // anisotropic boxed cases: inequality
    for s in 0..20 {
        let mut rng = stream_rng(s, 3);
        let d = rng.random_range(2..6);
        let b = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
        let a = &b * b.transpose() + DMatrix::identity(d, d) * 0.5;
        let lambda = a.clone().symmetric_eigen().eigenvalues.min();
        let q = Quadratic {
            a,
            zstar: DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0)),
            tilt: DVector::from_fn(d, |_, _| rng.random_range(-0.5..0.5)),
        };
        let lo: Vec<f64> = (0..d).map(|_| rng.random_range(-0.8..-0.1)).collect();
        let hi: Vec<f64> = (0..d).map(|_| rng.random_range(0.1..0.8)).collect();
        let zs = q.solve(false, &lo, &hi);
        let zd = q.solve(true, &lo, &hi);
        let gap = q.tilt.norm();
        assert!(dist(&zd, &zs) <= gap / lambda * (1.0 + 1e-9) + 1e-10, "case {s}");
    }
}
