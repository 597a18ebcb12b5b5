use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;
use sdk_core::prior::{stream_rng, BiLaplacianPrior, DenseGaussian, GaussianGeometry, PriorCoefficients};
use sdk_core::reduce::{compute_active_subspace, compute_pod};
use sdk_core::{build_rect_mesh, SparseOperator};

fn dense(op: &SparseOperator) -> DMatrix<f64> {
    let n = op.dim();
    let mut out = DMatrix::zeros(n, n);
    for j in 0..n {
        let mut e = vec![0.0; n];
        e[j] = 1.0;
        out.column_mut(j).copy_from_slice(&op.mul_vec(&e));
    }
    out
}

fn m_norm_sq(mass: &SparseOperator, v: &[f64]) -> f64 {
    v.iter().zip(mass.mul_vec(v)).map(|(a, b)| a * b).sum()
}

fn prior_snapshots(nx: usize, ny: usize, n: usize, seed: u64) -> (SparseOperator, Vec<Vec<f64>>) {
    let mesh = build_rect_mesh(nx, ny, 4.0, 1.0).unwrap();
    let prior = BiLaplacianPrior::from_coefficients(&mesh, &PriorCoefficients::poisson_default()).unwrap();
    let snaps = (0..n)
        .map(|i| {
            let mut rng = stream_rng(seed, i as u64);
            // a nonzero mean keeps the centering honest
            prior.sample(&mut rng).iter().enumerate().map(|(k, v)| v + 0.01 * k as f64).collect()
        })
        .collect();
    (prior.mass().clone(), snaps)
}

#[test]
fn pod_truncation_error_matches_tail_sum() {
    let (mass, snaps) = prior_snapshots(32, 8, 64, 11);
    let n = snaps.len() as f64;
    for r in [1, 5, 20] {
        let pod = compute_pod(&snaps, &mass, r).unwrap();
        let err: f64 = snaps
            .iter()
            .map(|u| {
                let rec = pod.decode(&pod.encode(u));
                let d: Vec<f64> = u.iter().zip(&rec).map(|(a, b)| a - b).collect();
                m_norm_sq(&mass, &d)
            })
            .sum::<f64>()
            / n;
        let tail: f64 = pod.eigenvalues[r..].iter().sum::<f64>() * (n - 1.0) / n;
        assert!((err - tail).abs() <= 1e-8 * tail, "r = {r}: {err} vs {tail}");
    }
}

#[test]
fn pod_rank_one_data_is_captured_exactly() {
    let mesh = build_rect_mesh(4, 2, 1.0, 1.0).unwrap();
    let mass = sdk_core::fem::assemble_mass(&mesh);
    let dir: Vec<f64> = (0..mesh.num_vertices()).map(|k| (k as f64).sin()).collect();
    let snaps: Vec<Vec<f64>> = (0..6).map(|i| dir.iter().map(|d| 1.0 + d * i as f64).collect()).collect();
    let pod = compute_pod(&snaps, &mass, 1).unwrap();
    let total: f64 = pod.eigenvalues.iter().sum();
    assert!((pod.eigenvalues[0] - total).abs() <= 1e-12 * total);
    for u in &snaps {
        let rec = pod.decode(&pod.encode(u));
        for (a, b) in u.iter().zip(&rec) {
            assert!((a - b).abs() < 1e-10);
        }
    }
}

#[test]
fn pod_rank_overflow_is_rejected() {
    let (mass, snaps) = prior_snapshots(4, 2, 5, 1);
    assert!(compute_pod(&snaps, &mass, 5).is_err());
    assert!(compute_pod(&snaps, &mass, 4).is_ok());
}

/// Dense generalized eigenpairs of `H psi = lambda P psi`, descending.
fn dense_generalized(h: &DMatrix<f64>, p: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let l = p.clone().cholesky().unwrap().l();
    let linv = l.clone().try_inverse().unwrap();
    let a = &linv * h * linv.transpose();
    let a = (&a + a.transpose()) * 0.5;
    let eig = a.symmetric_eigen();
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let vals = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vecs = DMatrix::from_fn(h.nrows(), order.len(), |r, c| eig.eigenvectors[(r, order[c])]);
    (vals, linv.transpose() * vecs)
}

#[test]
fn active_subspace_matches_dense_oracle_on_tiny_mesh() {
    let mesh = build_rect_mesh(2, 1, 2.0, 1.0).unwrap();
    let prior = BiLaplacianPrior::from_coefficients(&mesh, &PriorCoefficients::poisson_default()).unwrap();
    let n = mesh.num_vertices();
    // hand-built linear map with r_u = 3 rows
    let b = DMatrix::from_row_slice(
        3,
        n,
        &[
            1.0, -2.0, 0.5, 0.0, 3.0, 1.0, //
            0.0, 1.0, 1.0, -1.0, 0.0, 2.0, //
            2.0, 0.0, -1.0, 0.5, 1.0, 0.0,
        ],
    );
    let basis = compute_active_subspace(&[b.clone(), b.clone() * 0.5], &prior, vec![0.0; n], n).unwrap();
    let h = (b.transpose() * &b) * (1.0 + 0.25) / 2.0;
    let p = DMatrix::from_fn(n, n, |i, j| {
        let mut e = vec![0.0; n];
        e[j] = 1.0;
        prior.apply_precision(&e)[i]
    });
    let p = (&p + p.transpose()) * 0.5;
    let (vals, vecs) = dense_generalized(&h, &p);
    let scale = vals[0];
    for k in 0..n {
        assert!((basis.eigenvalues[k] - vals[k]).abs() <= 1e-9 * scale, "lambda {k}: {} vs {}", basis.eigenvalues[k], vals[k]);
    }
    // rank 3 map: the three nonzero eigenvectors are determined up to sign
    for k in 0..3 {
        let ours = basis.psi.column(k);
        let theirs = vecs.column(k);
        let sign = if ours.dot(&theirs) < 0.0 { -1.0 } else { 1.0 };
        let diff = (ours - theirs * sign).amax();
        assert!(diff <= 1e-9 * theirs.amax(), "psi {k}: {diff}");
    }
    let gram = basis.psi.transpose() * &p * &basis.psi;
    assert!((gram - DMatrix::identity(n, n)).amax() < 1e-9);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn pod_modes_are_mass_orthonormal_and_descending(seed in 0u64..1000, n in 4usize..20, r_frac in 0.1f64..1.0) {
        let (mass, snaps) = prior_snapshots(6, 3, n, seed);
        let r = ((n - 1) as f64 * r_frac).ceil() as usize;
        let pod = compute_pod(&snaps, &mass, r).unwrap();
        let gram = pod.phi.transpose() * dense(&mass) * &pod.phi;
        prop_assert!((gram - DMatrix::identity(r, r)).amax() < 1e-9);
        prop_assert!(pod.eigenvalues.windows(2).all(|w| w[0] >= w[1]));
        // trace identity: the spectrum sums to the mean squared deviation
        let mean = &pod.mean;
        let total: f64 = snaps.iter().map(|u| {
            let d: Vec<f64> = u.iter().zip(mean).map(|(a, b)| a - b).collect();
            m_norm_sq(&mass, &d)
        }).sum::<f64>() / (n - 1) as f64;
        let s: f64 = pod.eigenvalues.iter().sum();
        prop_assert!((s - total).abs() <= 1e-9 * total, "{} vs {} {:?}", s, total, pod.eigenvalues);
        // reconstruction in the span is exact
        let c: Vec<f64> = (0..r).map(|k| (k as f64 + 1.0).recip()).collect();
        let u = pod.decode(&c);
        let back = pod.encode(&u);
        for (a, b) in back.iter().zip(&c) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn active_subspace_is_precision_orthonormal(seed in 0u64..1000, rows in 1usize..4, samples in 1usize..5) {
        let mut rng = stream_rng(seed, 0);
        let dim = 6;
        let sqrt = DMatrix::from_fn(dim, dim, |i, j| if i == j { 1.0 + rng.random::<f64>() } else { 0.3 * rng.random::<f64>() });
        let geom = DenseGaussian::from_sqrt(sqrt.clone()).unwrap();
        let jac: Vec<DMatrix<f64>> = (0..samples).map(|_| DMatrix::from_fn(rows, dim, |_, _| rng.random_range(-1.0..1.0))).collect();
        let basis = compute_active_subspace(&jac, &geom, vec![0.0; dim], dim).unwrap();
        let cov = &sqrt * sqrt.transpose();
        let prec = cov.try_inverse().unwrap();
        let gram = basis.psi.transpose() * &prec * &basis.psi;
        prop_assert!((gram - DMatrix::identity(dim, dim)).amax() < 1e-8);
        prop_assert!(basis.eigenvalues.windows(2).all(|w| w[0] >= w[1]));
        // trace identity: sum of eigenvalues is the mean of |B_i S|_F^2
        let expect: f64 = jac.iter().map(|b| (b * &sqrt).norm_squared()).sum::<f64>() / samples as f64;
        let s: f64 = basis.eigenvalues.iter().sum();
        prop_assert!((s - expect).abs() <= 1e-9 * expect.max(1.0));
        // full-rank encode/decode round trip
        let m: Vec<f64> = (0..dim).map(|k| k as f64 - 2.5).collect();
        let back = basis.decode(&basis.encode(&m));
        for (a, b) in back.iter().zip(&m) {
            prop_assert!((a - b).abs() < 1e-8);
        }
        let _ = geom.dim();
        let _ = DVector::<f64>::zeros(1);
    }
}
