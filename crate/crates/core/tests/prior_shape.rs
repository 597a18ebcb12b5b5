use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::Rng;
use sdk_core::prior::{standard_normal_vec, stream_rng};
use sdk_core::reduce::compute_active_subspace;
use sdk_core::shape::{
    bernstein_ffd_basis, check_diffeomorphism, deform, fourier_basis, is_admissible, pushforward_l2_sq, reference_l2_sq, w1inf_norm,
    ADMISSIBLE_DET_F,
};
use sdk_core::{build_rect_mesh, BiLaplacianPrior, PriorCoefficients};

fn coarse_prior() -> BiLaplacianPrior {
    let mesh = build_rect_mesh(4, 2, 4.0, 1.0).unwrap();
    BiLaplacianPrior::from_coefficients(&mesh, &PriorCoefficients::poisson_default()).unwrap()
}

#[test]
fn whitened_samples_have_identity_covariance() {
    let prior = coarse_prior();
    let n = 4000;
    let dim = prior.mass().dim();
    let mut cov = DMatrix::zeros(dim, dim);
    for i in 0..n {
        let w = prior.whiten(&prior.sample(&mut stream_rng(21, i)));
        let v = nalgebra::DVector::from_vec(w);
        cov += &v * v.transpose();
    }
    cov /= n as f64;
    // entries of a Wishart estimate fluctuate like 1/sqrt(n) ~ 0.016
    assert!((cov - DMatrix::identity(dim, dim)).amax() < 0.1);
}

#[test]
fn whitening_inverts_the_sampler() {
    let prior = coarse_prior();
    let xi = standard_normal_vec(&mut stream_rng(1, 1), prior.mass().dim());
    let back = prior.whiten(&prior.sample_from_noise(&xi));
    for (a, b) in back.iter().zip(&xi) {
        assert!((a - b).abs() < 1e-10);
    }
}

#[test]
fn active_subspace_coordinates_are_standard_normal() {
    let prior = coarse_prior();
    let dim = prior.mass().dim();
    let mut rng = stream_rng(2, 0);
    let jac: Vec<DMatrix<f64>> = (0..3).map(|_| DMatrix::from_fn(4, dim, |_, _| rng.random_range(-1.0..1.0))).collect();
    let basis = compute_active_subspace(&jac, &prior, vec![0.0; dim], 5).unwrap();
    let n = 2000;
    let mut var = [0.0; 5];
    for i in 0..n {
        let c = basis.encode(&prior.sample(&mut stream_rng(3, i)));
        for (v, x) in var.iter_mut().zip(&c) {
            *v += x * x / n as f64;
        }
    }
    for v in var {
        assert!((v - 1.0).abs() < 0.1, "variance {v}");
    }
}

#[test]
fn fourier_determinant_is_one_plus_height_derivative() {
    let basis = fourier_basis(5, 4.0).unwrap();
    let mut rng = stream_rng(4, 0);
    for _ in 0..50 {
        let z: Vec<f64> = (0..11).map(|_| rng.random_range(-0.2..0.2)).collect();
        let x = [rng.random_range(0.0..4.0), rng.random_range(0.0..1.0)];
        let d = deform(&basis, &z, x);
        // d/dX2 of X2 * h(X1) is h(X1)
        let h: f64 = z
            .iter()
            .enumerate()
            .map(|(i, zi)| {
                let k = ((i + 1) / 2) as f64 * std::f64::consts::PI;
                zi * if i > 0 && i % 2 == 0 { (k * x[0]).sin() } else { (k * x[0]).cos() }
            })
            .sum();
        match d {
            Ok(d) => assert!((d.det_f - (1.0 + h)).abs() < 1e-14),
            Err(_) => assert!(1.0 + h <= 0.0),
        }
    }
}

#[test]
fn admissibility_is_the_threshold_on_the_scan() {
    let mesh = build_rect_mesh(32, 8, 4.0, 1.0).unwrap();
    let basis = fourier_basis(5, 4.0).unwrap();
    let run = |seed: u64| -> Vec<bool> {
        let mut rng = stream_rng(seed, 0);
        (0..200)
            .map(|_| {
                let z: Vec<f64> = (0..11).map(|_| rng.random_range(-0.2..=0.2)).collect();
                let ok = is_admissible(&mesh, &basis, &z).unwrap();
                assert_eq!(ok, check_diffeomorphism(&mesh, &basis, &z).unwrap() > ADMISSIBLE_DET_F);
                ok
            })
            .collect()
    };
    let a = run(17);
    assert_eq!(a, run(17));
    assert!(a.iter().any(|&x| x));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn pushforward_norm_is_bounded(seed in 0u64..100_000, ffd in proptest::bool::ANY) {
        let mesh = build_rect_mesh(16, 4, 4.0, 1.0).unwrap();
        let basis = if ffd {
            bernstein_ffd_basis(3, 3, [0.5, 0.0], [3.5, 1.0]).unwrap()
        } else {
            fourier_basis(3, 4.0).unwrap()
        };
        let mut rng = stream_rng(seed, 0);
        let z: Vec<f64> = (0..basis.dim()).map(|_| rng.random_range(-0.1..0.1)).collect();
        prop_assume!(is_admissible(&mesh, &basis, &z).unwrap());
        let u: Vec<f64> = (0..mesh.num_vertices()).map(|_| rng.random_range(-2.0..2.0)).collect();
        let pushed = pushforward_l2_sq(&mesh, &basis, &z, &u).unwrap();
        let w = w1inf_norm(&mesh, &basis, &z).unwrap();
        let min_det = check_diffeomorphism(&mesh, &basis, &z).unwrap();
        let reference = reference_l2_sq(&mesh, &u);
        prop_assert!(pushed <= w.powi(2) * reference * (1.0 + 1e-12));
        prop_assert!(pushed >= min_det * reference * (1.0 - 1e-12));
    }

    #[test]
    fn deformation_is_affine_in_z(seed in 0u64..100_000, s in -2.0f64..2.0) {
        let basis = fourier_basis(2, 4.0).unwrap();
        let mut rng = stream_rng(seed, 1);
        let z: Vec<f64> = (0..5).map(|_| rng.random_range(-0.05..0.05)).collect();
        let x = [rng.random_range(0.0..4.0), rng.random_range(0.0..1.0)];
        let zs: Vec<f64> = z.iter().map(|v| v * s).collect();
        let a = deform(&basis, &z, x).unwrap();
        let b = deform(&basis, &zs, x).unwrap();
        for k in 0..2 {
            prop_assert!(((b.chi[k] - x[k]) - s * (a.chi[k] - x[k])).abs() < 1e-13);
        }
    }
}
