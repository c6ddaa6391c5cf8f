mod common;

use proptest::prelude::*;
use qelim_core::linalg::{
    condition_number, gaussian_matrix, invert, numerical_rank, orthonormal_basis_zero_mean, solve_spd, spectral_norm,
};
use qelim_core::{Matrix, Rng};

#[test]
fn invert_seed7_residual() {
    let a = gaussian_matrix(8, 8, 1.0, &mut Rng::seed_from(7)).unwrap();
    let r = a.matmul(&invert(&a).unwrap()).unwrap();
    assert!(r.max_abs_diff(&Matrix::identity(8)).unwrap() < 1e-10);
}

#[test]
fn solve_spd_random_residual() {
    let mut rng = Rng::seed_from(11);
    let g = gaussian_matrix(6, 6, 1.0, &mut rng).unwrap();
    let mut a = g.t_matmul(&g).unwrap();
    for i in 0..6 {
        a[(i, i)] += 0.5;
    }
    let b = gaussian_matrix(6, 3, 1.0, &mut rng).unwrap();
    let x = solve_spd(&a, &b).unwrap();
    assert!(a.matmul(&x).unwrap().max_abs_diff(&b).unwrap() < 1e-10);
}

#[test]
fn zero_mean_basis_many_dims() {
    for d in 2..=20 {
        let q = orthonormal_basis_zero_mean(d).unwrap();
        assert_eq!(q.shape(), (d, d - 1));
        let gram = q.t_matmul(&q).unwrap();
        assert!(gram.max_abs_diff(&Matrix::identity(d - 1)).unwrap() < 1e-12);
        for c in 0..d - 1 {
            let s: f64 = (0..d).map(|r| q[(r, c)]).sum();
            assert!(s.abs() < 1e-12);
        }
    }
}

#[test]
fn spectral_norm_matches_svd_oracle() {
    let mut rng = Rng::seed_from(3);
    for _ in 0..20 {
        let a = gaussian_matrix(5, 5, 1.0, &mut rng).unwrap();
        let want = common::svd_norm(&a);
        assert!((spectral_norm(&a) - want).abs() <= 1e-9 * want);
    }
    let rect = gaussian_matrix(7, 3, 1.0, &mut rng).unwrap();
    let want = common::svd_norm(&rect);
    assert!((spectral_norm(&rect) - want).abs() <= 1e-9 * want);
}

#[test]
fn condition_number_matches_svd_oracle() {
    let mut rng = Rng::seed_from(4);
    for _ in 0..10 {
        let a = gaussian_matrix(6, 6, 1.0, &mut rng).unwrap();
        let want = common::svd_cond(&a);
        assert!((condition_number(&a).unwrap() - want).abs() <= 1e-7 * want);
    }
}

#[test]
fn rank_matches_svd_oracle() {
    let mut rng = Rng::seed_from(5);
    let a = gaussian_matrix(6, 2, 1.0, &mut rng).unwrap();
    let b = gaussian_matrix(2, 5, 1.0, &mut rng).unwrap();
    let low = a.matmul(&b).unwrap();
    assert_eq!(numerical_rank(&low, 1e-10), common::svd_rank(&low, 1e-10));
    assert_eq!(numerical_rank(&low, 1e-10), 2);
    let full = gaussian_matrix(5, 5, 1.0, &mut rng).unwrap();
    assert_eq!(numerical_rank(&full, 1e-10), 5);
}

#[test]
fn gaussian_matrix_statistics() {
    let h = 64;
    let s = 1.0 / ((4 * h) as f64).sqrt();
    let w = gaussian_matrix(4 * h, h, s, &mut Rng::seed_from(1)).unwrap();
    let n = w.as_slice().len() as f64;
    let mean = w.as_slice().iter().sum::<f64>() / n;
    let var = w.as_slice().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let target = 1.0 / (4 * h) as f64;
    assert!((var - target).abs() < 0.2 * target, "var {var}");
}

#[test]
fn gaussian_matrix_determinism() {
    let a = gaussian_matrix(1, 1, 1.0, &mut Rng::seed_from(9)).unwrap();
    let b = gaussian_matrix(1, 1, 1.0, &mut Rng::seed_from(9)).unwrap();
    assert_eq!(a.as_slice()[0].to_bits(), b.as_slice()[0].to_bits());
    let c = gaussian_matrix(3, 3, 1.0, &mut Rng::seed_from(10)).unwrap();
    let d = gaussian_matrix(3, 3, 1.0, &mut Rng::seed_from(11)).unwrap();
    assert_ne!(c, d);
}

#[test]
fn dgemm_products_match_naive() {
    let mut rng = Rng::seed_from(12);
    let a = gaussian_matrix(7, 5, 1.0, &mut rng).unwrap();
    let b = gaussian_matrix(5, 9, 1.0, &mut rng).unwrap();
    assert!(a.matmul(&b).unwrap().max_abs_diff(&common::naive_matmul(&a, &b)).unwrap() < 1e-13);
}

fn conditioned_matrix(d: usize, seed: u64, max_cond: f64) -> Matrix {
    let mut rng = Rng::seed_from(seed);
    loop {
        let a = gaussian_matrix(d, d, 1.0, &mut rng).unwrap();
        if common::svd_cond(&a) <= max_cond {
            return a;
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn invert_residual_property(d in 1usize..12, seed in any::<u64>()) {
        let a = conditioned_matrix(d, seed, 1e4);
        let r = a.matmul(&invert(&a).unwrap()).unwrap();
        prop_assert!(r.max_abs_diff(&Matrix::identity(d)).unwrap() <= 1e-8);
    }

    #[test]
    fn compression_does_not_grow_spectral_norm(d in 2usize..10, seed in any::<u64>()) {
        let a = gaussian_matrix(d, d, 1.0, &mut Rng::seed_from(seed)).unwrap();
        let q = orthonormal_basis_zero_mean(d).unwrap();
        let r = q.t_matmul(&a.matmul(&q).unwrap()).unwrap();
        prop_assert!(spectral_norm(&r) <= spectral_norm(&a) * (1.0 + 1e-10));
    }

    #[test]
    fn rng_streams_repeat(seed in any::<u64>()) {
        let mut a = Rng::seed_from(seed);
        let mut b = Rng::seed_from(seed);
        for _ in 0..64 {
            prop_assert_eq!(a.normal().to_bits(), b.normal().to_bits());
        }
    }
}
