//! SVD, truncation and matrix helpers against closed-form oracles.

use lrnas::linalg::{frobenius_norm, matmul, seeded_random, svd, truncate, Matrix};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

fn truncation_error(a: &Matrix, r: usize) -> f64 {
    let s = svd(a).unwrap();
    let (u, v) = truncate(&s, r).unwrap();
    a.sub(&u.matmul_t(&v).unwrap()).unwrap().frobenius_norm()
}

/// Eckart–Young oracle: the tail of the singular values, summed in reverse
/// so the smallest terms are added first.
fn tail_oracle(sigma: &[f64], r: usize) -> f64 {
    sigma[r..].iter().rev().map(|s| s * s).sum::<f64>().sqrt()
}

pub fn eckart_young_on_seeded_matrices() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for seed in 0..100 {
        let m = rng.random_range(1..=32);
        let n = rng.random_range(1..=24);
        let a = seeded_random(m, n, seed, 1.0);
        let s = svd(&a).unwrap();
        let p = m.min(n);
        let mut prev = f64::INFINITY;
        for r in 1..=p {
            let err = truncation_error(&a, r);
            let oracle = tail_oracle(&s.sigma, r);
            if oracle > 1e-10 * a.frobenius_norm() {
                assert!(rel_err(err, oracle) <= 1e-8, "{m}x{n} r={r}: {err} vs {oracle}");
            } else {
                assert!(err <= 1e-10 * a.frobenius_norm(), "{m}x{n} r={r}: {err}");
            }
            assert!(err <= prev + 1e-12, "error grew at r={r}");
            prev = err;
        }
    }
}

#[test]
fn diagonal_and_identity_examples() {
    let s = svd(&Matrix::identity(4)).unwrap();
    for x in &s.sigma {
        assert!((x - 1.0).abs() < 1e-14);
    }
    let d = Matrix::from_diag(&[3.0, 2.0, 1.0]);
    let s = svd(&d).unwrap();
    for (x, want) in s.sigma.iter().zip([3.0, 2.0, 1.0]) {
        assert!((x - want).abs() < 1e-14);
    }
    assert!(truncation_error(&d, 3) < 1e-14);
    assert!((truncation_error(&d, 1) - 5f64.sqrt()).abs() < 1e-12);
}

#[test]
fn random_16x12_rank_4() {
    let a = seeded_random(16, 12, 3, 1.0);
    let s = svd(&a).unwrap();
    assert!(rel_err(truncation_error(&a, 4), tail_oracle(&s.sigma, 4)) <= 1e-8);
}

#[test]
fn truncation_rank_out_of_range() {
    let s = svd(&seeded_random(5, 3, 0, 1.0)).unwrap();
    assert!(truncate(&s, 0).is_err());
    assert!(truncate(&s, 4).is_err());
}

#[test]
fn balanced_factors() {
    let a = seeded_random(10, 6, 11, 1.0);
    let s = svd(&a).unwrap();
    let (u, v) = truncate(&s, 3).unwrap();
    for j in 0..3 {
        let nu: f64 = u.column(j).iter().map(|x| x * x).sum::<f64>().sqrt();
        let nv: f64 = v.column(j).iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((nu - s.sigma[j].sqrt()).abs() < 1e-10);
        assert!((nv - s.sigma[j].sqrt()).abs() < 1e-10);
    }
}

#[test]
fn svd_is_bit_deterministic() {
    let a = seeded_random(20, 13, 5, 2.0);
    assert_eq!(svd(&a).unwrap(), svd(&a).unwrap());
    assert_eq!(seeded_random(4, 4, 9, 1.0), seeded_random(4, 4, 9, 1.0));
}

#[test]
fn nonfinite_input_is_rejected() {
    let mut a = Matrix::zeros(3, 3);
    a.set(1, 1, f64::NAN);
    assert!(svd(&a).is_err());
}

#[test]
fn small_matrix_examples() {
    let a = seeded_random(3, 5, 1, 1.0);
    assert_eq!(matmul(&Matrix::identity(3), &a).unwrap(), a);
    let b = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
    let c = matmul(&b, &Matrix::from_rows(&[&[1.0], &[1.0]])).unwrap();
    assert_eq!(c, Matrix::from_rows(&[&[3.0], &[7.0]]));
    assert!(matmul(&b, &a).is_err());
    assert_eq!(frobenius_norm(&Matrix::zeros(2, 2)), 0.0);
    assert_eq!(frobenius_norm(&Matrix::from_rows(&[&[3.0, 4.0]])), 5.0);
}

#[test]
fn prefix_views_alias_storage() {
    let mut a = seeded_random(6, 5, 2, 1.0);
    {
        let p3 = a.prefix(3);
        let p5 = a.prefix(5);
        assert!(p3.shares_storage_with(&p5));
        for i in 0..6 {
            for j in 0..3 {
                assert_eq!(p3.get(i, j).to_bits(), p5.get(i, j).to_bits());
            }
        }
    }
    a.prefix_mut(2).set(4, 1, 42.0);
    assert_eq!(a.prefix(4).get(4, 1), 42.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn svd_reconstructs_and_orders(m in 1usize..12, n in 1usize..12, seed in any::<u64>(), scale in 0.01f64..100.0) {
        let a = seeded_random(m, n, seed, scale);
        let s = svd(&a).unwrap();
        prop_assert!(s.sigma.windows(2).all(|w| w[0] >= w[1]));
        prop_assert!(s.sigma.iter().all(|&x| x >= 0.0));
        let err = s.reconstruct().sub(&a).unwrap().frobenius_norm();
        prop_assert!(err <= 1e-10 * a.frobenius_norm().max(1e-300));
        let gram = s.u.t_matmul(&s.u).unwrap().sub(&Matrix::identity(m.min(n))).unwrap();
        prop_assert!(gram.frobenius_norm() < 1e-9);
    }

    #[test]
    fn truncation_error_is_monotone(m in 2usize..10, n in 2usize..10, seed in any::<u64>()) {
        let a = seeded_random(m, n, seed, 1.0);
        let errs: Vec<f64> = (1..=m.min(n)).map(|r| truncation_error(&a, r)).collect();
        prop_assert!(errs.windows(2).all(|w| w[1] <= w[0] + 1e-12));
    }
}

/// Test entry points for the checks the acceptance run also calls.
mod shared {
    #[test]
    fn eckart_young_on_seeded_matrices() {
        super::eckart_young_on_seeded_matrices();
    }
}
