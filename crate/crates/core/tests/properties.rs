use proptest::prelude::*;

use mimetic::attention::{attention_map, skip_forward, softmax_rows, SkipMode};
use mimetic::inspect::{Checkpoint, Tensor};
use mimetic::linalg::{gaussian_matrix, svd};
use mimetic::mimetic::{construct_qk_head, construct_vp, estimate_alpha_beta};
use mimetic::{Matrix, Rng, VpFactorization, VpSign};

fn matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    gaussian_matrix(rows, cols, 1.0, &mut Rng::seed_from_u64(seed))
}

fn close(a: &Matrix, b: &Matrix, tol: f64) -> bool {
    a.shape() == b.shape() && a.sub(b).max_abs() <= tol
}

fn permute_rows(m: &Matrix, perm: &[usize]) -> Matrix {
    Matrix::from_fn(m.rows(), m.cols(), |i, j| m[(perm[i], j)])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn svd_reconstructs_with_orthonormal_factors(rows in 1usize..14, cols in 1usize..14, seed: u64) {
        let m = matrix(rows, cols, seed);
        let r = svd(&m).unwrap();
        let scale = m.max_abs().max(1.0);
        prop_assert!(close(&r.reconstruct(), &m, 1e-11 * scale));
        let k = rows.min(cols);
        prop_assert!(close(&r.u.t_matmul(&r.u), &Matrix::identity(k), 1e-12));
        prop_assert!(close(&r.v.t_matmul(&r.v), &Matrix::identity(k), 1e-12));
        prop_assert!(r.s.windows(2).all(|w| w[0] >= w[1]));
        prop_assert!(r.s.iter().all(|&s| s >= 0.0));
    }

    #[test]
    fn truncation_residual_is_the_tail_energy(d in 2usize..16, seed: u64, k_frac in 0.0f64..1.0) {
        let m = matrix(d, d, seed);
        let k = ((d as f64 * k_frac) as usize).clamp(1, d);
        let r = svd(&m).unwrap();
        let residual = m.sub(&r.truncated(k)).frobenius_norm().powi(2);
        let total = m.frobenius_norm().powi(2);
        prop_assert!((residual - r.tail_energy(k)).abs() <= 1e-11 * total);
        // No other rank-k product does better.
        let other = matrix(d, k, seed ^ 1).matmul_t(&matrix(d, k, seed ^ 2)).scale(0.1);
        prop_assert!(m.sub(&other).frobenius_norm().powi(2) >= residual);
    }

    #[test]
    fn vp_factors_reproduce_the_target(
        d in 2usize..24,
        alpha in 0.0f64..=1.0,
        beta in 0.05f64..=1.0,
        positive: bool,
        seed: u64,
    ) {
        let sign = if positive { VpSign::Positive } else { VpSign::Negative };
        let mut want = gaussian_matrix(d, d, 1.0 / (d as f64).sqrt(), &mut Rng::seed_from_u64(seed)).scale(alpha);
        want.add_diag(sign.factor() * beta);
        let vp = construct_vp(d, alpha, beta, sign, VpFactorization::SymmetricSqrt, &mut Rng::seed_from_u64(seed)).unwrap();
        prop_assert!(vp.product().sub(&want).frobenius_norm() <= 1e-10 * want.frobenius_norm());
        // The two factorizations share W_proj and differ by Σ^½ in W_V.
        let raw = construct_vp(d, alpha, beta, sign, VpFactorization::AsWritten, &mut Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(&raw.w_proj, &vp.w_proj);
    }

    #[test]
    fn estimator_follows_sign_and_scale(d in 2usize..20, seed: u64, c in 0.1f64..10.0) {
        let m = matrix(d, d, seed);
        let pos = estimate_alpha_beta(&m, VpSign::Positive).unwrap();
        let neg = estimate_alpha_beta(&m, VpSign::Negative).unwrap();
        prop_assert_eq!(pos.beta_hat, -neg.beta_hat);
        prop_assert_eq!(pos.diag_z_score, neg.diag_z_score);
        let scaled = estimate_alpha_beta(&m.scale(c), VpSign::Positive).unwrap();
        prop_assert!((scaled.alpha_hat - c * pos.alpha_hat).abs() <= 1e-12 * c * pos.alpha_hat.max(1.0));
        prop_assert!((scaled.beta_hat - c * pos.beta_hat).abs() <= 1e-12 * c * pos.beta_hat.abs().max(1.0));
    }

    #[test]
    fn attention_map_is_permutation_equivariant(n in 1usize..10, seed: u64, rot in 0usize..10) {
        let (d, k) = (8, 4);
        let head = construct_qk_head(d, k, 0.7, 0.7, &mut Rng::seed_from_u64(seed)).unwrap();
        let x = matrix(n, d, seed ^ 7);
        let mut perm: Vec<usize> = (0..n).collect();
        Rng::seed_from_u64(seed ^ 9).shuffle(&mut perm);
        perm.rotate_left(rot % n);
        let a = attention_map(&x, &head, k).unwrap();
        let b = attention_map(&permute_rows(&x, &perm), &head, k).unwrap();
        let a_perm = Matrix::from_fn(n, n, |i, j| a[(perm[i], perm[j])]);
        prop_assert!(close(&a_perm, &b, 1e-12));
    }

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..6, cols in 1usize..40, seed: u64, shift in -1e3f64..1e3) {
        let m = matrix(rows, cols, seed).scale(20.0);
        let mut a = m.clone();
        softmax_rows(&mut a);
        for i in 0..rows {
            let s: f64 = a.row(i).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-13);
            prop_assert!(a.row(i).iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
        let mut shifted = m.map(|v| v + shift);
        softmax_rows(&mut shifted);
        prop_assert!(close(&a, &shifted, 1e-12));
    }

    #[test]
    fn left_layerscale_interpolates_between_plain_and_branch(n in 1usize..6, d in 1usize..10, seed: u64) {
        let x = matrix(n, d, seed);
        let a = matrix(n, d, seed ^ 3);
        let plain = skip_forward(SkipMode::Plain, &x, &a, None).unwrap();
        prop_assert!(close(&plain, &x.add(&a), 0.0));
        let zeros = vec![0.0; d];
        prop_assert!(close(&skip_forward(SkipMode::LayerscaleLeft, &x, &a, Some(&zeros)).unwrap(), &plain, 0.0));
        let ones = vec![1.0; d];
        prop_assert!(close(&skip_forward(SkipMode::LayerscaleLeft, &x, &a, Some(&ones)).unwrap(), &a, 0.0));
        prop_assert!(close(&skip_forward(SkipMode::LayerscaleRight, &x, &a, Some(&ones)).unwrap(), &plain, 0.0));
    }

    #[test]
    fn container_round_trip_is_bitwise(
        shapes in prop::collection::vec(prop::collection::vec(0usize..5, 0..4), 0..6),
        bits in prop::collection::vec(any::<u64>(), 64),
        meta in prop::collection::btree_map("[a-z_]{1,8}", "[ -~]{0,12}", 0..4),
    ) {
        let mut c = Checkpoint::new();
        for (i, shape) in shapes.iter().enumerate() {
            let n: usize = shape.iter().product();
            // Arbitrary bit patterns, NaN payloads and signed zeros included.
            let data = (0..n).map(|j| f64::from_bits(bits[(i * 7 + j) % bits.len()])).collect();
            c.insert(format!("t{i}.weight"), Tensor::new(shape.clone(), data).unwrap());
        }
        for (k, v) in &meta {
            c.set_meta(k.clone(), v);
        }
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert!(back.bitwise_eq(&c));
        prop_assert_eq!(back.to_bytes(), bytes);
    }
}
