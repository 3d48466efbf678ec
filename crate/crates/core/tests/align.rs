mod common;

use alignmamba::align::{
    cosine_cost, cost_matrix, mmd_loss, sinkhorn_ot, sinkhorn_with, BandwidthRule, CostMatrix,
    SinkhornOptions,
};
use alignmamba::tensor::Tensor;
use common::{cosine_cost_naive, exact_ot, naive_mmd, random_tensor, rows};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-3;

#[test]
fn sinkhorn_is_within_entropic_bias_of_exact_assignment() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    // near-ties between assignments converge slowly at this blur
    let opts = SinkhornOptions {
        max_iter: 200_000,
        ..SinkhornOptions::default()
    };
    let mut worst_iter = 0;
    for n in 2..=6 {
        for _ in 0..20 {
            let values: Vec<f64> = (0..n * n).map(|_| rng.gen_range(0.0..2.0)).collect();
            let exact = exact_ot(&values, n);
            let sol = sinkhorn_with(&CostMatrix::new(n, n, values).unwrap(), EPS, &opts).unwrap();
            worst_iter = worst_iter.max(sol.iterations);
            let (dist, plan) = (sol.distance, sol.plan);
            let gap = dist - exact;
            assert!(gap > -1e-12, "n={n}: below the optimum by {}", -gap);
            assert!(gap <= 2.0 * EPS * (n as f64).ln(), "n={n}: gap {gap:e}");
            assert!(plan.marginal_violation() < 1e-9);
        }
    }
    eprintln!("most iterations at the final blur: {worst_iter}");
}

#[test]
fn sinkhorn_on_cosine_costs_of_point_clouds() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let x = random_tensor(&mut rng, &[5, 3], -1.0, 1.0);
    let y = random_tensor(&mut rng, &[5, 3], -1.0, 1.0);
    let c = cost_matrix(&x, &y).unwrap();
    let (dist, _) = sinkhorn_ot(&c, EPS).unwrap();
    let exact = exact_ot(c.values(), 5);
    assert!(dist >= exact - 1e-12 && dist - exact <= 2.0 * EPS * 5f64.ln());
}

#[test]
fn cosine_cost_matches_naive() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let x = random_tensor(&mut rng, &[4, 6], -1.0, 1.0);
    let y = random_tensor(&mut rng, &[7, 6], -1.0, 1.0);
    let c = cosine_cost(&x, &y).unwrap();
    assert_eq!(c.shape(), &[4, 7]);
    let expect = cosine_cost_naive(&rows(&x), &rows(&y));
    for (a, b) in c.data().iter().zip(&expect) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn mmd_of_permuted_multiset_is_exactly_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    for _ in 0..20 {
        let n = rng.gen_range(2..12);
        let x = random_tensor(&mut rng, &[n, 5], -3.0, 3.0);
        let mut order: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        let xr = rows(&x);
        let y = Tensor::from_vec(
            vec![n, 5],
            order.iter().flat_map(|&i| xr[i].clone()).collect(),
        )
        .unwrap();
        let v = mmd_loss(&x, &y, BandwidthRule::InverseDim).unwrap().data()[0];
        assert_eq!(v, 0.0);
    }
}

#[test]
fn mmd_two_singletons_closed_form() {
    // |x - y|^2 = d with gamma = 1/d gives 2 - 2/e
    for d in [1, 3, 8, 16] {
        let x = Tensor::zeros(&[1, d]);
        let y = Tensor::full(&[1, d], 1.0);
        let v = mmd_loss(&x, &y, BandwidthRule::InverseDim).unwrap().data()[0];
        assert!(
            (v - (2.0 - 2.0 * (-1f64).exp())).abs() < 1e-12,
            "d={d}: {v}"
        );
    }
}

#[test]
fn mmd_matches_naive_double_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    for _ in 0..50 {
        let d = rng.gen_range(1..10);
        let (n, m) = (rng.gen_range(1..10), rng.gen_range(1..10));
        let x = random_tensor(&mut rng, &[n, d], -2.0, 2.0);
        let y = random_tensor(&mut rng, &[m, d], -2.0, 2.0);
        let v = mmd_loss(&x, &y, BandwidthRule::InverseDim).unwrap().data()[0];
        let expect = naive_mmd(&rows(&x), &rows(&y), 1.0 / d as f64);
        assert!((v - expect).abs() < 1e-10, "{v} vs {expect}");
    }
}

#[test]
fn mmd_is_symmetric_to_the_bit() {
    let mut rng = ChaCha8Rng::seed_from_u64(26);
    for _ in 0..20 {
        let x = random_tensor(&mut rng, &[5, 4], -2.0, 2.0);
        let y = random_tensor(&mut rng, &[7, 4], -2.0, 2.0);
        let a = mmd_loss(&x, &y, BandwidthRule::InverseDim).unwrap().data()[0];
        let b = mmd_loss(&y, &x, BandwidthRule::InverseDim).unwrap().data()[0];
        assert_eq!(a.to_bits(), b.to_bits());
        assert!(a >= 0.0);
    }
}
