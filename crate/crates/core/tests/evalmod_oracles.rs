use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use regmz::evalmod::*;

fn random(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(-3.0..3.0)).collect()
}

#[test]
fn mse_matches_naive_loops() {
    let shape = BatchShape {
        batch: 7,
        steps: 11,
        dim: 3,
    };
    let pred = random(shape.len(), 1);
    let truth = random(shape.len(), 2);
    let got = mse_vs_horizon(&pred, &truth, shape).unwrap();
    for (k, g) in got.iter().enumerate() {
        let mut acc = 0.0;
        for b in 0..shape.batch {
            for j in 0..shape.dim {
                let idx = b * shape.steps * shape.dim + k * shape.dim + j;
                acc += (pred[idx] - truth[idx]).powi(2);
            }
        }
        let expect = acc / (shape.batch * shape.dim) as f64;
        assert!((g - expect).abs() <= 1e-12);
    }
    assert!(mse_vs_horizon(&pred[1..], &truth[1..], shape).is_err());
}

#[test]
fn gaussian_kl_matches_analytic_value() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n0 = Normal::new(0.0, 1.0).unwrap();
    let n1 = Normal::new(1.0, 1.0).unwrap();
    let a: Vec<f64> = (0..400_000).map(|_| n0.sample(&mut rng)).collect();
    let b: Vec<f64> = (0..400_000).map(|_| n1.sample(&mut rng)).collect();
    let kl = kl_divergence(&a, &b, 100, 1e-9).unwrap();
    assert!((kl - 0.5).abs() <= 0.05, "KL {kl}");
}

#[test]
fn disjoint_supports_give_large_finite_kl() {
    let a: Vec<f64> = (0..1000).map(|i| i as f64 / 1000.0).collect();
    let b: Vec<f64> = a.iter().map(|v| v + 10.0).collect();
    let kl = kl_divergence(&a, &b, 100, 1e-9).unwrap();
    assert!(kl.is_finite() && kl > 10.0);
}

#[test]
fn parseval_for_random_fields() {
    let fields = random(32 * 20, 4);
    let p = power_spectrum(&fields, 32).unwrap();
    let energy: f64 = fields.iter().map(|v| v * v).sum::<f64>() / 20.0;
    let total: f64 = p.iter().sum::<f64>() / 32.0;
    assert!((total - energy).abs() <= 1e-10 * energy);
}

#[test]
fn uniform_samples_give_flat_histogram() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 200_000;
    let bins = 20;
    let x: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    let h = long_time_histogram(&x, bins).unwrap();
    let expected = n as f64 / bins as f64;
    let chi2: f64 = h
        .counts
        .iter()
        .map(|c| (c - expected).powi(2) / expected)
        .sum();
    // 19 degrees of freedom; 43.8 is the 0.999 quantile.
    assert!(chi2 < 43.8, "chi2 {chi2}");
    let integral: f64 = h.density.iter().sum::<f64>() * h.bin_width();
    assert!((integral - 1.0).abs() <= 1e-12);
}

#[test]
fn report_round_trips_to_disk() {
    let dir = tempfile::tempdir().unwrap();
    let mut r = EvalReport {
        mse_vs_horizon: vec![0.0, 0.1],
        kl_vs_horizon: vec![0.0, 0.2],
        spectrum: vec![1.0, 2.0, 3.0],
        ..Default::default()
    };
    r.histograms.insert(
        "truth".into(),
        long_time_histogram(&random(100, 6), 10).unwrap(),
    );
    r.validate().unwrap();
    r.write(dir.path(), "toy_mori1").unwrap();
    let mse = std::fs::read_to_string(dir.path().join("toy_mori1_mse.csv")).unwrap();
    assert_eq!(mse.lines().count(), 3);
    r.mse_vs_horizon[1] = f64::NAN;
    assert!(r.validate().is_err());
}

fn permute_batches(a: &[f64], shape: BatchShape, perm: &[usize]) -> Vec<f64> {
    let block = shape.steps * shape.dim;
    perm.iter()
        .flat_map(|&b| a[b * block..(b + 1) * block].to_vec())
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn metrics_ignore_batch_order(seed in 0u64..10_000) {
        let shape = BatchShape { batch: 6, steps: 5, dim: 2 };
        let pred = random(shape.len(), seed);
        let truth = random(shape.len(), seed + 1);
        let mut perm: Vec<usize> = (0..shape.batch).collect();
        perm.rotate_left((seed % 6) as usize);
        perm.swap(0, 5);
        let (pp, tp) = (permute_batches(&pred, shape, &perm), permute_batches(&truth, shape, &perm));
        let a = mse_vs_horizon(&pred, &truth, shape).unwrap();
        let b = mse_vs_horizon(&pp, &tp, shape).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
        prop_assert_eq!(
            kl_vs_horizon(&pred, &truth, shape, 1, 10, 1e-9).unwrap(),
            kl_vs_horizon(&pp, &tp, shape, 1, 10, 1e-9).unwrap()
        );
        let fields = random(32 * 4, seed);
        let mut rev: Vec<f64> = fields.chunks(32).rev().flatten().copied().collect();
        let s1 = power_spectrum(&fields, 32).unwrap();
        let s2 = power_spectrum(&rev, 32).unwrap();
        for (x, y) in s1.iter().zip(&s2) {
            prop_assert!((x - y).abs() <= 1e-10 * (1.0 + x.abs()));
        }
        rev.truncate(32);
        prop_assert!(power_spectrum(&rev, 32).unwrap().iter().all(|p| *p >= 0.0));
    }

    #[test]
    fn kl_is_zero_on_itself_and_nonnegative(seed in 0u64..10_000, shift in -2.0f64..2.0) {
        let a = random(500, seed);
        let b: Vec<f64> = random(500, seed + 7).iter().map(|v| v + shift).collect();
        prop_assert!(kl_divergence(&a, &a, 50, 1e-9).unwrap().abs() <= 1e-12);
        prop_assert!(kl_divergence(&a, &b, 50, 1e-9).unwrap() >= 0.0);
    }
}
