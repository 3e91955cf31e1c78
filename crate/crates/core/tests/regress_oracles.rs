use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regmz::regress::{
    fit, gradient_check, idempotence_residual, residual_orthogonality, Activation, AdamConfig,
    Dataset, FittedModel, RegressionFamily,
};

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn mlp_family() -> RegressionFamily {
    RegressionFamily::mlp(vec![5, 5], Activation::Tanh)
}

fn cnn_family() -> RegressionFamily {
    RegressionFamily::conv1d(2, 5, 11, true)
}

#[test]
fn mlp_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let fam = mlp_family();
    let net = fam.net(1, 1).unwrap();
    let theta = net.init(&mut rng);
    let x = uniform(&mut rng, 16, -2.0, 2.0);
    let y = uniform(&mut rng, 16, -1.0, 1.0);
    let report = gradient_check(&fam, &theta, &Dataset::new(&x, 1, &y, 1).unwrap()).unwrap();
    assert!(report.max_rel_error <= 1e-5, "{report:?}");
    assert!(report.max_abs_error_small <= 1e-8, "{report:?}");
}

#[test]
fn cnn_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for (fam, c_in) in [
        (cnn_family(), 1),
        (cnn_family(), 4),
        (RegressionFamily::conv1d(2, 3, 5, false), 2),
    ] {
        let net = fam.net(32 * c_in, 32).unwrap();
        let theta = net.init(&mut rng);
        let x = uniform(&mut rng, 4 * 32 * c_in, -1.5, 1.5);
        let y = uniform(&mut rng, 4 * 32, -1.0, 1.0);
        let data = Dataset::new(&x, 32 * c_in, &y, 32).unwrap();
        let report = gradient_check(&fam, &theta, &data).unwrap();
        assert!(report.max_rel_error <= 1e-5, "{report:?}");
        assert!(report.max_abs_error_small <= 1e-8, "{report:?}");
    }
}

#[test]
fn dead_unit_bias_gradient_is_compared_absolutely() {
    let fam = RegressionFamily::mlp(vec![2], Activation::Relu);
    // Hidden unit 1 has a large negative bias: never active, zero gradient.
    let theta = vec![1.0, 0.5, 0.1, -100.0, 1.0, 1.0, 0.0];
    let x = [0.3, -0.7, 1.1, 0.9];
    let y = [0.0, 1.0, 2.0, -1.0];
    let report = gradient_check(&fam, &theta, &Dataset::new(&x, 1, &y, 1).unwrap()).unwrap();
    assert!(report.max_abs_error_small <= 1e-8, "{report:?}");
    assert!(report.max_rel_error <= 1e-5, "{report:?}");
}

#[test]
fn teacher_student_mlp_reaches_low_validation_error() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let fam = mlp_family();
    let net = fam.net(1, 1).unwrap();
    let teacher = FittedModel::from_net_params(fam.clone(), 1, 1, net.init(&mut rng)).unwrap();
    let x = uniform(&mut rng, 4000, -2.0, 2.0);
    let y = teacher.predict_batch(&x);
    let student_family = fam.with_adam(AdamConfig {
        lr: 5e-3,
        epochs: 400,
        batch_size: 64,
        early_stop_patience: 40,
        max_samples: None,
    });
    let student = fit(&student_family, &Dataset::new(&x, 1, &y, 1).unwrap(), 3).unwrap();
    let val = student.validation_mse().unwrap();
    assert!(val <= 1e-4, "validation MSE {val}");

    let rms = idempotence_residual(&student, &x[..1000]).unwrap();
    assert!(rms <= 1e-3, "refit RMS {rms}");
}

#[test]
fn circular_cnn_maps_constants_to_constants_and_commutes_with_rotation() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let fam = cnn_family();
    let net = fam.net(64, 32).unwrap();
    let model = FittedModel::from_net_params(fam, 64, 32, net.init(&mut rng)).unwrap();
    let out = model.predict(&[0.7; 64]).unwrap();
    assert!(out.iter().all(|v| (v - out[0]).abs() < 1e-12));

    let x = uniform(&mut rng, 64, -1.0, 1.0);
    let base = model.predict(&x).unwrap();
    for r in [1, 5, 31] {
        let rot: Vec<f64> = (0..64)
            .map(|i| x[(i / 32) * 32 + (i % 32 + r) % 32])
            .collect();
        let out = model.predict(&rot).unwrap();
        for i in 0..32 {
            assert!((out[i] - base[(i + r) % 32]).abs() < 1e-10);
        }
    }
}

#[test]
fn closed_form_projection_laws() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let x = uniform(&mut rng, 3000, 0.5, 1.5);
    let y: Vec<f64> = x
        .iter()
        .map(|v| (2.0 * v).exp().sin() + 0.1 * rng.random::<f64>())
        .collect();
    let data = Dataset::new(&x, 1, &y, 1).unwrap();
    for fam in [RegressionFamily::linear(), RegressionFamily::polynomial(5)] {
        let m = fit(&fam, &data, 0).unwrap();
        let idem = idempotence_residual(&m, &x).unwrap();
        assert!(idem <= 1e-10, "{}: {idem}", fam.tag());
        let orth = residual_orthogonality(&m, &data).unwrap();
        assert!(orth <= 1e-9, "{}: {orth}", fam.tag());
        // Regressing the residual on the same features gives zero coefficients.
        let pred = m.predict_batch(&x);
        let r: Vec<f64> = y.iter().zip(&pred).map(|(a, b)| a - b).collect();
        let again = fit(&fam, &Dataset::new(&x, 1, &r, 1).unwrap(), 0).unwrap();
        let max = again.params().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(max <= 1e-10, "{}: {max}", fam.tag());
    }
    // A ridge penalty shrinks on every refit, so the spline is not a
    // projection; its penalized normal equations still hold after removing λDθ.
    let m = fit(&RegressionFamily::spline_ridge(10, 3, 10.0, 1.5), &data, 0).unwrap();
    assert!(residual_orthogonality(&m, &data).unwrap() <= 1e-9);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn fits_never_lose_to_the_zero_function(seed in 0u64..1000, n in 8usize..60) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = uniform(&mut rng, n, -3.0, 3.0);
        let y = uniform(&mut rng, n, -5.0, 5.0);
        let data = Dataset::new(&x, 1, &y, 1).unwrap();
        let zero = y.iter().map(|v| v * v).sum::<f64>() / n as f64;
        for fam in [RegressionFamily::linear(), RegressionFamily::polynomial(3), RegressionFamily::spline_ridge(6, 3, 10.0, 1.5)] {
            let m = fit(&fam, &data, 0).unwrap();
            prop_assert!(m.fit_mse() <= zero * (1.0 + 1e-12) + 1e-14);
        }
    }

    #[test]
    fn polynomial_residuals_are_orthogonal(seed in 0u64..1000, n in 10usize..80, deg in 1u32..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = uniform(&mut rng, n, -1.0, 1.0);
        let y = uniform(&mut rng, n, -1.0, 1.0);
        let data = Dataset::new(&x, 1, &y, 1).unwrap();
        let m = fit(&RegressionFamily::polynomial(deg), &data, 0).unwrap();
        prop_assert!(residual_orthogonality(&m, &data).unwrap() <= 1e-9);
    }
}
