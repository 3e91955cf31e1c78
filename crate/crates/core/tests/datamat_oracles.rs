use std::collections::BTreeMap;
use std::f64::consts::PI;

use proptest::prelude::*;
use regmz::datamat::*;
use regmz::dynamics::State;
use regmz::evalmod::power_spectrum;

#[test]
fn coarse_sine_keeps_its_low_mode_power() {
    let n = 128;
    let full: Vec<f64> = (0..n)
        .map(|i| (2.0 * PI * i as f64 / n as f64).sin())
        .collect();
    let coarse = coarse_grain(&[State::new(full.clone()).unwrap()], 4, 1).unwrap();
    assert_eq!(coarse[0].len(), 32);
    let p_full = power_spectrum(&full, n).unwrap();
    let p_coarse = power_spectrum(&coarse[0], 32).unwrap();
    // Subsampling sin(2πx/L) on 32 points: one-sided power 2·(32/2)² at k=1.
    assert!((p_coarse[1] - 2.0 * 16.0_f64.powi(2)).abs() <= 1e-9);
    // Same fraction of power as the full field (which is all at k=1).
    let frac = |p: &[f64]| p[1] / p.iter().sum::<f64>();
    assert!((frac(&p_full) - 1.0).abs() <= 1e-12);
    assert!((frac(&p_coarse) - 1.0).abs() <= 1e-12);
}

#[test]
fn constant_field_coarse_grains_to_copies() {
    let c = coarse_grain(&[State::new(vec![2.5; 128]).unwrap()], 4, 3).unwrap();
    assert_eq!(c[0], vec![2.5; 32]);
    assert!(coarse_grain(&[State::new(vec![0.0; 128]).unwrap()], 4, 4).is_err());
}

fn ks_like_parts(n_series: usize, len: usize, k: usize) -> Vec<DataMatrix> {
    let series: Vec<State> = (0..len)
        .map(|t| {
            State::new(
                (0..128)
                    .map(|x| ((x * 7 + t * 3) % 17) as f64 - 8.0 * (n_series as f64))
                    .collect(),
            )
            .unwrap()
        })
        .collect();
    (0..4)
        .map(|j| {
            build_ergodic(
                &series,
                &ObservableDict::CoarseGrid {
                    factor: 4,
                    offset: j,
                },
                1.0,
                k,
            )
            .unwrap()
        })
        .collect()
}

#[test]
fn shift_augmentation_samples_come_from_the_sub_grids() {
    let parts = ks_like_parts(1, 10, 3);
    let aug = augment(
        &parts,
        AugmentationSpec {
            shift: true,
            reorder: false,
        },
    )
    .unwrap();
    assert_eq!(aug.n_samples(), 4 * parts[0].n_samples());
    for i in 0..aug.n_samples() {
        let found = parts.iter().any(|p| {
            (0..p.n_samples()).any(|r| (0..3).all(|k| p.snapshot(r, k) == aug.snapshot(i, k)))
        });
        assert!(found, "sample {i} matches no sub-grid window");
    }
    let both = augment(
        &parts,
        AugmentationSpec {
            shift: true,
            reorder: true,
        },
    )
    .unwrap();
    assert_eq!(both.n_samples(), 4 * 32 * parts[0].n_samples());
}

#[test]
fn lag_zero_block_of_embedding_is_the_tail() {
    let values: Vec<f64> = (0..2 * 2 * 5).map(|v| v as f64).collect();
    let d = DataMatrix::from_dense(
        (2, 2, 5),
        0.1,
        &values,
        vec!["a".into(), "b".into()],
        Provenance::Ensemble,
    )
    .unwrap();
    let e = delay_embed(&d, 3).unwrap();
    assert_eq!(e.shape(), (2, 6, 3));
    for i in 0..2 {
        for k in 0..3 {
            let s = e.snapshot(i, k);
            assert_eq!(&s[..2], d.snapshot(i, k + 2).as_slice());
            assert_eq!(&s[2..4], d.snapshot(i, k + 1).as_slice());
            assert_eq!(&s[4..], d.snapshot(i, k).as_slice());
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn binary_files_round_trip(
        n in 1usize..6,
        m in 1usize..4,
        k in 2usize..6,
        delta in 1e-3f64..10.0,
        seed in proptest::collection::vec(-1e6f64..1e6, 1..8),
    ) {
        let values: Vec<f64> = (0..n * m * k).map(|i| seed[i % seed.len()] * (i as f64 + 0.5)).collect();
        let names = (0..m).map(|j| format!("obs{j}")).collect();
        let d = DataMatrix::from_dense((n, m, k), delta, &values, names, Provenance::Ergodic).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.mzdm");
        let mut info = BTreeMap::new();
        info.insert("config_hash".to_string(), "abc".to_string());
        d.save(&path, &info).unwrap();
        let (back, side) = DataMatrix::load(&path).unwrap();
        prop_assert_eq!(back.to_dense(), d.to_dense());
        prop_assert_eq!(back.delta().to_bits(), delta.to_bits());
        prop_assert_eq!(back.observable_names(), d.observable_names());
        prop_assert_eq!(back.provenance(), Provenance::Ergodic);
        prop_assert_eq!(side.info.get("config_hash").map(String::as_str), Some("abc"));
    }

    #[test]
    fn rotations_unrotate_to_originals(rot in 0usize..64) {
        let parts = ks_like_parts(1, 6, 2);
        let aug = augment(&parts[..1], AugmentationSpec { shift: false, reorder: true }).unwrap();
        let i = rot % aug.n_samples();
        let r = i % 32;
        let orig = i / 32;
        for k in 0..2 {
            let a = aug.snapshot(i, k);
            let o = parts[0].snapshot(orig, k);
            let back: Vec<f64> = (0..32).map(|x| a[(x + 32 - r) % 32]).collect();
            let fwd: Vec<f64> = (0..32).map(|x| a[(x + r) % 32]).collect();
            prop_assert!(back == o || fwd == o);
        }
    }
}
