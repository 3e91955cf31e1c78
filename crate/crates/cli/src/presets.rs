//! Built-in experiments: the logistic toy model, Van der Pol, Lorenz-63 and
//! Kuramoto–Sivashinsky.
//!
//! Desk scale shrinks sample counts and rollout lengths (toy N 10^5 → 10^4,
//! Lorenz snapshots 10^6 → 10^5, KS snapshots 10^5 → 10^4 and long rollouts
//! 15,000 → 3,000) and uses shorter Adam schedules; every other constant is
//! shared with paper scale.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use regmz::datamat::{AugmentationSpec, ObservableDict};
use regmz::dynamics::SystemSpec;
use regmz::predict::PredictionMode;
use regmz::regress::{Activation, AdamConfig, RegressionFamily};

use crate::config::*;

pub fn preset(name: PresetName, scale: Scale) -> ExperimentConfig {
    match name {
        PresetName::Toy => toy(scale),
        PresetName::Vdp => vdp(scale),
        PresetName::Lorenz63 => lorenz63(scale),
        PresetName::Ks => ks(scale),
    }
}

fn desk(scale: Scale) -> bool {
    scale == Scale::Desk
}

fn model(
    dictionary: ObservableDict,
    family: RegressionFamily,
    memory_length: usize,
    mode: PredictionMode,
) -> ModelConfig {
    ModelConfig {
        dictionary,
        family,
        memory_length,
        prediction_mode: mode,
        eval_components: None,
        delay_embedding: 1,
        augmentation: AugmentationSpec::default(),
        residual_stride: 1,
        noise: NoiseChoice::Zero,
    }
}

/// Linear propagation of `[1, φ, …, φ^degree]`, scored on `φ`.
fn mori(degree: u32, memory_length: usize) -> ModelConfig {
    ModelConfig {
        eval_components: Some(vec![1]),
        ..model(
            ObservableDict::monomials(degree, true),
            RegressionFamily::linear(),
            memory_length,
            PredictionMode::LinearWithMemory,
        )
    }
}

fn on_phi(family: RegressionFamily, memory_length: usize) -> ModelConfig {
    model(
        ObservableDict::RawComponents { indices: vec![0] },
        family,
        memory_length,
        PredictionMode::NonlinearWithMemory,
    )
}

fn evaluation(horizon_steps: usize, n_rollouts: usize) -> EvaluationConfig {
    EvaluationConfig {
        horizon_steps,
        n_rollouts,
        history_end_index: 0,
        long_rollout_steps: 0,
        n_long_rollouts: 0,
        terminal_window_steps: 150,
        kl_bins: 100,
        kl_smoothing: 1e-9,
        histogram_bins: 100,
        spectrum_step: 0,
        profile_threshold: 1e-7,
        gfd_max_orders: 1,
        markov_baseline: false,
    }
}

fn all(models: &BTreeMap<String, ModelConfig>) -> Vec<String> {
    models.keys().cloned().collect()
}

fn toy(scale: Scale) -> ExperimentConfig {
    let beta = InitialConfig::ShiftedBeta {
        shift: 0.5,
        alpha: 2.0,
        beta: 2.0,
    };
    let models = BTreeMap::from([
        ("mori2".to_string(), mori(2, 1)),
        (
            "poly2".to_string(),
            on_phi(RegressionFamily::polynomial(2), 1),
        ),
    ]);
    ExperimentConfig {
        preset: PresetName::Toy,
        scale,
        seed: 0,
        system: SystemSpec::ToyLogistic,
        data: DataConfig {
            sampling: Sampling::Ensemble,
            delta_time: 0.05,
            inner_time_step: 5e-4,
            train: TrajectorySet {
                initial: beta.clone(),
                n_trajectories: if desk(scale) { 10_000 } else { 100_000 },
                n_snapshots: 61,
                burn_in_time: 0.0,
            },
            test: TrajectorySet {
                initial: beta,
                n_trajectories: 1_000,
                n_snapshots: 61,
                burn_in_time: 0.0,
            },
        },
        run_models: all(&models),
        models,
        evaluation: evaluation(60, 1_000),
    }
}

fn vdp(scale: Scale) -> ExperimentConfig {
    let models = BTreeMap::from([
        ("mori1".to_string(), mori(1, 40)),
        ("mori5".to_string(), mori(5, 40)),
        (
            "poly5".to_string(),
            on_phi(RegressionFamily::polynomial(5), 40),
        ),
    ]);
    ExperimentConfig {
        preset: PresetName::Vdp,
        scale,
        seed: 0,
        system: SystemSpec::VanDerPol { mu: 1.0 },
        data: DataConfig {
            sampling: Sampling::Ensemble,
            delta_time: 0.5,
            inner_time_step: 5e-3,
            train: TrajectorySet {
                initial: InitialConfig::LimitCycle {
                    seed_state: vec![0.0, 1.0],
                    relax_time: 100.0,
                },
                n_trajectories: 50,
                n_snapshots: 41,
                burn_in_time: 0.0,
            },
            // t = 100..260; the history ends at t = 120.
            test: TrajectorySet {
                initial: InitialConfig::Fixed {
                    state: vec![1.0, 0.0],
                },
                n_trajectories: 1,
                n_snapshots: 321,
                burn_in_time: 100.0,
            },
        },
        run_models: all(&models),
        models,
        evaluation: EvaluationConfig {
            history_end_index: 40,
            gfd_max_orders: 3,
            ..evaluation(280, 1)
        },
    }
}

fn lorenz63(scale: Scale) -> ExperimentConfig {
    let (n_snapshots, n_rollouts, long) = if desk(scale) {
        (100_000, 500, 15_000)
    } else {
        (1_000_000, 2_500, 150_000)
    };
    let adam = if desk(scale) {
        AdamConfig {
            lr: 1e-2,
            epochs: 60,
            batch_size: 256,
            early_stop_patience: 10,
            max_samples: Some(20_000),
        }
    } else {
        AdamConfig::default()
    };
    let stride = |m: ModelConfig| ModelConfig {
        residual_stride: 1000,
        ..m
    };
    let models = BTreeMap::from([
        ("mori1".to_string(), stride(mori(1, 235))),
        ("mori5".to_string(), stride(mori(5, 469))),
        (
            "poly5".to_string(),
            stride(on_phi(RegressionFamily::polynomial(5), 469)),
        ),
        (
            "spline".to_string(),
            stride(on_phi(
                RegressionFamily::spline_ridge(10, 3, 10.0, 1.5),
                469,
            )),
        ),
        (
            "mlp".to_string(),
            stride(on_phi(
                RegressionFamily::mlp(vec![5, 5], Activation::Tanh).with_adam(adam),
                469,
            )),
        ),
    ]);
    let set = |state: Vec<f64>| TrajectorySet {
        initial: InitialConfig::Fixed { state },
        n_trajectories: 1,
        n_snapshots,
        burn_in_time: 1000.0,
    };
    ExperimentConfig {
        preset: PresetName::Lorenz63,
        scale,
        seed: 0,
        system: SystemSpec::lorenz63_classic(),
        data: DataConfig {
            sampling: Sampling::Ergodic,
            delta_time: 0.01,
            inner_time_step: 1e-4,
            train: set(vec![0.01, 1.0, 10.0]),
            test: set(vec![0.0, 1.0, 2.0]),
        },
        run_models: all(&models),
        models,
        evaluation: EvaluationConfig {
            long_rollout_steps: long,
            n_long_rollouts: 10,
            gfd_max_orders: 2,
            markov_baseline: true,
            ..evaluation(300, n_rollouts)
        },
    }
}

fn ks(scale: Scale) -> ExperimentConfig {
    let (n_snapshots, n_rollouts, long) = if desk(scale) {
        (10_000, 3_000, 3_000)
    } else {
        (100_000, 15_000, 15_000)
    };
    let adam = if desk(scale) {
        AdamConfig {
            lr: 3e-3,
            epochs: 40,
            batch_size: 256,
            early_stop_patience: 10,
            max_samples: Some(40_000),
        }
    } else {
        AdamConfig::default()
    };
    let coarse = ObservableDict::CoarseGrid {
        factor: 4,
        offset: 0,
    };
    let shift = AugmentationSpec {
        shift: true,
        reorder: false,
    };
    let both = AugmentationSpec {
        shift: true,
        reorder: true,
    };
    let nonlinear = |family: RegressionFamily, augmentation, delay_embedding| ModelConfig {
        augmentation,
        delay_embedding,
        ..model(
            coarse.clone(),
            family.with_adam(adam.clone()),
            10,
            PredictionMode::NonlinearWithMemory,
        )
    };
    let models = BTreeMap::from([
        (
            "mori_dem".to_string(),
            ModelConfig {
                // 32 rotations of a 320-wide embedding do not fit desk memory.
                augmentation: if desk(scale) { shift } else { both },
                delay_embedding: 10,
                ..model(
                    coarse.clone(),
                    RegressionFamily::linear(),
                    10,
                    PredictionMode::LinearWithMemory,
                )
            },
        ),
        (
            "fcnn".to_string(),
            nonlinear(
                RegressionFamily::mlp(vec![32, 32], Activation::Tanh),
                both,
                1,
            ),
        ),
        (
            "cnn".to_string(),
            nonlinear(RegressionFamily::conv1d(2, 5, 11, true), shift, 1),
        ),
        (
            "cnn_dem".to_string(),
            nonlinear(RegressionFamily::conv1d(2, 5, 11, true), shift, 4),
        ),
    ]);
    let length = 16.0 * PI;
    let set = |initial| TrajectorySet {
        initial,
        n_trajectories: 1,
        n_snapshots,
        burn_in_time: 500.0,
    };
    ExperimentConfig {
        preset: PresetName::Ks,
        scale,
        seed: 0,
        system: SystemSpec::KuramotoSivashinsky {
            length,
            n_grid: 128,
        },
        data: DataConfig {
            sampling: Sampling::Ergodic,
            delta_time: 1.0,
            inner_time_step: 1e-3,
            train: set(InitialConfig::KsTrainingField),
            test: set(InitialConfig::KsTestField),
        },
        run_models: all(&models),
        models,
        evaluation: EvaluationConfig {
            long_rollout_steps: long,
            n_long_rollouts: 1,
            spectrum_step: 100,
            markov_baseline: true,
            ..evaluation(100, n_rollouts)
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use regmz::regress::FamilyKind;

    #[test]
    fn named_architectures() {
        let l = preset(PresetName::Lorenz63, Scale::Paper);
        assert_eq!(
            l.models["spline"].family.kind,
            FamilyKind::SplineRidge {
                n_knots: 10,
                degree: 3,
                lambda: 10.0,
                knot_range_factor: 1.5
            }
        );
        assert_eq!(l.data.train.n_snapshots, 1_000_000);
        let k = preset(PresetName::Ks, Scale::Desk);
        assert_eq!(
            k.models["cnn"].family.kind,
            FamilyKind::Conv1d {
                n_layers: 2,
                channels: 5,
                kernel_size: 11,
                circular: true,
                activation: Activation::Tanh
            }
        );
        assert!(k.models["cnn"].augmentation.shift && !k.models["cnn"].augmentation.reorder);
        let t = preset(PresetName::Toy, Scale::Desk);
        assert_eq!(
            (t.data.train.n_trajectories, t.data.train.n_snapshots),
            (10_000, 61)
        );
    }

    #[test]
    fn desk_scale_keeps_algorithmic_constants() {
        for name in [
            PresetName::Toy,
            PresetName::Vdp,
            PresetName::Lorenz63,
            PresetName::Ks,
        ] {
            let (p, d) = (preset(name, Scale::Paper), preset(name, Scale::Desk));
            assert_eq!(p.system, d.system);
            assert_eq!(p.data.delta_time, d.data.delta_time);
            assert_eq!(p.data.inner_time_step, d.data.inner_time_step);
            assert_eq!(p.evaluation.horizon_steps, d.evaluation.horizon_steps);
            assert_eq!(
                p.evaluation.profile_threshold,
                d.evaluation.profile_threshold
            );
            for (tag, m) in &p.models {
                let dm = &d.models[tag];
                assert_eq!(m.family.kind, dm.family.kind, "{tag}");
                assert_eq!(m.dictionary, dm.dictionary, "{tag}");
                assert_eq!(m.memory_length, dm.memory_length, "{tag}");
                assert_eq!(m.delay_embedding, dm.delay_embedding, "{tag}");
            }
        }
    }
}
