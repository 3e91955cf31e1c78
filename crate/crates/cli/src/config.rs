//! Experiment configuration: preset defaults, TOML overrides and content
//! hashes.
//!
//! A config file is a partial TOML document. It is deep-merged into the
//! preset it names (tables merge key by key; a table whose `kind` or
//! `method` tag changes is replaced whole), then parsed strictly so that an
//! unknown key is rejected by name. Time-valued keys carry their unit in the
//! name (`delta_time`, `burn_in_time`, ...).

use std::collections::BTreeMap;
use std::path::Path;

use regmz::datamat::{AugmentationSpec, ObservableDict};
use regmz::dynamics::SystemSpec;
use regmz::predict::PredictionMode;
use regmz::regress::{FamilyKind, RegressionFamily};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::{Table, Value};

use crate::error::{config_err, Result};
use crate::presets;

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize, clap::ValueEnum,
)]
#[serde(rename_all = "snake_case")]
pub enum PresetName {
    Toy,
    Vdp,
    Lorenz63,
    Ks,
}

impl PresetName {
    pub fn as_str(self) -> &'static str {
        match self {
            PresetName::Toy => "toy",
            PresetName::Vdp => "vdp",
            PresetName::Lorenz63 => "lorenz63",
            PresetName::Ks => "ks",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    Paper,
    Desk,
}

impl Scale {
    pub fn as_str(self) -> &'static str {
        match self {
            Scale::Paper => "paper",
            Scale::Desk => "desk",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    /// Many short trajectories from a distribution of initial states.
    Ensemble,
    /// One long trajectory, windowed at learn time.
    Ergodic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialConfig {
    ShiftedBeta {
        shift: f64,
        alpha: f64,
        beta: f64,
    },
    /// Evenly spaced phases of the limit cycle reached from `seed_state`
    /// after `relax_time`.
    LimitCycle {
        seed_state: Vec<f64>,
        relax_time: f64,
    },
    Fixed {
        state: Vec<f64>,
    },
    KsTrainingField,
    KsTestField,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectorySet {
    pub initial: InitialConfig,
    pub n_trajectories: usize,
    /// Snapshots per trajectory (`K` for ensembles, the series length for
    /// ergodic data).
    pub n_snapshots: usize,
    pub burn_in_time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub sampling: Sampling,
    pub delta_time: f64,
    pub inner_time_step: f64,
    pub train: TrajectorySet,
    pub test: TrajectorySet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseChoice {
    #[default]
    Zero,
    /// Gaussian fitted to the order-0 residuals.
    GaussianOrder0,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub dictionary: ObservableDict,
    pub family: RegressionFamily,
    pub memory_length: usize,
    pub prediction_mode: PredictionMode,
    /// Output components scored by the evaluation; all when absent.
    #[serde(default)]
    pub eval_components: Option<Vec<usize>>,
    #[serde(default = "one")]
    pub delay_embedding: usize,
    #[serde(default)]
    pub augmentation: AugmentationSpec,
    #[serde(default = "one")]
    pub residual_stride: usize,
    #[serde(default)]
    pub noise: NoiseChoice,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationConfig {
    pub horizon_steps: usize,
    /// Initial histories; spaced uniformly along an ergodic test series, or
    /// the first trajectories of an ensemble test set.
    pub n_rollouts: usize,
    /// Ensemble test data: index of the last history snapshot.
    pub history_end_index: usize,
    /// Length of the long rollouts behind the long-time statistics; 0 skips them.
    pub long_rollout_steps: usize,
    pub n_long_rollouts: usize,
    pub terminal_window_steps: usize,
    pub kl_bins: usize,
    pub kl_smoothing: f64,
    pub histogram_bins: usize,
    /// 1-based step whose predicted fields give the power spectrum; 0 skips it.
    pub spectrum_step: usize,
    pub profile_threshold: f64,
    /// GFD checks run on the leading orders only; they refit the family.
    pub gfd_max_orders: usize,
    /// Also roll out with the Markov operator alone.
    pub markov_baseline: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub preset: PresetName,
    pub scale: Scale,
    pub seed: u64,
    pub system: SystemSpec,
    pub data: DataConfig,
    pub run_models: Vec<String>,
    pub models: BTreeMap<String, ModelConfig>,
    pub evaluation: EvaluationConfig,
}

/// Command-line values that take precedence over the config file.
#[derive(Debug, Clone, Copy, Default)]
pub struct Overrides {
    pub preset: Option<PresetName>,
    pub scale: Option<Scale>,
    pub seed: Option<u64>,
}

/// The preset named by `overrides` or the file, merged with the file.
pub fn resolve(file: Option<&Path>, overrides: Overrides) -> Result<ExperimentConfig> {
    let user: Table = match file {
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            toml::from_str(&text).map_err(|e| config_err(format!("{}: {e}", p.display())))?
        }
        None => Table::new(),
    };
    let file_preset = user
        .get("preset")
        .map(|v| PresetName::deserialize(v.clone()).map_err(|e| config_err(format!("preset: {e}"))))
        .transpose()?;
    let preset = match (overrides.preset, file_preset) {
        (Some(a), Some(b)) if a != b => {
            return Err(config_err(format!(
                "config file is for preset {}, not {}",
                b.as_str(),
                a.as_str()
            )))
        }
        (Some(p), _) | (None, Some(p)) => p,
        (None, None) => {
            return Err(config_err(
                "no preset given; set `preset` in the config file",
            ))
        }
    };
    let scale = match overrides.scale {
        Some(s) => s,
        None => user
            .get("scale")
            .map(|v| Scale::deserialize(v.clone()).map_err(|e| config_err(format!("scale: {e}"))))
            .transpose()?
            .unwrap_or(Scale::Desk),
    };
    let mut merged = match Value::try_from(presets::preset(preset, scale)) {
        Ok(Value::Table(t)) => t,
        _ => unreachable!("presets serialize to tables"),
    };
    merge(&mut merged, user);
    merged.insert("scale".into(), Value::String(scale.as_str().into()));
    if let Some(seed) = overrides.seed {
        let seed = i64::try_from(seed)
            .map_err(|_| config_err("seed must fit in a signed 64-bit integer"))?;
        merged.insert("seed".into(), Value::Integer(seed));
    }
    let cfg = ExperimentConfig::deserialize(Value::Table(merged))
        .map_err(|e| config_err(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) if same_variant(b, &o) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn same_variant(a: &Table, b: &Table) -> bool {
    ["kind", "method"]
        .iter()
        .all(|tag| match (a.get(*tag), b.get(*tag)) {
            (Some(Value::String(x)), Some(Value::String(y))) => x == y,
            _ => true,
        })
}

fn sha256_hex(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

impl ExperimentConfig {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> String {
        sha256_hex(&self.to_toml())
    }

    /// Hash of the part that determines the generated data.
    pub fn data_hash(&self) -> String {
        #[derive(Serialize)]
        struct DataIdentity<'a> {
            preset: PresetName,
            scale: Scale,
            seed: u64,
            system: &'a SystemSpec,
            data: &'a DataConfig,
        }
        let id = DataIdentity {
            preset: self.preset,
            scale: self.scale,
            seed: self.seed,
            system: &self.system,
            data: &self.data,
        };
        sha256_hex(&toml::to_string(&id).expect("data identity serializes"))
    }

    /// Stream seed derived from the experiment seed and a label.
    pub fn seed_for(&self, label: &str) -> u64 {
        let d = Sha256::digest(label.as_bytes());
        let mut b = [0u8; 8];
        b.copy_from_slice(&d[..8]);
        self.seed.wrapping_add(u64::from_le_bytes(b))
    }

    pub fn model(&self, tag: &str) -> Result<&ModelConfig> {
        self.models.get(tag).ok_or_else(|| {
            config_err(format!(
                "unknown model tag `{tag}` (known: {})",
                self.models.keys().cloned().collect::<Vec<_>>().join(", ")
            ))
        })
    }

    /// Provenance echoed into every output file.
    pub fn provenance(&self) -> BTreeMap<String, String> {
        BTreeMap::from([
            ("config_hash".to_string(), self.hash()),
            ("data_hash".to_string(), self.data_hash()),
            ("preset".to_string(), self.preset.as_str().to_string()),
            ("scale".to_string(), self.scale.as_str().to_string()),
            ("seed".to_string(), self.seed.to_string()),
        ])
    }

    pub fn validate(&self) -> Result<()> {
        self.system.validate()?;
        let d = &self.data;
        if !(d.delta_time > 0.0) || !(d.inner_time_step > 0.0) {
            return Err(config_err(
                "data.delta_time and data.inner_time_step must be positive",
            ));
        }
        for (name, set) in [("train", &d.train), ("test", &d.test)] {
            if set.n_trajectories == 0 || set.n_snapshots < 2 {
                return Err(config_err(format!(
                    "data.{name} needs trajectories with at least two snapshots"
                )));
            }
            if d.sampling == Sampling::Ergodic && set.n_trajectories != 1 {
                return Err(config_err(format!(
                    "data.{name}: ergodic sampling uses exactly one trajectory"
                )));
            }
        }
        if self.run_models.is_empty() {
            return Err(config_err("run_models is empty"));
        }
        let e = &self.evaluation;
        if e.horizon_steps < 2 || e.n_rollouts == 0 || e.kl_bins == 0 || e.histogram_bins == 0 {
            return Err(config_err(
                "evaluation needs a horizon of at least 2, rollouts and bins",
            ));
        }
        if e.long_rollout_steps > 0 && (e.n_long_rollouts == 0 || e.terminal_window_steps < 2) {
            return Err(config_err(
                "long rollouts need n_long_rollouts > 0 and a terminal window of at least 2",
            ));
        }
        if e.long_rollout_steps > 0 && e.terminal_window_steps > e.long_rollout_steps {
            return Err(config_err(
                "evaluation.terminal_window_steps exceeds long_rollout_steps",
            ));
        }
        for tag in &self.run_models {
            let m = self.model(tag)?;
            if m.memory_length == 0 || m.delay_embedding == 0 || m.residual_stride == 0 {
                return Err(config_err(format!(
                    "models.{tag}: memory_length, delay_embedding and residual_stride must be positive"
                )));
            }
            if m.prediction_mode == PredictionMode::LinearWithMemory
                && m.family.kind != FamilyKind::Linear
            {
                return Err(config_err(format!(
                    "models.{tag}: linear_with_memory prediction needs the linear family"
                )));
            }
            let coarse = matches!(m.dictionary, ObservableDict::CoarseGrid { .. });
            if (m.augmentation.shift || m.augmentation.reorder) && !coarse {
                return Err(config_err(format!(
                    "models.{tag}: augmentation needs a coarse_grid dictionary"
                )));
            }
            if d.sampling == Sampling::Ensemble
                && m.memory_length + m.delay_embedding > d.train.n_snapshots
            {
                return Err(config_err(format!(
                    "models.{tag}: memory_length + delay_embedding exceeds the {} training snapshots",
                    d.train.n_snapshots
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, text: &str) -> std::path::PathBuf {
        let p = dir.join("c.toml");
        std::fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn presets_resolve_and_hash_stably() {
        for p in [
            PresetName::Toy,
            PresetName::Vdp,
            PresetName::Lorenz63,
            PresetName::Ks,
        ] {
            for s in [Scale::Desk, Scale::Paper] {
                let ov = Overrides {
                    preset: Some(p),
                    scale: Some(s),
                    seed: None,
                };
                let a = resolve(None, ov).unwrap();
                // The written form re-resolves to the same config.
                let dir = tempfile::tempdir().unwrap();
                let b =
                    resolve(Some(&write(dir.path(), &a.to_toml())), Overrides::default()).unwrap();
                assert_eq!(a, b);
                assert_eq!(a.hash(), b.hash());
            }
        }
    }

    #[test]
    fn unknown_keys_are_named() {
        let dir = tempfile::tempdir().unwrap();
        for (text, key) in [
            ("preset = \"toy\"\nbogus = 1\n", "bogus"),
            (
                "preset = \"toy\"\n[evaluation]\nhorizon_step = 3\n",
                "horizon_step",
            ),
            (
                "preset = \"lorenz63\"\n[models.spline.family.kind]\nknots = 3\n",
                "knots",
            ),
            (
                "preset = \"toy\"\n[data.train.initial]\nshift = 0.5\nwidth = 2\n",
                "width",
            ),
        ] {
            let err = resolve(Some(&write(dir.path(), text)), Overrides::default()).unwrap_err();
            assert!(err.to_string().contains(key), "{err}");
        }
    }

    #[test]
    fn overrides_merge_into_the_preset() {
        let dir = tempfile::tempdir().unwrap();
        let text = "preset = \"ks\"\nrun_models = [\"cnn\"]\n[models.cnn]\nmemory_length = 4\n\
                    [models.cnn.family.trainer.optimizer]\nepochs = 3\n";
        let cfg = resolve(
            Some(&write(dir.path(), text)),
            Overrides {
                seed: Some(5),
                ..Default::default()
            },
        )
        .unwrap();
        let base = resolve(
            None,
            Overrides {
                preset: Some(PresetName::Ks),
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(cfg.seed, 5);
        assert_eq!(cfg.models["cnn"].memory_length, 4);
        assert_eq!(
            cfg.models["cnn"].family.kind,
            base.models["cnn"].family.kind
        );
        assert_ne!(cfg.hash(), base.hash());
        // Model settings do not touch the data identity.
        let plain = resolve(
            Some(&write(dir.path(), "preset = \"ks\"\n")),
            Overrides {
                seed: Some(5),
                ..Default::default()
            },
        );
        assert_eq!(cfg.data_hash(), plain.unwrap().data_hash());
        // Changing a tagged variant replaces the table instead of merging.
        let text = "preset = \"lorenz63\"\n[models.spline.family.kind]\nkind = \"polynomial\"\ndegree = 3\n";
        let cfg = resolve(Some(&write(dir.path(), text)), Overrides::default()).unwrap();
        assert_eq!(
            cfg.models["spline"].family.kind,
            FamilyKind::Polynomial { degree: 3 }
        );
    }

    #[test]
    fn conflicting_preset_and_bad_values_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "preset = \"toy\"\n");
        let ov = Overrides {
            preset: Some(PresetName::Ks),
            ..Default::default()
        };
        assert!(resolve(Some(&p), ov).is_err());
        assert!(resolve(None, Overrides::default()).is_err());
        let p = write(dir.path(), "preset = \"toy\"\nrun_models = [\"nope\"]\n");
        assert!(resolve(Some(&p), Overrides::default())
            .unwrap_err()
            .to_string()
            .contains("nope"));
    }
}
