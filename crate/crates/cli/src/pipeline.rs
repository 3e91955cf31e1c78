//! The experiment stages behind the subcommands.
//!
//! Layout of a run directory:
//!
//! ```text
//! config.toml                       resolved configuration
//! data/{train,test}_<dict>.mzdm     snapshot matrices, one per dictionary
//! models/<tag>/                     operators, residuals, diagnostics.csv
//! predictions/<tag>/                rollouts, truths, divergence log
//! eval/<preset>_<tag>_*.csv         metric tables and summaries
//! summary.toml                      per-model scalars
//! ```
//!
//! Ergodic data is stored as whole series (one row per series, `K` = series
//! length) and re-windowed for the memory length at learn time.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::Instant;

use log::{info, warn};
use rayon::prelude::*;
use regmz::datamat::{
    augment, build_data_matrix, build_ergodic, delay_embed, rewindow, AugmentationSpec, DataMatrix,
    ObservableDict, Provenance, SeriesView, Window,
};
use regmz::dynamics::{
    ks_test_field, ks_training_field, sample_initial, simulate, trace_limit_cycle,
    InitialDistribution, State, SystemSpec, TrajectoryConfig,
};
use regmz::evalmod::{
    histogram_on, kl_divergence, mse_vs_horizon, per_rollout_sq_error, power_spectrum, BatchShape,
    EvalReport,
};
use regmz::mzlearn::{
    extract_operators, gfd_check, memory_norm_profile, select_memory_length, ExtractOptions,
    GfdOrder, MZModel, PairingMode,
};
use regmz::predict::{
    fit_gaussian_noise, rollout, write_csv, History, NoiseModel, PredictionConfig, PredictionMode,
    Rollout,
};
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, InitialConfig, ModelConfig, NoiseChoice, Sampling};
use crate::error::{config_err, CliError, Result};

/// Worker pool sized by `MZ_THREADS` (default: all cores).
fn pool() -> &'static rayon::ThreadPool {
    static POOL: OnceLock<rayon::ThreadPool> = OnceLock::new();
    POOL.get_or_init(|| {
        let n = std::env::var("MZ_THREADS")
            .ok()
            .and_then(|v| v.parse::<usize>().ok())
            .filter(|&n| n > 0)
            .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .expect("thread pool")
    })
}

/// Order-preserving parallel map.
fn par_map<T: Sync, R: Send>(items: &[T], f: impl Fn(usize, &T) -> R + Sync + Send) -> Vec<R> {
    pool().install(|| items.par_iter().enumerate().map(|(i, x)| f(i, x)).collect())
}

fn prepare_out(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() && std::fs::read_dir(dir)?.next().is_some() && !force {
        return Err(CliError::OutputExists(dir.to_path_buf()));
    }
    std::fs::create_dir_all(dir)?;
    Ok(())
}

fn check_hash(
    path: &Path,
    info: &BTreeMap<String, String>,
    key: &str,
    expected: &str,
    force: bool,
) -> Result<()> {
    let found = info.get(key).map_or("missing", String::as_str);
    if found == expected {
        return Ok(());
    }
    if force {
        warn!("{}: {key} mismatch ignored (--force)", path.display());
        return Ok(());
    }
    Err(CliError::HashMismatch {
        path: path.to_path_buf(),
        key: key.to_string(),
        expected: expected.to_string(),
        found: found.to_string(),
    })
}

fn load_matrix(path: &Path, key: &str, expected: &str, force: bool) -> Result<DataMatrix> {
    if !path.exists() {
        return Err(CliError::Missing(format!("{} not found", path.display())));
    }
    let (d, side) = DataMatrix::load(path)?;
    check_hash(path, &side.info, key, expected, force)?;
    Ok(d)
}

fn hash_comment(cfg: &ExperimentConfig) -> String {
    format!("# config_hash={}\n", cfg.hash())
}

/// File stem for the data of a dictionary. Coarse grids store every
/// sub-grid offset, so the stem ignores the offset.
pub fn dict_stem(d: &ObservableDict) -> String {
    match d {
        ObservableDict::Monomials {
            max_degree,
            include_constant,
            component,
        } => format!(
            "mono{max_degree}{}_x{component}",
            if *include_constant { "c" } else { "" }
        ),
        ObservableDict::RawComponents { indices } => {
            let idx: Vec<String> = indices.iter().map(|i| i.to_string()).collect();
            format!("raw_{}", idx.join("_"))
        }
        ObservableDict::CoarseGrid { factor, .. } => format!("coarse{factor}"),
    }
}

fn dictionaries(cfg: &ExperimentConfig) -> Result<BTreeMap<String, ObservableDict>> {
    let mut out = BTreeMap::new();
    for tag in &cfg.run_models {
        let d = &cfg.model(tag)?.dictionary;
        out.insert(dict_stem(d), d.clone());
    }
    Ok(out)
}

fn initial_states(
    cfg: &ExperimentConfig,
    init: &InitialConfig,
    n: usize,
    seed: u64,
) -> Result<Vec<State>> {
    let ks_dims = || match cfg.system {
        SystemSpec::KuramotoSivashinsky { length, n_grid } => Ok((length, n_grid)),
        _ => Err(config_err(
            "KS initial fields need the kuramoto_sivashinsky system",
        )),
    };
    Ok(match init {
        InitialConfig::ShiftedBeta { shift, alpha, beta } => sample_initial(
            &InitialDistribution::ShiftedBeta {
                shift: *shift,
                alpha: *alpha,
                beta: *beta,
            },
            n,
            seed,
        )?,
        InitialConfig::LimitCycle {
            seed_state,
            relax_time,
        } => {
            let x0 = State::new(seed_state.clone())?;
            let cycle =
                trace_limit_cycle(&cfg.system, &x0, *relax_time, cfg.data.inner_time_step, 1)?;
            sample_initial(&InitialDistribution::LimitCycle(cycle), n, seed)?
        }
        InitialConfig::Fixed { state } => vec![State::new(state.clone())?; n],
        InitialConfig::KsTrainingField => {
            let (l, g) = ks_dims()?;
            vec![ks_training_field(l, g); n]
        }
        InitialConfig::KsTestField => {
            let (l, g) = ks_dims()?;
            vec![ks_test_field(l, g); n]
        }
    })
}

fn build_matrix(
    cfg: &ExperimentConfig,
    trajs: &[Vec<State>],
    dict: &ObservableDict,
) -> Result<DataMatrix> {
    let delta = cfg.data.delta_time;
    let one = |dict: &ObservableDict| match cfg.data.sampling {
        Sampling::Ensemble => build_data_matrix(trajs, dict, delta),
        Sampling::Ergodic => build_ergodic(&trajs[0], dict, delta, trajs[0].len()),
    };
    Ok(match dict {
        ObservableDict::CoarseGrid { factor, .. } => {
            let parts = (0..*factor)
                .map(|offset| {
                    one(&ObservableDict::CoarseGrid {
                        factor: *factor,
                        offset,
                    })
                })
                .collect::<regmz::Result<Vec<_>>>()?;
            augment(
                &parts,
                AugmentationSpec {
                    shift: true,
                    reorder: false,
                },
            )?
        }
        _ => one(dict)?,
    })
}

/// Simulates the training and test sets and writes one matrix per
/// dictionary used by the selected models.
pub fn generate(cfg: &ExperimentConfig, out: &Path, force: bool) -> Result<()> {
    prepare_out(out, force)?;
    std::fs::write(out.join("config.toml"), hash_comment(cfg) + &cfg.to_toml())?;
    let dicts = dictionaries(cfg)?;
    for (role, set) in [("train", &cfg.data.train), ("test", &cfg.data.test)] {
        let t = Instant::now();
        let seed = cfg.seed_for(role);
        let x0 = initial_states(cfg, &set.initial, set.n_trajectories, seed)?;
        let tc = TrajectoryConfig {
            sample_interval: cfg.data.delta_time,
            n_snapshots: set.n_snapshots,
            burn_in: set.burn_in_time,
            inner_dt: cfg.data.inner_time_step,
            seed,
        };
        let trajs = par_map(&x0, |_, x| simulate(&cfg.system, &tc, x))
            .into_iter()
            .collect::<regmz::Result<Vec<_>>>()?;
        info!(
            "{role}: {} trajectories of {} snapshots in {:.1?}",
            trajs.len(),
            set.n_snapshots,
            t.elapsed()
        );
        for (stem, dict) in &dicts {
            let d = build_matrix(cfg, &trajs, dict)?;
            let mut meta = cfg.provenance();
            meta.insert("role".into(), role.into());
            meta.insert("dictionary".into(), stem.clone());
            d.save(&out.join(format!("{role}_{stem}.mzdm")), &meta)?;
        }
    }
    Ok(())
}

/// The samples of the model's own sub-grid (all of them for other
/// dictionaries).
fn select_offset(mc: &ModelConfig, d: &DataMatrix) -> Result<DataMatrix> {
    match mc.dictionary {
        ObservableDict::CoarseGrid { factor, offset } => {
            let per = d.n_samples() / factor;
            let idx: Vec<usize> = (offset * per..(offset + 1) * per).collect();
            Ok(d.select_samples(&idx)?)
        }
        _ => Ok(d.clone()),
    }
}

fn training_matrix(mc: &ModelConfig, d: &DataMatrix, h: usize) -> Result<DataMatrix> {
    let e = mc.delay_embedding;
    let mut d = if mc.augmentation.shift {
        d.clone()
    } else {
        select_offset(mc, d)?
    };
    match d.provenance() {
        Provenance::Ergodic => d = rewindow(&d, h + e)?,
        Provenance::Ensemble => {
            if d.n_times() < h + e {
                return Err(config_err(format!(
                    "H = {h} with embedding {e} needs {} snapshots per trajectory, data has {}",
                    h + e,
                    d.n_times()
                )));
            }
        }
    }
    if e > 1 {
        d = delay_embed(&d, e)?;
    }
    if mc.augmentation.reorder {
        d = augment(
            &[d],
            AugmentationSpec {
                shift: false,
                reorder: true,
            },
        )?;
    }
    Ok(d)
}

/// Every snapshot of every series as its own sample (`K = 2`).
fn all_snapshots(d: &DataMatrix) -> Result<DataMatrix> {
    let view = d.series_view();
    let windows = (0..view.series.len())
        .flat_map(|s| {
            (0..view.len_of(s) - 1).map(move |start| Window {
                series: s,
                start,
                rotation: 0,
            })
        })
        .collect();
    Ok(DataMatrix::from_series(
        view.m,
        2,
        d.delta(),
        view.series,
        windows,
        d.observable_names().to_vec(),
        d.provenance(),
    )?)
}

fn single_component(mc: &ModelConfig) -> Option<usize> {
    match mc.eval_components.as_deref() {
        Some([c]) => Some(*c),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LearnOutcome {
    pub tag: String,
    pub memory_length: usize,
    /// Mean squared norm of `Ω^ℓ(g)` over the test snapshots, per lag.
    pub profile: Vec<f64>,
    /// Smallest `H` with every later profile value below the threshold.
    pub selected_memory_length: usize,
    pub profile_first_below: Option<usize>,
}

/// Extracts the operators of model `tag` and writes them with diagnostics.
pub fn learn(
    cfg: &ExperimentConfig,
    data_dir: &Path,
    tag: &str,
    memory_length: Option<usize>,
    out: &Path,
    force: bool,
) -> Result<LearnOutcome> {
    let mc = cfg.model(tag)?;
    let h = memory_length.unwrap_or(mc.memory_length);
    if h == 0 {
        return Err(config_err("memory length must be at least 1"));
    }
    prepare_out(out, force)?;
    let stem = dict_stem(&mc.dictionary);
    let data_hash = cfg.data_hash();
    let train = load_matrix(
        &data_dir.join(format!("train_{stem}.mzdm")),
        "data_hash",
        &data_hash,
        force,
    )?;
    let d = training_matrix(mc, &train, h)?;
    let t = Instant::now();
    let mut opts = ExtractOptions::new(
        h,
        PairingMode::default_for(d.provenance()),
        cfg.seed_for(tag),
    );
    opts.residual_stride = mc.residual_stride;
    let model = extract_operators(&d, &mc.family, &opts)?;
    info!(
        "{tag}: {} operators from {} samples in {:.1?}",
        h,
        d.n_samples(),
        t.elapsed()
    );

    let test = load_matrix(
        &data_dir.join(format!("test_{stem}.mzdm")),
        "data_hash",
        &data_hash,
        force,
    )?;
    let mut test = select_offset(mc, &test)?;
    if mc.delay_embedding > 1 {
        test = delay_embed(&test, mc.delay_embedding)?;
    }
    let profile = memory_norm_profile(&model, &all_snapshots(&test)?, single_component(mc))?;
    let n_gfd = cfg.evaluation.gfd_max_orders.min(h);
    let gfd = if n_gfd > 0 {
        gfd_check(&model.truncated(n_gfd)?, &d)?
    } else {
        Vec::new()
    };
    let threshold = cfg.evaluation.profile_threshold;
    let outcome = LearnOutcome {
        tag: tag.to_string(),
        memory_length: h,
        selected_memory_length: select_memory_length(&profile, threshold),
        profile_first_below: profile.iter().position(|&v| v < threshold),
        profile,
    };
    let mut meta = cfg.provenance();
    meta.insert("tag".into(), tag.into());
    meta.insert(
        "selected_memory_length".into(),
        outcome.selected_memory_length.to_string(),
    );
    meta.insert(
        "profile_first_below".into(),
        outcome
            .profile_first_below
            .map_or("none".into(), |v| v.to_string()),
    );
    model.save(out, &meta)?;
    write_diagnostics(
        &out.join("diagnostics.csv"),
        cfg,
        &model,
        &outcome.profile,
        &gfd,
    )?;
    Ok(outcome)
}

fn write_diagnostics(
    path: &Path,
    cfg: &ExperimentConfig,
    model: &MZModel,
    profile: &[f64],
    gfd: &[GfdOrder],
) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(w, "{}", hash_comment(cfg))?;
    writeln!(
        w,
        "order,n_samples,fit_mse,validation_mse,profile,gfd_projected_rms,gfd_residual_rms,gfd_replay_rms"
    )?;
    let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
    for (n, dg) in model.diagnostics().iter().enumerate() {
        let g = gfd.get(n);
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            dg.order,
            dg.n_samples,
            dg.fit_mse,
            opt(dg.validation_mse),
            profile[n],
            opt(g.map(|g| g.projected_rms)),
            opt(g.map(|g| g.residual_rms)),
            opt(g.map(|g| g.replay_rms)),
        )?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictSummary {
    pub config_hash: String,
    pub tag: String,
    pub mode: PredictionMode,
    pub memory_length: usize,
    pub n_rollouts: usize,
    pub n_diverged: usize,
    pub n_long: usize,
    pub n_long_diverged: usize,
    pub n_markov_diverged: usize,
}

impl PredictSummary {
    pub fn diverged(&self) -> usize {
        self.n_diverged + self.n_long_diverged + self.n_markov_diverged
    }
}

/// Last history index of each rollout: `(series, end)`.
fn history_ends(
    cfg: &ExperimentConfig,
    view: &SeriesView,
    hist_len: usize,
    horizon: usize,
    n: usize,
) -> Result<Vec<(usize, usize)>> {
    match cfg.data.sampling {
        Sampling::Ergodic => {
            let len = view.len_of(0);
            if len < hist_len + horizon {
                return Err(config_err(format!(
                    "test series of {len} snapshots is too short for history {hist_len} and horizon {horizon}"
                )));
            }
            let (lo, hi) = (hist_len - 1, len - 1 - horizon);
            Ok((0..n)
                .map(|i| {
                    (
                        0,
                        if n == 1 {
                            lo
                        } else {
                            lo + (hi - lo) * i / (n - 1)
                        },
                    )
                })
                .collect())
        }
        Sampling::Ensemble => {
            let end = cfg.evaluation.history_end_index;
            let len = view.len_of(0);
            if end + horizon >= len {
                return Err(config_err(format!(
                    "history end {end} plus horizon {horizon} exceeds the {len} test snapshots"
                )));
            }
            Ok((0..n.min(view.series.len())).map(|s| (s, end)).collect())
        }
    }
}

struct RolloutSet {
    ends: Vec<(usize, usize)>,
    rollouts: Vec<Rollout>,
}

impl RolloutSet {
    fn kept(&self) -> Vec<usize> {
        (0..self.rollouts.len())
            .filter(|&b| self.rollouts[b].diverged_at.is_none())
            .collect()
    }
}

struct Roller<'a> {
    model: &'a MZModel,
    view: &'a SeriesView,
    hist_len: usize,
    noise: NoiseModel,
    seed: u64,
}

impl Roller<'_> {
    fn run(
        &self,
        ends: Vec<(usize, usize)>,
        horizon: usize,
        mode: PredictionMode,
    ) -> Result<RolloutSet> {
        let m = self.view.m;
        let rollouts = par_map(&ends, |i, &(s, end)| {
            let first = (end + 1).saturating_sub(self.hist_len);
            let hist =
                History::from_rows(self.view.series[s][first * m..(end + 1) * m].to_vec(), m)?;
            let mut pc = PredictionConfig::new(mode, horizon, self.model.h());
            pc.noise = self.noise.clone();
            pc.seed = self.seed.wrapping_add(i as u64);
            rollout(self.model, &hist, &pc)
        })
        .into_iter()
        .collect::<regmz::Result<Vec<_>>>()?;
        Ok(RolloutSet { ends, rollouts })
    }
}

struct SetWriter<'a> {
    cfg: &'a ExperimentConfig,
    view: &'a SeriesView,
    comps: &'a [usize],
    names: Vec<String>,
    divergence: Vec<String>,
}

impl SetWriter<'_> {
    fn time(&self, index: usize) -> f64 {
        self.cfg.data.test.burn_in_time + index as f64 * self.cfg.data.delta_time
    }

    fn pick(&self, values: &[f64], m: usize) -> Vec<f64> {
        values
            .chunks(m)
            .flat_map(|row| self.comps.iter().map(move |&c| row[c]))
            .collect()
    }

    fn write_partial(&self, path: &Path, r: &Rollout, end: usize) -> Result<()> {
        let rows = self.pick(&r.values, r.m);
        let times: Vec<f64> = (0..r.steps()).map(|k| self.time(end + 1 + k)).collect();
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        write!(w, "{}", hash_comment(self.cfg))?;
        write_csv(&mut w, &times, &self.names, &rows)?;
        w.flush()?;
        Ok(())
    }

    /// `(B, comps, steps)` tensor from kept rollouts (`(b, j, k)` order).
    fn tensor(
        &self,
        kept: &[usize],
        steps: usize,
        value: impl Fn(usize, usize, usize) -> f64,
    ) -> Result<DataMatrix> {
        let nc = self.comps.len();
        let mut v = vec![0.0; kept.len() * nc * steps];
        for (i, &b) in kept.iter().enumerate() {
            for j in 0..nc {
                for k in 0..steps {
                    v[(i * nc + j) * steps + k] = value(b, j, k);
                }
            }
        }
        Ok(DataMatrix::from_dense(
            (kept.len(), nc, steps),
            self.cfg.data.delta_time,
            &v,
            self.names.clone(),
            Provenance::Ensemble,
        )?)
    }

    /// Writes `<name>.mzdm` (and `<name>_truth.mzdm`) for the rollouts that
    /// stayed finite, and a partial CSV for each one that did not.
    fn write(
        &mut self,
        dir: &Path,
        name: &str,
        set: &RolloutSet,
        steps: usize,
        truth: bool,
    ) -> Result<usize> {
        let meta = self.cfg.provenance();
        let kept = set.kept();
        for (b, r) in set.rollouts.iter().enumerate() {
            if let Some(step) = r.diverged_at {
                let (s, end) = set.ends[b];
                self.divergence.push(format!("{name},{b},{s},{end},{step}"));
                self.write_partial(&dir.join(format!("partial_{name}_{b}.csv")), r, end)?;
            }
        }
        if !kept.is_empty() {
            let m = self.view.m;
            let comps = self.comps;
            let pred = self.tensor(&kept, steps, |b, j, k| {
                set.rollouts[b].values[k * m + comps[j]]
            })?;
            pred.save(&dir.join(format!("{name}.mzdm")), &meta)?;
            if truth {
                let t = self.tensor(&kept, steps, |b, j, k| {
                    let (s, end) = set.ends[b];
                    self.view.snapshot(s, end + 1 + k)[comps[j]]
                })?;
                t.save(&dir.join(format!("{name}_truth.mzdm")), &meta)?;
            }
        }
        Ok(set.rollouts.len() - kept.len())
    }
}

/// Rolls out model predictions from histories along the test data.
///
/// Writes `pred.mzdm`/`pred_truth.mzdm` (evaluation horizon),
/// `long.mzdm` (long-time statistics), `markov_pred*.mzdm` (Markov-only
/// baseline), `reference.mzdm` (test data of the scored components),
/// `trajectory.csv` for the first history, and `divergence.csv` plus
/// `partial_*.csv` for rollouts that crossed the blow-up threshold.
pub fn predict(
    cfg: &ExperimentConfig,
    data_dir: &Path,
    model_dir: &Path,
    out: &Path,
    markov_only: bool,
    force: bool,
) -> Result<PredictSummary> {
    let (model, meta) = MZModel::load(model_dir)?;
    check_hash(model_dir, &meta, "config_hash", &cfg.hash(), force)?;
    let tag = meta
        .get("tag")
        .ok_or_else(|| CliError::Missing(format!("{}: model has no tag", model_dir.display())))?
        .clone();
    let mc = cfg.model(&tag)?;
    prepare_out(out, force)?;
    let stem = dict_stem(&mc.dictionary);
    let test = load_matrix(
        &data_dir.join(format!("test_{stem}.mzdm")),
        "data_hash",
        &cfg.data_hash(),
        force,
    )?;
    let test = select_offset(mc, &test)?;
    let view = test.series_view();
    let m = model.output_dim();
    if view.m != m || model.input_dim() != m * mc.delay_embedding {
        return Err(config_err(format!(
            "model {tag} maps {} -> {} observables, test data has {}",
            model.input_dim(),
            m,
            view.m
        )));
    }
    let comps: Vec<usize> = mc
        .eval_components
        .clone()
        .unwrap_or_else(|| (0..m).collect());
    if comps.is_empty() || comps.iter().any(|&c| c >= m) {
        return Err(config_err(format!(
            "models.{tag}.eval_components out of range for {m} observables"
        )));
    }
    let ev = &cfg.evaluation;
    let mode = if markov_only {
        PredictionMode::MarkovOnly
    } else {
        mc.prediction_mode
    };
    let roller = Roller {
        model: &model,
        view: &view,
        hist_len: model.h() + mc.delay_embedding - 1,
        noise: match mc.noise {
            NoiseChoice::Zero => NoiseModel::Zero,
            NoiseChoice::GaussianOrder0 => fit_gaussian_noise(model.residuals(0), m)?,
        },
        seed: cfg.seed_for("noise"),
    };
    let mut writer = SetWriter {
        cfg,
        view: &view,
        comps: &comps,
        names: comps
            .iter()
            .map(|&c| test.observable_names()[c].clone())
            .collect(),
        divergence: Vec::new(),
    };

    let t = Instant::now();
    let ends = history_ends(cfg, &view, roller.hist_len, ev.horizon_steps, ev.n_rollouts)?;
    let main = roller.run(ends, ev.horizon_steps, mode)?;
    let n_diverged = writer.write(out, "pred", &main, ev.horizon_steps, true)?;
    let (first_end, first) = (main.ends[0].1, &main.rollouts[0]);
    writer.write_partial(&out.join("trajectory.csv"), first, first_end)?;
    info!(
        "{tag}: {} rollouts of {} steps in {:.1?}",
        main.rollouts.len(),
        ev.horizon_steps,
        t.elapsed()
    );

    let mut n_markov_diverged = 0;
    if ev.markov_baseline && !markov_only {
        let markov = roller.run(
            main.ends.clone(),
            ev.horizon_steps,
            PredictionMode::MarkovOnly,
        )?;
        n_markov_diverged = writer.write(out, "markov_pred", &markov, ev.horizon_steps, true)?;
    }

    let (mut n_long, mut n_long_diverged) = (0, 0);
    if ev.long_rollout_steps > 0 {
        let t = Instant::now();
        let ends = match cfg.data.sampling {
            Sampling::Ergodic => {
                let (lo, hi) = (roller.hist_len - 1, view.len_of(0) - 1);
                let n = ev.n_long_rollouts;
                (0..n)
                    .map(|i| {
                        (
                            0,
                            if n == 1 {
                                lo
                            } else {
                                lo + (hi - lo) * i / (n - 1)
                            },
                        )
                    })
                    .collect()
            }
            Sampling::Ensemble => (0..ev.n_long_rollouts.min(view.series.len()))
                .map(|s| (s, ev.history_end_index))
                .collect(),
        };
        let long = roller.run(ends, ev.long_rollout_steps, mode)?;
        n_long = long.rollouts.len();
        n_long_diverged = writer.write(out, "long", &long, ev.long_rollout_steps, false)?;
        info!(
            "{tag}: {n_long} long rollouts of {} steps in {:.1?}",
            ev.long_rollout_steps,
            t.elapsed()
        );
    }

    let series: Vec<usize> = (0..view.series.len()).collect();
    let len = view.len_of(0);
    let reference = writer.tensor(&series, len, |s, j, k| view.snapshot(s, k)[comps[j]])?;
    reference.save(&out.join("reference.mzdm"), &cfg.provenance())?;

    let mut w = std::io::BufWriter::new(std::fs::File::create(out.join("divergence.csv"))?);
    write!(w, "{}", hash_comment(cfg))?;
    writeln!(w, "set,rollout,series,history_end,diverged_at_step")?;
    for line in &writer.divergence {
        writeln!(w, "{line}")?;
    }
    w.flush()?;

    let summary = PredictSummary {
        config_hash: cfg.hash(),
        tag,
        mode,
        memory_length: model.h(),
        n_rollouts: main.rollouts.len(),
        n_diverged,
        n_long,
        n_long_diverged,
        n_markov_diverged,
    };
    std::fs::write(
        out.join("predict_summary.toml"),
        toml::to_string(&summary).map_err(|e| config_err(e.to_string()))?,
    )?;
    Ok(summary)
}

/// Rollout-major `B × steps × dim` arrays from `(b, j, k)` matrices.
fn batch(pred: &DataMatrix, truth: &DataMatrix) -> Result<(BatchShape, Vec<f64>, Vec<f64>)> {
    if pred.shape() != truth.shape() {
        return Err(config_err(format!(
            "prediction shape {:?} does not match truth shape {:?}",
            pred.shape(),
            truth.shape()
        )));
    }
    let (n, m, k) = pred.shape();
    let shape = BatchShape {
        batch: n,
        steps: k,
        dim: m,
    };
    let flat = |d: &DataMatrix| {
        let mut v = Vec::with_capacity(shape.len());
        for b in 0..n {
            for t in 0..k {
                v.extend((0..m).map(|j| d.get(b, j, t)));
            }
        }
        v
    };
    Ok((shape, flat(pred), flat(truth)))
}

/// KL divergence per step with all scored components pooled.
fn pooled_kl(
    pred: &[f64],
    truth: &[f64],
    shape: BatchShape,
    bins: usize,
    eps: f64,
) -> Result<Vec<f64>> {
    let BatchShape { batch, steps, dim } = shape;
    let pick = |a: &[f64], k: usize| -> Vec<f64> {
        (0..batch)
            .flat_map(|b| a[(b * steps + k) * dim..(b * steps + k + 1) * dim].to_vec())
            .collect()
    };
    (0..steps)
        .map(|k| Ok(kl_divergence(&pick(truth, k), &pick(pred, k), bins, eps)?))
        .collect()
}

fn variance(v: &[f64]) -> f64 {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / v.len() as f64
}

/// Metrics of one prediction directory; writes `<preset>_<tag>_*` tables
/// into `out` and returns the report.
pub fn evaluate(
    cfg: &ExperimentConfig,
    pred_dir: &Path,
    out: &Path,
    force: bool,
) -> Result<EvalReport> {
    let path = pred_dir.join("predict_summary.toml");
    if !path.exists() {
        return Err(CliError::Missing(format!("{} not found", path.display())));
    }
    let summary: PredictSummary = toml::from_str(&std::fs::read_to_string(&path)?)
        .map_err(|e| config_err(format!("{}: {e}", path.display())))?;
    let hash = cfg.hash();
    check_hash(
        &path,
        &BTreeMap::from([("config_hash".to_string(), summary.config_hash.clone())]),
        "config_hash",
        &hash,
        force,
    )?;
    let mc = cfg.model(&summary.tag)?;
    let ev = &cfg.evaluation;
    let load = |name: &str| -> Result<Option<DataMatrix>> {
        let p = pred_dir.join(name);
        if p.exists() {
            Ok(Some(load_matrix(&p, "config_hash", &hash, force)?))
        } else {
            Ok(None)
        }
    };
    std::fs::create_dir_all(out)?;
    let prefix = format!("{}_{}", cfg.preset.as_str(), summary.tag);
    let mut echo = cfg.provenance();
    echo.insert("tag".into(), summary.tag.clone());
    echo.insert("mode".into(), format!("{:?}", summary.mode));

    let mut report = EvalReport {
        config: echo.clone(),
        ..Default::default()
    };
    let s = &mut report.scalars;
    s.insert("n_rollouts".into(), summary.n_rollouts as f64);
    s.insert("n_diverged".into(), summary.n_diverged as f64);
    s.insert("memory_length".into(), summary.memory_length as f64);
    let mut truth_spectrum = None;
    if let (Some(p), Some(t)) = (load("pred.mzdm")?, load("pred_truth.mzdm")?) {
        let (shape, pv, tv) = batch(&p, &t)?;
        report.mse_vs_horizon = mse_vs_horizon(&pv, &tv, shape)?;
        report.per_rollout = per_rollout_sq_error(&pv, &tv, shape)?;
        report.kl_vs_horizon = pooled_kl(&pv, &tv, shape, ev.kl_bins, ev.kl_smoothing)?;
        report
            .scalars
            .insert("one_step_mse".into(), report.mse_vs_horizon[0]);
        report
            .scalars
            .insert("final_mse".into(), *report.mse_vs_horizon.last().unwrap());
        let periodic = matches!(mc.dictionary, ObservableDict::CoarseGrid { .. })
            && shape.dim == p.n_observables();
        let k = ev.spectrum_step;
        if periodic && k > 0 && k <= shape.steps && mc.eval_components.is_none() {
            let fields = |v: &[f64]| -> Vec<f64> {
                (0..shape.batch)
                    .flat_map(|b| {
                        v[(b * shape.steps + k - 1) * shape.dim..(b * shape.steps + k) * shape.dim]
                            .to_vec()
                    })
                    .collect()
            };
            report.spectrum = power_spectrum(&fields(&pv), shape.dim)?;
            truth_spectrum = Some(power_spectrum(&fields(&tv), shape.dim)?);
        }
    }
    if let (Some(p), Some(t)) = (load("markov_pred.mzdm")?, load("markov_pred_truth.mzdm")?) {
        let (shape, pv, tv) = batch(&p, &t)?;
        let markov = EvalReport {
            mse_vs_horizon: mse_vs_horizon(&pv, &tv, shape)?,
            kl_vs_horizon: pooled_kl(&pv, &tv, shape, ev.kl_bins, ev.kl_smoothing)?,
            config: echo.clone(),
            ..Default::default()
        };
        report
            .scalars
            .insert("one_step_mse_markov".into(), markov.mse_vs_horizon[0]);
        report
            .scalars
            .insert("n_markov_diverged".into(), summary.n_markov_diverged as f64);
        markov.validate()?;
        markov.write(out, &format!("{prefix}_markov"))?;
    }
    if summary.n_long > 0 {
        let reference = load("reference.mzdm")?.ok_or_else(|| {
            CliError::Missing(format!("{}: reference.mzdm not found", pred_dir.display()))
        })?;
        let truth = reference.to_dense();
        let data_var = variance(&truth);
        let s = &mut report.scalars;
        s.insert("data_variance".into(), data_var);
        s.insert("n_long_diverged".into(), summary.n_long_diverged as f64);
        match load("long.mzdm")? {
            Some(long) if summary.n_long_diverged == 0 => {
                let model = long.to_dense();
                s.insert(
                    "kl_long".into(),
                    kl_divergence(&truth, &model, ev.kl_bins, ev.kl_smoothing)?,
                );
                let (n, nc, steps) = long.shape();
                let w = ev.terminal_window_steps.min(steps);
                let tail_var: f64 = (0..n)
                    .map(|i| {
                        let tail: Vec<f64> = (0..nc)
                            .flat_map(|j| (steps - w..steps).map(move |k| (j, k)))
                            .map(|(j, k)| long.get(i, j, k))
                            .collect();
                        variance(&tail)
                    })
                    .sum::<f64>()
                    / n as f64;
                s.insert("terminal_variance_fraction".into(), tail_var / data_var);
                let lo = truth
                    .iter()
                    .chain(&model)
                    .copied()
                    .fold(f64::INFINITY, f64::min);
                let hi = truth
                    .iter()
                    .chain(&model)
                    .copied()
                    .fold(f64::NEG_INFINITY, f64::max);
                if hi > lo {
                    report.histograms.insert(
                        "truth".into(),
                        histogram_on(&truth, lo, hi, ev.histogram_bins)?,
                    );
                    report.histograms.insert(
                        "model".into(),
                        histogram_on(&model, lo, hi, ev.histogram_bins)?,
                    );
                }
            }
            // A rollout that blew up has no long-time distribution.
            _ => {
                s.insert("kl_long".into(), f64::INFINITY);
                s.insert("terminal_variance_fraction".into(), f64::INFINITY);
            }
        }
    }
    report.validate()?;
    report.write(out, &prefix)?;
    if let Some(spectrum) = truth_spectrum {
        let t = EvalReport {
            spectrum,
            config: echo,
            ..Default::default()
        };
        t.write(out, &format!("{prefix}_truth"))?;
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub memory_length: usize,
    pub selected_memory_length: usize,
    /// First lag whose profile value is below the threshold; -1 if none.
    pub profile_first_below: i64,
    pub profile_min: f64,
    pub scalars: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub config_hash: String,
    pub diverged_rollouts: usize,
    pub models: BTreeMap<String, ModelSummary>,
}

pub fn run_paths(out: &Path, tag: &str) -> (PathBuf, PathBuf, PathBuf, PathBuf) {
    (
        out.join("data"),
        out.join("models").join(tag),
        out.join("predictions").join(tag),
        out.join("eval"),
    )
}

/// generate → learn → predict → evaluate for every selected model.
pub fn reproduce(cfg: &ExperimentConfig, out: &Path, force: bool) -> Result<RunSummary> {
    prepare_out(out, force)?;
    std::fs::write(out.join("config.toml"), hash_comment(cfg) + &cfg.to_toml())?;
    let data = out.join("data");
    generate(cfg, &data, true)?;
    let mut summary = RunSummary {
        config_hash: cfg.hash(),
        diverged_rollouts: 0,
        models: BTreeMap::new(),
    };
    for tag in &cfg.run_models {
        let (_, model_dir, pred_dir, eval_dir) = run_paths(out, tag);
        let lo = learn(cfg, &data, tag, None, &model_dir, true)?;
        let po = predict(cfg, &data, &model_dir, &pred_dir, false, true)?;
        summary.diverged_rollouts += po.diverged();
        let report = evaluate(cfg, &pred_dir, &eval_dir, true)?;
        summary.models.insert(
            tag.clone(),
            ModelSummary {
                memory_length: lo.memory_length,
                selected_memory_length: lo.selected_memory_length,
                profile_first_below: lo.profile_first_below.map_or(-1, |v| v as i64),
                profile_min: lo.profile.iter().copied().fold(f64::INFINITY, f64::min),
                scalars: report.scalars,
            },
        );
    }
    std::fs::write(
        out.join("summary.toml"),
        toml::to_string(&summary).map_err(|e| config_err(e.to_string()))?,
    )?;
    Ok(summary)
}
