//! Multi-step prediction with the truncated generalized Langevin equation.
//!
//! Each step evaluates `g_{n+1} = Σ_{ℓ<H} Ω^ℓ(g̃_{n−ℓ}) + W`, where `g̃` is the
//! given history followed by the model's own earlier predictions. Lags that
//! reach before the start of the history are dropped. With delay-embedded
//! operators the input at time `s` is `[g_s, g_{s−1}, …, g_{s−E+1}]`.

use std::io::Write;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dynamics::BLOWUP_THRESHOLD;
use crate::error::{check_dim, invalid, Error, Result};
use crate::mzlearn::MZModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictionMode {
    LinearWithMemory,
    NonlinearWithMemory,
    MarkovOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseModel {
    Zero,
    GaussianIid {
        mean: Vec<f64>,
        covariance: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionConfig {
    pub mode: PredictionMode,
    /// Number of predicted steps `m`.
    pub horizon: usize,
    /// Number of operators used, `H`.
    pub history_length: usize,
    pub noise: NoiseModel,
    pub seed: u64,
}

impl PredictionConfig {
    pub fn new(mode: PredictionMode, horizon: usize, history_length: usize) -> Self {
        PredictionConfig {
            mode,
            horizon,
            history_length,
            noise: NoiseModel::Zero,
            seed: 0,
        }
    }

    fn validate(&self, available: usize) -> Result<()> {
        if self.horizon == 0 {
            return Err(invalid("prediction horizon must be at least 1"));
        }
        if self.history_length == 0 || self.history_length > available {
            return Err(invalid(format!(
                "history length {} exceeds the {available} available operators",
                self.history_length
            )));
        }
        Ok(())
    }
}

/// Snapshots `g_{−T..0}`, oldest first.
#[derive(Debug, Clone, PartialEq)]
pub struct History {
    m: usize,
    values: Vec<f64>,
}

impl History {
    pub fn new(snapshots: &[Vec<f64>]) -> Result<Self> {
        let m = snapshots
            .first()
            .map(|s| s.len())
            .ok_or_else(|| invalid("empty history"))?;
        let mut values = Vec::with_capacity(snapshots.len() * m);
        for s in snapshots {
            check_dim(m, s.len())?;
            values.extend_from_slice(s);
        }
        Self::from_rows(values, m)
    }

    pub fn from_rows(values: Vec<f64>, m: usize) -> Result<Self> {
        if m == 0 || values.is_empty() || !values.len().is_multiple_of(m) {
            return Err(invalid("history rows do not match the observable count"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(invalid("history must be finite"));
        }
        Ok(History { m, values })
    }

    pub fn len(&self) -> usize {
        self.values.len() / self.m
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Row-major snapshots, oldest first.
    pub fn rows(&self) -> &[f64] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.m
    }
}

/// Predicted steps `m × M` row-major; `diverged_at` is the first step whose
/// value exceeded the blow-up threshold (rows from there on are absent).
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub m: usize,
    pub values: Vec<f64>,
    pub diverged_at: Option<usize>,
}

impl Rollout {
    pub fn steps(&self) -> usize {
        self.values.len() / self.m
    }

    pub fn into_result(self) -> Result<Vec<f64>> {
        match self.diverged_at {
            Some(step) => Err(Error::PredictionDiverged { step }),
            None => Ok(self.values),
        }
    }
}

struct Sampler {
    rng: ChaCha8Rng,
    mean: DVector<f64>,
    root: DMatrix<f64>,
}

impl Sampler {
    fn new(noise: &NoiseModel, m: usize, seed: u64) -> Result<Option<Self>> {
        match noise {
            NoiseModel::Zero => Ok(None),
            NoiseModel::GaussianIid { mean, covariance } => {
                check_dim(m, mean.len())?;
                check_dim(m * m, covariance.len())?;
                let cov = DMatrix::from_row_slice(m, m, covariance);
                let eig = SymmetricEigen::new(0.5 * (&cov + cov.transpose()));
                let sqrt = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0).sqrt()));
                Ok(Some(Sampler {
                    rng: ChaCha8Rng::seed_from_u64(seed),
                    mean: DVector::from_column_slice(mean),
                    root: &eig.eigenvectors * sqrt,
                }))
            }
        }
    }

    fn draw(&mut self) -> DVector<f64> {
        let z = DVector::from_fn(self.mean.len(), |_, _| StandardNormal.sample(&mut self.rng));
        &self.mean + &self.root * z
    }
}

/// The shared recursion. `apply(ℓ, input, out)` adds `Ω^ℓ(input)` to `out`.
fn roll<F>(
    hist: &History,
    m_out: usize,
    embed: usize,
    cfg: &PredictionConfig,
    mut apply: F,
) -> Result<Rollout>
where
    F: FnMut(usize, &[f64], &mut [f64]),
{
    check_dim(m_out, hist.m)?;
    if hist.len() < embed {
        return Err(invalid(format!(
            "delay-embedded operators need at least {embed} history snapshots"
        )));
    }
    let mut sampler = Sampler::new(&cfg.noise, m_out, cfg.seed)?;
    let mut buf = hist.values.clone();
    buf.reserve(cfg.horizon * m_out);
    let mut input = vec![0.0; m_out * embed];
    let mut next = vec![0.0; m_out];
    for step in 0..cfg.horizon {
        let s = buf.len() / m_out - 1;
        next.fill(0.0);
        for l in 0..cfg.history_length {
            // Input at time s − ℓ needs snapshots down to s − ℓ − (E − 1).
            if l + embed - 1 > s {
                break;
            }
            for e in 0..embed {
                let t = s - l - e;
                input[e * m_out..(e + 1) * m_out].copy_from_slice(&buf[t * m_out..(t + 1) * m_out]);
            }
            apply(l, &input, &mut next);
        }
        if let Some(sm) = sampler.as_mut() {
            let w = sm.draw();
            next.iter_mut().zip(w.iter()).for_each(|(a, b)| *a += b);
        }
        if next.iter().any(|v| !(v.abs() <= BLOWUP_THRESHOLD)) {
            let start = hist.values.len();
            return Ok(Rollout {
                m: m_out,
                values: buf[start..].to_vec(),
                diverged_at: Some(step),
            });
        }
        buf.extend_from_slice(&next);
    }
    Ok(Rollout {
        m: m_out,
        values: buf[hist.values.len()..].to_vec(),
        diverged_at: None,
    })
}

/// Linear propagation of the observable vector with operator matrices.
pub fn rollout_linear(
    kappas: &[DMatrix<f64>],
    hist: &History,
    cfg: &PredictionConfig,
) -> Result<Rollout> {
    if cfg.mode != PredictionMode::LinearWithMemory {
        return Err(invalid("linear rollout needs the linear-with-memory mode"));
    }
    cfg.validate(kappas.len())?;
    let m_out = kappas[0].nrows();
    let m_in = kappas[0].ncols();
    if kappas.iter().any(|k| k.shape() != (m_out, m_in)) || !m_in.is_multiple_of(m_out) {
        return Err(invalid("operator matrices have inconsistent shapes"));
    }
    roll(hist, m_out, m_in / m_out, cfg, |l, x, out| {
        let k = &kappas[l];
        for (r, o) in out.iter_mut().enumerate() {
            *o += (0..m_in).map(|c| k[(r, c)] * x[c]).sum::<f64>();
        }
    })
}

pub fn predict_linear_memory(
    kappas: &[DMatrix<f64>],
    hist: &History,
    cfg: &PredictionConfig,
) -> Result<Vec<f64>> {
    rollout_linear(kappas, hist, cfg)?.into_result()
}

/// Recursive composition of the fitted operators; `MarkovOnly` uses `Ω^0`
/// alone whatever the stored memory length.
pub fn rollout_nonlinear(
    model: &MZModel,
    hist: &History,
    cfg: &PredictionConfig,
) -> Result<Rollout> {
    let cfg = match cfg.mode {
        PredictionMode::NonlinearWithMemory => cfg.clone(),
        PredictionMode::MarkovOnly => PredictionConfig {
            history_length: 1,
            ..cfg.clone()
        },
        PredictionMode::LinearWithMemory => {
            return Err(invalid(
                "nonlinear rollout needs a nonlinear or Markov-only mode",
            ))
        }
    };
    cfg.validate(model.h())?;
    let ops = model.operators();
    roll(
        hist,
        model.output_dim(),
        model.input_dim() / model.output_dim(),
        &cfg,
        |l, x, out| {
            let p = ops[l].predict_batch(x);
            out.iter_mut().zip(p).for_each(|(o, v)| *o += v);
        },
    )
}

pub fn predict_nonlinear_memory(
    model: &MZModel,
    hist: &History,
    cfg: &PredictionConfig,
) -> Result<Vec<f64>> {
    rollout_nonlinear(model, hist, cfg)?.into_result()
}

/// Dispatches on the configured mode; linear mode needs a linear family.
pub fn rollout(model: &MZModel, hist: &History, cfg: &PredictionConfig) -> Result<Rollout> {
    match cfg.mode {
        PredictionMode::LinearWithMemory => {
            let kappas = model.kappas().ok_or_else(|| {
                invalid("linear-with-memory prediction needs a linear-family model")
            })?;
            rollout_linear(&kappas, hist, cfg)
        }
        _ => rollout_nonlinear(model, hist, cfg),
    }
}

/// Empirical mean and population covariance (divided by the sample count)
/// of row-major residual samples.
pub fn fit_gaussian_noise(residuals: &[f64], m: usize) -> Result<NoiseModel> {
    if m == 0 || !residuals.len().is_multiple_of(m) {
        return Err(invalid(
            "residual samples do not match the observable count",
        ));
    }
    let n = residuals.len() / m;
    if n < 2 {
        return Err(invalid("noise fitting needs at least two samples"));
    }
    let mut mean = vec![0.0; m];
    for row in residuals.chunks(m) {
        mean.iter_mut().zip(row).for_each(|(a, b)| *a += b);
    }
    mean.iter_mut().for_each(|a| *a /= n as f64);
    let mut cov = vec![0.0; m * m];
    for row in residuals.chunks(m) {
        for i in 0..m {
            for j in 0..m {
                cov[i * m + j] += (row[i] - mean[i]) * (row[j] - mean[j]);
            }
        }
    }
    cov.iter_mut().for_each(|c| *c /= n as f64);
    Ok(NoiseModel::GaussianIid {
        mean,
        covariance: cov,
    })
}

/// Writes `time,<names…>` followed by one row per step.
pub fn write_csv<W: Write>(
    w: &mut W,
    times: &[f64],
    names: &[String],
    values: &[f64],
) -> Result<()> {
    let m = names.len();
    if m == 0 || values.len() != times.len() * m {
        return Err(invalid("prediction table shape mismatch"));
    }
    writeln!(w, "time,{}", names.join(","))?;
    for (t, row) in times.iter().zip(values.chunks(m)) {
        write!(w, "{t}")?;
        for v in row {
            write!(w, ",{v}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_kappa_gives_constant_prediction() {
        let hist = History::new(&[vec![1.0, 0.3, -2.0]]).unwrap();
        let cfg = PredictionConfig::new(PredictionMode::LinearWithMemory, 5, 1);
        let out = predict_linear_memory(&[DMatrix::identity(3, 3)], &hist, &cfg).unwrap();
        for row in out.chunks(3) {
            assert_eq!(row, &[1.0, 0.3, -2.0]);
        }
    }

    #[test]
    fn toy_kappa_one_step() {
        let kappa = DMatrix::from_row_slice(
            3,
            3,
            &[1.0, 0.0, 0.0, 0.002, 1.044, -0.046, -0.082, 0.265, 0.816],
        );
        let hist = History::new(&[vec![1.0, 1.4, 1.96]]).unwrap();
        let cfg = PredictionConfig::new(PredictionMode::LinearWithMemory, 1, 1);
        let out = predict_linear_memory(std::slice::from_ref(&kappa), &hist, &cfg).unwrap();
        let direct = &kappa * DVector::from_column_slice(&[1.0, 1.4, 1.96]);
        assert_eq!(out, direct.iter().copied().collect::<Vec<_>>());
        assert!((out[1] - 1.37344).abs() < 1e-12);
    }

    #[test]
    fn lags_before_history_are_dropped() {
        let kappas = vec![
            DMatrix::from_element(1, 1, 0.5),
            DMatrix::from_element(1, 1, 0.25),
        ];
        let hist = History::new(&[vec![4.0]]).unwrap();
        let cfg = PredictionConfig::new(PredictionMode::LinearWithMemory, 2, 2);
        let out = predict_linear_memory(&kappas, &hist, &cfg).unwrap();
        // Step 1 sees one snapshot; step 2 sees the prediction and the history.
        assert_eq!(out, vec![2.0, 0.5 * 2.0 + 0.25 * 4.0]);
    }

    #[test]
    fn divergence_is_reported_with_partial_rows() {
        let hist = History::new(&[vec![1.0]]).unwrap();
        let cfg = PredictionConfig::new(PredictionMode::LinearWithMemory, 100, 1);
        let r = rollout_linear(&[DMatrix::from_element(1, 1, 10.0)], &hist, &cfg).unwrap();
        assert_eq!(r.diverged_at, Some(8));
        assert_eq!(r.steps(), 8);
        assert!(matches!(
            r.into_result(),
            Err(Error::PredictionDiverged { step: 8 })
        ));
    }

    #[test]
    fn noise_fit_conventions() {
        let NoiseModel::GaussianIid { mean, covariance } =
            fit_gaussian_noise(&[-1.0, 1.0], 1).unwrap()
        else {
            panic!()
        };
        assert_eq!((mean, covariance), (vec![0.0], vec![1.0]));
        let NoiseModel::GaussianIid { mean, covariance } =
            fit_gaussian_noise(&[0.0; 6], 2).unwrap()
        else {
            panic!()
        };
        assert!(mean.iter().chain(&covariance).all(|&v| v == 0.0));
        assert!(fit_gaussian_noise(&[1.0], 1).is_err());
    }

    #[test]
    fn csv_layout() {
        let mut buf = Vec::new();
        write_csv(
            &mut buf,
            &[0.5, 1.0],
            &["a".into(), "b".into()],
            &[1.0, 2.0, 3.0, 4.0],
        )
        .unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "time,a,b\n0.5,1,2\n1,3,4\n"
        );
    }
}
