//! Evaluation metrics: error against horizon, KL divergence of marginals,
//! spatial power spectra and long-time histograms.
//!
//! Batched predictions and truths are row-major `B × m × M` arrays: rollout,
//! step, observable.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchShape {
    pub batch: usize,
    pub steps: usize,
    pub dim: usize,
}

impl BatchShape {
    pub fn len(&self) -> usize {
        self.batch * self.steps * self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn check(&self, a: &[f64], b: &[f64]) -> Result<()> {
        if a.len() != self.len() || b.len() != self.len() {
            return Err(invalid(format!(
                "expected {}x{}x{} values, got {} and {}",
                self.batch,
                self.steps,
                self.dim,
                a.len(),
                b.len()
            )));
        }
        if self.is_empty() {
            return Err(invalid("empty batch"));
        }
        Ok(())
    }
}

/// Mean over rollouts and observables of the squared error at each step.
pub fn mse_vs_horizon(pred: &[f64], truth: &[f64], shape: BatchShape) -> Result<Vec<f64>> {
    shape.check(pred, truth)?;
    let BatchShape { batch, steps, dim } = shape;
    let mut out = vec![0.0; steps];
    for b in 0..batch {
        for (k, o) in out.iter_mut().enumerate() {
            let base = (b * steps + k) * dim;
            *o += (0..dim)
                .map(|j| {
                    let e = pred[base + j] - truth[base + j];
                    e * e
                })
                .sum::<f64>();
        }
    }
    let norm = (batch * dim) as f64;
    out.iter_mut().for_each(|o| *o /= norm);
    Ok(out)
}

/// Squared error summed over observables, per rollout and step (`B × m`).
pub fn per_rollout_sq_error(pred: &[f64], truth: &[f64], shape: BatchShape) -> Result<Vec<f64>> {
    shape.check(pred, truth)?;
    Ok(pred
        .chunks(shape.dim)
        .zip(truth.chunks(shape.dim))
        .map(|(p, t)| p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum())
        .collect())
}

fn range_of<'a>(sets: impl Iterator<Item = &'a [f64]>) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for s in sets {
        for &v in s {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    if !(hi > lo) {
        // Degenerate range: one unit-wide bin centred on the value.
        (lo - 0.5, lo + 0.5)
    } else {
        (lo, hi)
    }
}

fn counts_on(samples: &[f64], lo: f64, hi: f64, n_bins: usize) -> Vec<f64> {
    let mut counts = vec![0.0; n_bins];
    let width = (hi - lo) / n_bins as f64;
    for &v in samples {
        let b = (((v - lo) / width).floor() as isize).clamp(0, n_bins as isize - 1) as usize;
        counts[b] += 1.0;
    }
    counts
}

/// `Σ p log(p/q)` of histograms on the union range, with `eps` added to
/// every bin mass before normalizing.
pub fn kl_divergence(
    samples_true: &[f64],
    samples_model: &[f64],
    n_bins: usize,
    eps: f64,
) -> Result<f64> {
    if samples_true.is_empty() || samples_model.is_empty() || n_bins == 0 {
        return Err(invalid("KL divergence needs samples and at least one bin"));
    }
    let (lo, hi) = range_of([samples_true, samples_model].into_iter());
    let mass = |s: &[f64]| {
        let c = counts_on(s, lo, hi, n_bins);
        let n = s.len() as f64;
        let p: Vec<f64> = c.iter().map(|c| c / n + eps).collect();
        let z: f64 = p.iter().sum();
        p.into_iter().map(|v| v / z).collect::<Vec<_>>()
    };
    let p = mass(samples_true);
    let q = mass(samples_model);
    Ok(p.iter()
        .zip(&q)
        .filter(|(p, _)| **p > 0.0)
        .map(|(p, q)| p * (p / q).ln())
        .sum::<f64>()
        .max(0.0))
}

/// KL divergence of one observable's marginal over the batch at each step.
pub fn kl_vs_horizon(
    pred: &[f64],
    truth: &[f64],
    shape: BatchShape,
    component: usize,
    n_bins: usize,
    eps: f64,
) -> Result<Vec<f64>> {
    shape.check(pred, truth)?;
    if component >= shape.dim {
        return Err(invalid("component out of range"));
    }
    let BatchShape { batch, steps, dim } = shape;
    (0..steps)
        .map(|k| {
            let pick = |a: &[f64]| -> Vec<f64> {
                (0..batch)
                    .map(|b| a[(b * steps + k) * dim + component])
                    .collect()
            };
            kl_divergence(&pick(truth), &pick(pred), n_bins, eps)
        })
        .collect()
}

/// One-sided power spectrum of periodic fields (rows of `width` values),
/// averaged over rows. Convention: unnormalized DFT `X_k = Σ_x u_x e^{−2πikx/n}`,
/// `P_0 = |X_0|²`, `P_k = 2|X_k|²` for `0 < k < n/2`, `P_{n/2} = |X_{n/2}|²`,
/// so that `Σ_k P_k / n = Σ_x u_x²`.
pub fn power_spectrum(fields: &[f64], width: usize) -> Result<Vec<f64>> {
    if width < 2 || fields.is_empty() || !fields.len().is_multiple_of(width) {
        return Err(invalid("fields must be nonempty rows of the grid width"));
    }
    let fft = FftPlanner::new().plan_fft_forward(width);
    let rows = fields.len() / width;
    let half = width / 2;
    let mut out = vec![0.0; half + 1];
    let mut buf = vec![Complex64::new(0.0, 0.0); width];
    for row in fields.chunks(width) {
        for (b, &v) in buf.iter_mut().zip(row) {
            *b = Complex64::new(v, 0.0);
        }
        fft.process(&mut buf);
        for (k, o) in out.iter_mut().enumerate() {
            let p = buf[k].norm_sqr();
            let doubled = k > 0 && !(width.is_multiple_of(2) && k == half);
            *o += if doubled { 2.0 * p } else { p };
        }
    }
    out.iter_mut().for_each(|o| *o /= rows as f64);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<f64>,
    /// Probability density: `Σ density · bin_width = 1`.
    pub density: Vec<f64>,
}

impl Histogram {
    pub fn bin_width(&self) -> f64 {
        (self.hi - self.lo) / self.counts.len() as f64
    }

    pub fn centers(&self) -> Vec<f64> {
        let w = self.bin_width();
        (0..self.counts.len())
            .map(|i| self.lo + (i as f64 + 0.5) * w)
            .collect()
    }
}

/// Normalized histogram of all values (observables sharing a symmetry are
/// pooled by passing them together).
pub fn long_time_histogram(samples: &[f64], n_bins: usize) -> Result<Histogram> {
    if n_bins == 0 || samples.len() < n_bins {
        return Err(invalid("histogram needs at least as many samples as bins"));
    }
    let (lo, hi) = range_of(std::iter::once(samples));
    histogram_on(samples, lo, hi, n_bins)
}

/// Histogram on a fixed range; values outside fall in the end bins.
pub fn histogram_on(samples: &[f64], lo: f64, hi: f64, n_bins: usize) -> Result<Histogram> {
    if !(hi > lo) || n_bins == 0 || samples.is_empty() {
        return Err(invalid("histogram needs a nonempty range and samples"));
    }
    let counts = counts_on(samples, lo, hi, n_bins);
    let w = (hi - lo) / n_bins as f64;
    let n = samples.len() as f64;
    let density = counts.iter().map(|c| c / (n * w)).collect();
    Ok(Histogram {
        lo,
        hi,
        counts,
        density,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mse_vs_horizon: Vec<f64>,
    pub kl_vs_horizon: Vec<f64>,
    pub spectrum: Vec<f64>,
    pub histograms: BTreeMap<String, Histogram>,
    /// Squared error per rollout and step, for downstream aggregation.
    #[serde(skip)]
    pub per_rollout: Vec<f64>,
    pub scalars: BTreeMap<String, f64>,
    pub config: BTreeMap<String, String>,
}

impl EvalReport {
    pub fn validate(&self) -> Result<()> {
        let all = self
            .mse_vs_horizon
            .iter()
            .chain(&self.kl_vs_horizon)
            .chain(&self.spectrum)
            .chain(self.histograms.values().flat_map(|h| &h.density));
        for v in all {
            if !v.is_finite() || *v < 0.0 {
                return Err(invalid(format!(
                    "metric value {v} is not finite and nonnegative"
                )));
            }
        }
        Ok(())
    }

    fn write_hash_line<W: Write>(&self, w: &mut W) -> Result<()> {
        if let Some(h) = self.config.get("config_hash") {
            writeln!(w, "# config_hash={h}")?;
        }
        Ok(())
    }

    /// Writes the tables as CSV files named `<prefix>_<table>.csv` plus a
    /// `<prefix>_summary.toml`. A `config_hash` entry of the config echo is
    /// repeated as a leading `#` comment line in every table.
    pub fn write(&self, dir: &Path, prefix: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let table = |name: &str,
                     header: &str,
                     rows: &[f64],
                     first: &dyn Fn(usize) -> String|
         -> Result<()> {
            if rows.is_empty() {
                return Ok(());
            }
            let mut w = std::io::BufWriter::new(std::fs::File::create(
                dir.join(format!("{prefix}_{name}.csv")),
            )?);
            self.write_hash_line(&mut w)?;
            writeln!(w, "{header}")?;
            for (i, v) in rows.iter().enumerate() {
                writeln!(w, "{},{v}", first(i))?;
            }
            w.flush()?;
            Ok(())
        };
        table("mse", "step,mse", &self.mse_vs_horizon, &|i| {
            (i + 1).to_string()
        })?;
        table("kl", "step,kl", &self.kl_vs_horizon, &|i| {
            (i + 1).to_string()
        })?;
        table("spectrum", "wavenumber,power", &self.spectrum, &|i| {
            i.to_string()
        })?;
        for (name, h) in &self.histograms {
            let centers = h.centers();
            table(
                &format!("hist_{name}"),
                "center,density",
                &h.density,
                &|i| centers[i].to_string(),
            )?;
        }
        if !self.per_rollout.is_empty() && !self.mse_vs_horizon.is_empty() {
            let steps = self.mse_vs_horizon.len();
            let mut w = std::io::BufWriter::new(std::fs::File::create(
                dir.join(format!("{prefix}_deviation.csv")),
            )?);
            self.write_hash_line(&mut w)?;
            writeln!(w, "rollout,step,sq_error")?;
            for (i, v) in self.per_rollout.iter().enumerate() {
                writeln!(w, "{},{},{v}", i / steps, i % steps + 1)?;
            }
            w.flush()?;
        }
        #[derive(Serialize)]
        struct Summary<'a> {
            scalars: &'a BTreeMap<String, f64>,
            config: &'a BTreeMap<String, String>,
        }
        let text = toml::to_string(&Summary {
            scalars: &self.scalars,
            config: &self.config,
        })
        .map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(dir.join(format!("{prefix}_summary.toml")), text)?;
        Ok(())
    }
}
