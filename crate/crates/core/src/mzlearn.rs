//! Recursive extraction of the Markov and memory operators.
//!
//! Order 0 regresses the snapshot one step ahead on the present. Order `n`
//! regresses the GLE target
//!
//! ```text
//! y_n(t0) = g(t0 + n + 1) − Σ_{ℓ<n} Ω^ℓ(g(t0 + n − ℓ))
//! ```
//!
//! on `g(t0)`, and the orthogonal-dynamics sample is `W_n = y_n − Ω^n(g(t0))`.
//! The partial sums `Σ_{ℓ<n} Ω^ℓ(g(s − ℓ))` are kept per series indexed by
//! the current time `s`, so each order costs one pass of model evaluations
//! over the data regardless of the memory length.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::datamat::{read_tensor, write_tensor, DataMatrix, Provenance, SeriesView};
use crate::error::{check_dim, invalid, Error, Result};
use crate::linalg::inverse_spd;
use crate::regress::{fit, Dataset, FittedModel, RegressionFamily};

pub const MZ_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairingMode {
    /// One regression sample per data-matrix row, inputs at its first time.
    InitialTime,
    /// Every valid time offset of every series is an independent sample.
    StationaryPooled,
}

impl PairingMode {
    pub fn default_for(provenance: Provenance) -> Self {
        match provenance {
            Provenance::Ensemble => PairingMode::InitialTime,
            Provenance::Ergodic => PairingMode::StationaryPooled,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtractOptions {
    /// Number of operators `H` (Markov plus `H − 1` memory operators).
    pub h: usize,
    pub pairing: PairingMode,
    pub seed: u64,
    /// Store residual samples for every `residual_stride`-th row only.
    #[serde(default = "one")]
    pub residual_stride: usize,
}

fn one() -> usize {
    1
}

impl ExtractOptions {
    pub fn new(h: usize, pairing: PairingMode, seed: u64) -> Self {
        ExtractOptions {
            h,
            pairing,
            seed,
            residual_stride: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderDiagnostics {
    pub order: usize,
    pub n_samples: usize,
    /// Training MSE summed over output components.
    pub fit_mse: f64,
    /// Training MSE of each output component.
    pub component_mse: Vec<f64>,
    pub validation_mse: Option<f64>,
    pub jitter: Option<f64>,
}

/// Learned operators `Ω^0..Ω^{H−1}` with their residual samples.
#[derive(Debug, Clone, PartialEq)]
pub struct MZModel {
    family: RegressionFamily,
    operators: Vec<FittedModel>,
    /// `residuals[n]` is `rows × output_dim`, row-major.
    residuals: Vec<Vec<f64>>,
    residual_stride: usize,
    pairing: PairingMode,
    seed: u64,
    input_dim: usize,
    output_dim: usize,
    delta: f64,
    diagnostics: Vec<OrderDiagnostics>,
}

impl MZModel {
    pub fn family(&self) -> &RegressionFamily {
        &self.family
    }
    pub fn operators(&self) -> &[FittedModel] {
        &self.operators
    }
    pub fn h(&self) -> usize {
        self.operators.len()
    }
    pub fn pairing(&self) -> PairingMode {
        self.pairing
    }
    pub fn seed(&self) -> u64 {
        self.seed
    }
    pub fn input_dim(&self) -> usize {
        self.input_dim
    }
    pub fn output_dim(&self) -> usize {
        self.output_dim
    }
    pub fn delta(&self) -> f64 {
        self.delta
    }
    pub fn diagnostics(&self) -> &[OrderDiagnostics] {
        &self.diagnostics
    }
    /// Residual samples `W_n` of order `n`, `rows × output_dim` row-major.
    pub fn residuals(&self, n: usize) -> &[f64] {
        &self.residuals[n]
    }
    /// Data-matrix rows whose residuals are stored.
    pub fn residual_rows(&self) -> impl Iterator<Item = usize> + '_ {
        let rows = self
            .residuals
            .first()
            .map_or(0, |r| r.len() / self.output_dim);
        (0..rows).map(move |r| r * self.residual_stride)
    }

    /// Operator matrices of a linear-family model.
    pub fn kappas(&self) -> Option<Vec<DMatrix<f64>>> {
        if !matches!(self.family.kind, crate::regress::FamilyKind::Linear) {
            return None;
        }
        self.operators.iter().map(|o| o.coefficients()).collect()
    }

    /// The first `h` operators only.
    pub fn truncated(&self, h: usize) -> Result<MZModel> {
        if h == 0 || h > self.h() {
            return Err(invalid(format!(
                "cannot truncate {} operators to {h}",
                self.h()
            )));
        }
        let mut m = self.clone();
        m.operators.truncate(h);
        m.residuals.truncate(h);
        m.diagnostics.truncate(h);
        Ok(m)
    }
}

/// Output dimension of a (possibly delay-embedded) data matrix.
fn output_dim_of(d: &DataMatrix) -> usize {
    d.n_observables() / d.embed_lags()
}

/// Contiguous spans `[a, b]` of each series covered by the matrix rows.
fn coverage(view: &SeriesView, k: usize) -> Vec<Vec<(usize, usize)>> {
    let mut starts: Vec<Vec<usize>> = vec![Vec::new(); view.series.len()];
    for &(s, t) in &view.origins {
        starts[s].push(t);
    }
    starts
        .into_iter()
        .map(|mut st| {
            st.sort_unstable();
            st.dedup();
            let mut spans: Vec<(usize, usize)> = Vec::new();
            for t in st {
                let end = t + k - 1;
                match spans.last_mut() {
                    Some(last) if t <= last.1 + 1 => last.1 = last.1.max(end),
                    _ => spans.push((t, end)),
                }
            }
            spans
        })
        .collect()
}

/// Shared bookkeeping of the order recursion, used by extraction and by
/// the GFD replay.
struct Recursion<'a> {
    view: SeriesView,
    origins: &'a [(usize, usize)],
    spans: Vec<Vec<(usize, usize)>>,
    pairing: PairingMode,
    m_in: usize,
    m_out: usize,
    /// Per series, `len × m_out` partial reconstructions at current time.
    acc: Vec<Vec<f64>>,
}

impl<'a> Recursion<'a> {
    fn new(
        d: &DataMatrix,
        view: SeriesView,
        origins: &'a [(usize, usize)],
        pairing: PairingMode,
    ) -> Self {
        let m_in = d.n_observables();
        let m_out = output_dim_of(d);
        let spans = coverage(&view, d.n_times());
        let acc = (0..view.series.len())
            .map(|s| vec![0.0; view.len_of(s) * m_out])
            .collect();
        Recursion {
            view,
            origins,
            spans,
            pairing,
            m_in,
            m_out,
            acc,
        }
    }

    /// Sample origins `(series, t0)` used for fitting order `n`.
    fn sample_origins(&self, n: usize) -> Vec<(usize, usize)> {
        match self.pairing {
            PairingMode::InitialTime => self.origins.to_vec(),
            PairingMode::StationaryPooled => {
                let mut out = Vec::new();
                for (s, spans) in self.spans.iter().enumerate() {
                    for &(a, b) in spans {
                        if b > a + n {
                            out.extend((a..=b - n - 1).map(|t| (s, t)));
                        }
                    }
                }
                out
            }
        }
    }

    fn push_target(&self, n: usize, s: usize, t0: usize, out: &mut Vec<f64>) {
        let g = self.view.snapshot(s, t0 + n + 1);
        let a = &self.acc[s][(t0 + n) * self.m_out..(t0 + n + 1) * self.m_out];
        out.extend(g[..self.m_out].iter().zip(a).map(|(g, a)| g - a));
    }

    fn samples(&self, n: usize, origins: &[(usize, usize)]) -> (Vec<f64>, Vec<f64>) {
        let mut x = Vec::with_capacity(origins.len() * self.m_in);
        let mut y = Vec::with_capacity(origins.len() * self.m_out);
        for &(s, t0) in origins {
            x.extend_from_slice(self.view.snapshot(s, t0));
            self.push_target(n, s, t0, &mut y);
        }
        (x, y)
    }

    /// Adds `Ω^n(g(t − n))` to the partial sums at every time `t ≥ n`.
    fn absorb(&mut self, n: usize, op: &FittedModel) {
        for s in 0..self.view.series.len() {
            let len = self.view.len_of(s);
            if len <= n {
                continue;
            }
            let inputs = &self.view.series[s][..(len - n) * self.m_in];
            let pred = op.predict_batch(inputs);
            let acc = &mut self.acc[s][n * self.m_out..];
            for (a, p) in acc.iter_mut().zip(&pred) {
                *a += p;
            }
        }
    }
}

/// Algorithm 1: fits `Ω^0..Ω^{H−1}` with `family` and stores the
/// orthogonal-dynamics samples `W_n`.
pub fn extract_operators(
    d: &DataMatrix,
    family: &RegressionFamily,
    opts: &ExtractOptions,
) -> Result<MZModel> {
    family.validate()?;
    if opts.h == 0 || opts.h > d.n_times() - 1 {
        return Err(invalid(format!(
            "memory length H = {} must lie in 1..={}",
            opts.h,
            d.n_times() - 1
        )));
    }
    if opts.residual_stride == 0 {
        return Err(invalid("residual stride must be at least 1"));
    }
    let view = d.series_view();
    let origins = view.origins.clone();
    let stored: Vec<(usize, usize)> = origins
        .iter()
        .step_by(opts.residual_stride)
        .copied()
        .collect();
    let mut rec = Recursion::new(d, view, &origins, opts.pairing);
    let (m_in, m_out) = (rec.m_in, rec.m_out);

    let mut operators = Vec::with_capacity(opts.h);
    let mut residuals = Vec::with_capacity(opts.h);
    let mut diagnostics = Vec::with_capacity(opts.h);
    for n in 0..opts.h {
        let fit_origins = rec.sample_origins(n);
        let (x, y) = rec.samples(n, &fit_origins);
        let data = Dataset::new(&x, m_in, &y, m_out)?;
        let op = fit(family, &data, opts.seed.wrapping_add(n as u64))?;

        let pred = op.predict_batch(&x);
        let mut component_mse = vec![0.0; m_out];
        for (i, (p, t)) in pred.iter().zip(&y).enumerate() {
            component_mse[i % m_out] += (p - t) * (p - t);
        }
        component_mse
            .iter_mut()
            .for_each(|c| *c /= fit_origins.len() as f64);
        diagnostics.push(OrderDiagnostics {
            order: n,
            n_samples: fit_origins.len(),
            fit_mse: op.fit_mse(),
            component_mse,
            validation_mse: op.validation_mse(),
            jitter: op.jitter(),
        });
        log::info!(
            "order {n}: {} samples, fit MSE {:.4e}",
            fit_origins.len(),
            op.fit_mse()
        );

        let (xs, ys) = rec.samples(n, &stored);
        let ps = op.predict_batch(&xs);
        residuals.push(ys.iter().zip(&ps).map(|(y, p)| y - p).collect());
        rec.absorb(n, &op);
        operators.push(op);
    }
    Ok(MZModel {
        family: family.clone(),
        operators,
        residuals,
        residual_stride: opts.residual_stride,
        pairing: opts.pairing,
        seed: opts.seed,
        input_dim: m_in,
        output_dim: m_out,
        delta: d.delta(),
        diagnostics,
    })
}

/// Empirical lag correlations `C(k) = X(k)ᵀ X(0)`, `k = 0..=h`, where
/// `X(k)` is the `N × M` slice of the data matrix at time `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationSet {
    pub c: Vec<DMatrix<f64>>,
}

impl CorrelationSet {
    pub fn from_data(d: &DataMatrix, h: usize) -> Result<Self> {
        if h >= d.n_times() {
            return Err(invalid("correlation lag exceeds the number of snapshots"));
        }
        let (n, m, _) = d.shape();
        let x0 = DMatrix::from_row_slice(n, m, &d.time_slice(0));
        let c = (0..=h)
            .map(|k| {
                let xk = DMatrix::from_row_slice(n, m, &d.time_slice(k));
                xk.transpose() * &x0
            })
            .collect();
        Ok(CorrelationSet { c })
    }
}

/// Closed-form linear operators from the correlation recursion
/// `Ω^0 = C(1)C(0)⁻¹`, `Ω^{n+1} = [C(n+2) − Σ_{ℓ≤n} Ω^ℓ C(n−ℓ+1)] C(0)⁻¹`.
pub fn mori_closed_form(d: &DataMatrix, h: usize) -> Result<Vec<DMatrix<f64>>> {
    if d.embed_lags() != 1 {
        return Err(invalid("the correlation recursion needs square operators"));
    }
    if h == 0 {
        return Err(invalid("H must be at least 1"));
    }
    let corr = CorrelationSet::from_data(d, h)?;
    let (c0_inv, jitter) = inverse_spd(&corr.c[0]);
    if let Some(j) = jitter {
        log::warn!("C(0) regularized with jitter {j:.3e}");
    }
    let mut omegas: Vec<DMatrix<f64>> = Vec::with_capacity(h);
    omegas.push(&corr.c[1] * &c0_inv);
    for n in 0..h - 1 {
        let mut acc = corr.c[n + 2].clone();
        for (l, om) in omegas.iter().enumerate() {
            acc -= om * &corr.c[n - l + 1];
        }
        omegas.push(acc * &c0_inv);
    }
    Ok(omegas)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GfdOrder {
    pub order: usize,
    /// RMS of the family refit to `(g(t0), W_n)`: the size of `P W_n`.
    pub projected_rms: f64,
    /// RMS of `W_n` itself, for scale.
    pub residual_rms: f64,
    /// RMS difference between `Ω^n` and a fresh regression of its own
    /// targets recomputed from the data and the lower-order operators.
    pub replay_rms: f64,
}

/// Orthogonality `P W_n ≈ 0` per order and replay of the recursion.
pub fn gfd_check(model: &MZModel, d: &DataMatrix) -> Result<Vec<GfdOrder>> {
    check_dim(model.input_dim, d.n_observables())?;
    let view = d.series_view();
    let origins = view.origins.clone();
    let mut rec = Recursion::new(d, view, &origins, model.pairing);
    let (m_in, m_out) = (rec.m_in, rec.m_out);
    let rms = |v: &[f64], rows: usize| {
        (v.iter().map(|a| a * a).sum::<f64>() / (rows * m_out) as f64).sqrt()
    };
    let mut out = Vec::with_capacity(model.h());
    for (n, op) in model.operators.iter().enumerate() {
        let fit_origins = rec.sample_origins(n);
        let rows = fit_origins.len();
        let (x, y) = rec.samples(n, &fit_origins);
        let seed = model.seed.wrapping_add(n as u64);
        let pred = op.predict_batch(&x);

        let replay = fit(&model.family, &Dataset::new(&x, m_in, &y, m_out)?, seed)?;
        let rp = replay.predict_batch(&x);
        let diff: Vec<f64> = rp.iter().zip(&pred).map(|(a, b)| a - b).collect();

        let w: Vec<f64> = y.iter().zip(&pred).map(|(y, p)| y - p).collect();
        let pw = fit(&model.family, &Dataset::new(&x, m_in, &w, m_out)?, seed)?;
        out.push(GfdOrder {
            order: n,
            projected_rms: rms(&pw.predict_batch(&x), rows),
            residual_rms: rms(&w, rows),
            replay_rms: rms(&diff, rows),
        });
        rec.absorb(n, op);
    }
    Ok(out)
}

/// Mean over the rows of `d_test` of `‖Ω^ℓ(g)‖²` for each lag `ℓ`, with `g`
/// the row's first snapshot. `component` restricts the norm to one output.
pub fn memory_norm_profile(
    model: &MZModel,
    d_test: &DataMatrix,
    component: Option<usize>,
) -> Result<Vec<f64>> {
    check_dim(model.input_dim, d_test.n_observables())?;
    if let Some(c) = component {
        if c >= model.output_dim {
            return Err(invalid("profile component out of range"));
        }
    }
    let x = d_test.time_slice(0);
    let n = d_test.n_samples();
    let m_out = model.output_dim;
    Ok(model
        .operators
        .iter()
        .map(|op| {
            let p = op.predict_batch(&x);
            let total: f64 = match component {
                Some(c) => p.iter().skip(c).step_by(m_out).map(|v| v * v).sum(),
                None => p.iter().map(|v| v * v).sum(),
            };
            total / n as f64
        })
        .collect())
}

/// Smallest `H` such that every profile value at lags `≥ H` is strictly
/// below `threshold`; the full length if the last value is not.
pub fn select_memory_length(profile: &[f64], threshold: f64) -> usize {
    profile
        .iter()
        .rposition(|&v| !(v < threshold))
        .map_or(0, |i| i + 1)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    family: RegressionFamily,
    h: usize,
    pairing: PairingMode,
    seed: u64,
    input_dim: usize,
    output_dim: usize,
    delta: f64,
    residual_stride: usize,
    diagnostics: Vec<OrderDiagnostics>,
    #[serde(default)]
    info: BTreeMap<String, String>,
}

impl MZModel {
    /// Writes `manifest.toml`, `omega_NNNN.mzfm` and `residual_NNNN.mzdm`
    /// into `dir`.
    pub fn save(&self, dir: &Path, info: &BTreeMap<String, String>) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let manifest = Manifest {
            format_version: MZ_FORMAT_VERSION,
            family: self.family.clone(),
            h: self.h(),
            pairing: self.pairing,
            seed: self.seed,
            input_dim: self.input_dim,
            output_dim: self.output_dim,
            delta: self.delta,
            residual_stride: self.residual_stride,
            diagnostics: self.diagnostics.clone(),
            info: info.clone(),
        };
        let text = toml::to_string(&manifest).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(dir.join("manifest.toml"), text)?;
        for (n, (op, w)) in self.operators.iter().zip(&self.residuals).enumerate() {
            op.save(&dir.join(format!("omega_{n:04}.mzfm")))?;
            let rows = w.len() / self.output_dim;
            let mut f = std::io::BufWriter::new(std::fs::File::create(
                dir.join(format!("residual_{n:04}.mzdm")),
            )?);
            write_tensor(&mut f, (rows, self.output_dim, 1), self.delta, w)?;
            std::io::Write::flush(&mut f)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<(MZModel, BTreeMap<String, String>)> {
        let text = std::fs::read_to_string(dir.join("manifest.toml"))?;
        let m: Manifest = toml::from_str(&text).map_err(|e| Error::Format(e.to_string()))?;
        if m.format_version != MZ_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported model version {}",
                m.format_version
            )));
        }
        let mut operators = Vec::with_capacity(m.h);
        let mut residuals = Vec::with_capacity(m.h);
        for n in 0..m.h {
            operators.push(FittedModel::load(&dir.join(format!("omega_{n:04}.mzfm")))?);
            let mut f = std::io::BufReader::new(std::fs::File::open(
                dir.join(format!("residual_{n:04}.mzdm")),
            )?);
            let (shape, _, values) = read_tensor(&mut f)?;
            check_dim(m.output_dim, shape.1)?;
            residuals.push(values);
        }
        Ok((
            MZModel {
                family: m.family,
                operators,
                residuals,
                residual_stride: m.residual_stride,
                pairing: m.pairing,
                seed: m.seed,
                input_dim: m.input_dim,
                output_dim: m.output_dim,
                delta: m.delta,
                diagnostics: m.diagnostics,
            },
            m.info,
        ))
    }
}
