//! Ground-truth trajectory generation.
//!
//! Four systems are supported: the one-dimensional logistic toy model
//! `dφ/dt = φ − φ²`, the Van der Pol oscillator, Lorenz-63 and the
//! Kuramoto–Sivashinsky (KS) equation on a periodic domain. The ODEs are
//! integrated with fixed-step classical RK4; KS uses a pseudo-spectral
//! ETDRK4 scheme with 2/3-rule de-aliasing.

use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, invalid, Error, Result};

/// Any state component above this magnitude aborts integration.
pub const BLOWUP_THRESHOLD: f64 = 1e8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SystemSpec {
    /// `dφ/dt = φ − φ²`.
    ToyLogistic,
    VanDerPol {
        mu: f64,
    },
    Lorenz63 {
        sigma: f64,
        rho: f64,
        beta: f64,
    },
    /// `u_t + u_xx + u_xxxx + u u_x = 0` on `[0, length)` with `n_grid` points.
    KuramotoSivashinsky {
        length: f64,
        n_grid: usize,
    },
}

impl SystemSpec {
    pub fn lorenz63_classic() -> Self {
        SystemSpec::Lorenz63 {
            sigma: 10.0,
            rho: 28.0,
            beta: 8.0 / 3.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            SystemSpec::ToyLogistic => Ok(()),
            SystemSpec::VanDerPol { mu } => {
                if mu > 0.0 {
                    Ok(())
                } else {
                    Err(invalid("VanDerPol mu must be positive"))
                }
            }
            SystemSpec::Lorenz63 { sigma, rho, beta } => {
                if sigma > 0.0 && rho > 0.0 && beta > 0.0 {
                    Ok(())
                } else {
                    Err(invalid("Lorenz63 parameters must be positive"))
                }
            }
            SystemSpec::KuramotoSivashinsky { length, n_grid } => {
                if !(length > 0.0) {
                    return Err(invalid("KS domain length must be positive"));
                }
                if n_grid < 16 || n_grid % 2 != 0 {
                    return Err(invalid("KS grid size must be even and at least 16"));
                }
                Ok(())
            }
        }
    }

    /// Dimension of the full phase-space state.
    pub fn state_dim(&self) -> usize {
        match *self {
            SystemSpec::ToyLogistic => 1,
            SystemSpec::VanDerPol { .. } => 2,
            SystemSpec::Lorenz63 { .. } => 3,
            SystemSpec::KuramotoSivashinsky { n_grid, .. } => n_grid,
        }
    }

    pub fn is_ode(&self) -> bool {
        !matches!(self, SystemSpec::KuramotoSivashinsky { .. })
    }

    fn vector_field(&self, x: &[f64], dx: &mut [f64]) {
        match *self {
            SystemSpec::ToyLogistic => dx[0] = x[0] - x[0] * x[0],
            SystemSpec::VanDerPol { mu } => {
                dx[0] = mu * (x[0] - x[0].powi(3) / 3.0) - x[1];
                dx[1] = x[0] / mu;
            }
            SystemSpec::Lorenz63 { sigma, rho, beta } => {
                dx[0] = sigma * (x[1] - x[0]);
                dx[1] = x[0] * (rho - x[2]) - x[1];
                dx[2] = x[0] * x[1] - beta * x[2];
            }
            SystemSpec::KuramotoSivashinsky { .. } => {
                unreachable!("KS has no pointwise vector field")
            }
        }
    }
}

/// Simulation and sampling parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryConfig {
    /// Δ, the time between stored snapshots.
    pub sample_interval: f64,
    pub n_snapshots: usize,
    /// Transient discarded before the first snapshot.
    pub burn_in: f64,
    /// Integrator step; must divide `sample_interval`.
    pub inner_dt: f64,
    pub seed: u64,
}

impl TrajectoryConfig {
    /// Config with the default inner step Δ/100.
    pub fn new(sample_interval: f64, n_snapshots: usize, burn_in: f64) -> Self {
        TrajectoryConfig {
            sample_interval,
            n_snapshots,
            burn_in,
            inner_dt: sample_interval / 100.0,
            seed: 0,
        }
    }

    pub fn with_inner_dt(mut self, inner_dt: f64) -> Self {
        self.inner_dt = inner_dt;
        self
    }

    /// Number of integrator steps per snapshot interval.
    pub fn substeps(&self) -> Result<usize> {
        if !(self.inner_dt > 0.0) || !(self.sample_interval > 0.0) {
            return Err(invalid("sample interval and inner step must be positive"));
        }
        let ratio = self.sample_interval / self.inner_dt;
        let n = ratio.round();
        if n < 1.0 || (ratio - n).abs() > 1e-9 * ratio.max(1.0) {
            return Err(invalid(format!(
                "inner_dt {} does not divide the sample interval {}",
                self.inner_dt, self.sample_interval
            )));
        }
        Ok(n as usize)
    }

    fn burn_in_steps(&self) -> Result<usize> {
        if self.burn_in < 0.0 {
            return Err(invalid("burn-in must be non-negative"));
        }
        Ok((self.burn_in / self.inner_dt).round() as usize)
    }

    pub fn validate(&self) -> Result<()> {
        self.substeps()?;
        self.burn_in_steps()?;
        if self.n_snapshots < 2 {
            return Err(invalid("at least two snapshots are required"));
        }
        Ok(())
    }
}

/// A full phase-space state φ.
#[derive(Debug, Clone, PartialEq)]
pub struct State(Vec<f64>);

impl State {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().all(|v| v.is_finite()) {
            Ok(State(values))
        } else {
            Err(invalid("state entries must be finite"))
        }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

impl std::ops::Index<usize> for State {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

fn exceeds(x: &[f64]) -> bool {
    x.iter()
        .any(|v| !v.is_finite() || v.abs() > BLOWUP_THRESHOLD)
}

struct Rk4 {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
}

impl Rk4 {
    fn new(dim: usize) -> Self {
        Rk4 {
            k1: vec![0.0; dim],
            k2: vec![0.0; dim],
            k3: vec![0.0; dim],
            k4: vec![0.0; dim],
            tmp: vec![0.0; dim],
        }
    }

    fn step(&mut self, spec: &SystemSpec, x: &mut [f64], dt: f64) {
        let n = x.len();
        spec.vector_field(x, &mut self.k1);
        for i in 0..n {
            self.tmp[i] = x[i] + 0.5 * dt * self.k1[i];
        }
        spec.vector_field(&self.tmp, &mut self.k2);
        for i in 0..n {
            self.tmp[i] = x[i] + 0.5 * dt * self.k2[i];
        }
        spec.vector_field(&self.tmp, &mut self.k3);
        for i in 0..n {
            self.tmp[i] = x[i] + dt * self.k3[i];
        }
        spec.vector_field(&self.tmp, &mut self.k4);
        for i in 0..n {
            x[i] += dt / 6.0 * (self.k1[i] + 2.0 * self.k2[i] + 2.0 * self.k3[i] + self.k4[i]);
        }
    }
}

/// One classical RK4 step of an ODE system.
pub fn step_rk4(spec: &SystemSpec, s: &State, dt: f64) -> Result<State> {
    if !spec.is_ode() {
        return Err(invalid("step_rk4 requires an ODE system"));
    }
    if !(dt > 0.0) {
        return Err(invalid("dt must be positive"));
    }
    check_dim(spec.state_dim(), s.dim())?;
    let mut x = s.0.clone();
    Rk4::new(x.len()).step(spec, &mut x, dt);
    if exceeds(&x) {
        return Err(Error::BlowUp { time: dt });
    }
    Ok(State(x))
}

/// φ-function contour used to evaluate the ETDRK4 weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContourConfig {
    pub points: usize,
    pub radius: f64,
}

impl Default for ContourConfig {
    fn default() -> Self {
        ContourConfig {
            points: 32,
            radius: 1.0,
        }
    }
}

/// Precomputed ETDRK4 weights for one `(length, n_grid, dt)` triple.
#[derive(Clone)]
pub struct EtdrkCoefficients {
    pub length: f64,
    pub n_grid: usize,
    pub dt: f64,
    pub contour: ContourConfig,
    /// Spectral derivative wavenumbers (Nyquist mode set to zero).
    pub wavenumbers: Vec<f64>,
    /// `exp(dt·L)` with `L = k² − k⁴`.
    pub e: Vec<f64>,
    /// `exp(dt·L/2)`.
    pub e2: Vec<f64>,
    pub q: Vec<f64>,
    pub f1: Vec<f64>,
    pub f2: Vec<f64>,
    pub f3: Vec<f64>,
    /// `true` for modes kept by the 2/3 rule.
    pub keep: Vec<bool>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for EtdrkCoefficients {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EtdrkCoefficients")
            .field("length", &self.length)
            .field("n_grid", &self.n_grid)
            .field("dt", &self.dt)
            .field("contour", &self.contour)
            .finish_non_exhaustive()
    }
}

pub fn ks_precompute(length: f64, n_grid: usize, dt: f64) -> Result<EtdrkCoefficients> {
    ks_precompute_with(length, n_grid, dt, ContourConfig::default())
}

pub fn ks_precompute_with(
    length: f64,
    n_grid: usize,
    dt: f64,
    contour: ContourConfig,
) -> Result<EtdrkCoefficients> {
    SystemSpec::KuramotoSivashinsky { length, n_grid }.validate()?;
    if !(dt > 0.0) {
        return Err(invalid("dt must be positive"));
    }
    if contour.points == 0 || !(contour.radius > 0.0) {
        return Err(invalid(
            "contour needs at least one point and a positive radius",
        ));
    }
    let half = n_grid / 2;
    let wavenumbers: Vec<f64> = (0..n_grid)
        .map(|j| {
            let idx = if j < half {
                j as f64
            } else if j == half {
                0.0
            } else {
                j as f64 - n_grid as f64
            };
            2.0 * PI / length * idx
        })
        .collect();
    let keep: Vec<bool> = (0..n_grid)
        .map(|j| {
            let idx = if j <= half { j } else { n_grid - j };
            3 * idx <= n_grid
        })
        .collect();

    let roots: Vec<Complex64> = (0..contour.points)
        .map(|j| {
            let theta = 2.0 * PI * (j as f64 + 0.5) / contour.points as f64;
            Complex64::from_polar(contour.radius, theta)
        })
        .collect();
    let m = contour.points as f64;

    let mut e = Vec::with_capacity(n_grid);
    let mut e2 = Vec::with_capacity(n_grid);
    let mut q = Vec::with_capacity(n_grid);
    let mut f1 = Vec::with_capacity(n_grid);
    let mut f2 = Vec::with_capacity(n_grid);
    let mut f3 = Vec::with_capacity(n_grid);
    for &k in &wavenumbers {
        let lin = k * k - k.powi(4);
        let hl = dt * lin;
        e.push(hl.exp());
        e2.push((hl / 2.0).exp());
        let (mut sq, mut s1, mut s2, mut s3) = (
            Complex64::new(0.0, 0.0),
            Complex64::new(0.0, 0.0),
            Complex64::new(0.0, 0.0),
            Complex64::new(0.0, 0.0),
        );
        for r in &roots {
            let z = Complex64::new(hl, 0.0) + r;
            let ez = z.exp();
            let z3 = z * z * z;
            sq += ((z / 2.0).exp() - 1.0) / z;
            s1 += (-4.0 - z + ez * (4.0 - 3.0 * z + z * z)) / z3;
            s2 += (2.0 + z + ez * (z - 2.0)) / z3;
            s3 += (-4.0 - 3.0 * z - z * z + ez * (4.0 - z)) / z3;
        }
        q.push(dt * (sq / m).re);
        f1.push(dt * (s1 / m).re);
        f2.push(dt * (s2 / m).re);
        f3.push(dt * (s3 / m).re);
    }

    let mut planner = FftPlanner::new();
    let forward = planner.plan_fft_forward(n_grid);
    let inverse = planner.plan_fft_inverse(n_grid);
    let coeffs = EtdrkCoefficients {
        length,
        n_grid,
        dt,
        contour,
        wavenumbers,
        e,
        e2,
        q,
        f1,
        f2,
        f3,
        keep,
        forward,
        inverse,
    };
    let all_finite = [
        &coeffs.e, &coeffs.e2, &coeffs.q, &coeffs.f1, &coeffs.f2, &coeffs.f3,
    ]
    .iter()
    .all(|v| v.iter().all(|x| x.is_finite()));
    if !all_finite {
        return Err(invalid("non-finite ETDRK4 coefficient"));
    }
    Ok(coeffs)
}

impl EtdrkCoefficients {
    /// Unnormalized forward DFT of a real field.
    pub fn to_spectral(&self, field: &[f64]) -> Result<Vec<Complex64>> {
        check_dim(self.n_grid, field.len())?;
        let mut buf: Vec<Complex64> = field.iter().map(|&x| Complex64::new(x, 0.0)).collect();
        self.forward.process(&mut buf);
        Ok(buf)
    }

    /// Inverse DFT including the `1/n` factor; imaginary parts are kept.
    pub fn to_physical_complex(&self, spectrum: &[Complex64]) -> Result<Vec<Complex64>> {
        check_dim(self.n_grid, spectrum.len())?;
        let mut buf = spectrum.to_vec();
        self.inverse.process(&mut buf);
        let scale = 1.0 / self.n_grid as f64;
        buf.iter_mut().for_each(|c| *c *= scale);
        Ok(buf)
    }

    pub fn to_physical(&self, spectrum: &[Complex64]) -> Result<Vec<f64>> {
        Ok(self
            .to_physical_complex(spectrum)?
            .into_iter()
            .map(|c| c.re)
            .collect())
    }
}

/// Reusable buffers for repeated ETDRK4 steps.
pub struct KsStepper {
    coeffs: EtdrkCoefficients,
    nv: Vec<Complex64>,
    na: Vec<Complex64>,
    nb: Vec<Complex64>,
    nc: Vec<Complex64>,
    a: Vec<Complex64>,
    b: Vec<Complex64>,
    c: Vec<Complex64>,
    work: Vec<Complex64>,
    scratch: Vec<Complex64>,
}

impl KsStepper {
    pub fn new(coeffs: EtdrkCoefficients) -> Self {
        let n = coeffs.n_grid;
        let zero = Complex64::new(0.0, 0.0);
        let scratch_len = coeffs
            .forward
            .get_inplace_scratch_len()
            .max(coeffs.inverse.get_inplace_scratch_len());
        KsStepper {
            coeffs,
            nv: vec![zero; n],
            na: vec![zero; n],
            nb: vec![zero; n],
            nc: vec![zero; n],
            a: vec![zero; n],
            b: vec![zero; n],
            c: vec![zero; n],
            work: vec![zero; n],
            scratch: vec![zero; scratch_len],
        }
    }

    pub fn coefficients(&self) -> &EtdrkCoefficients {
        &self.coeffs
    }

    /// De-aliased `−(i k / 2) · FFT(u²)` with `u = Re IFFT(v)`.
    fn nonlinear(
        coeffs: &EtdrkCoefficients,
        v: &[Complex64],
        out: &mut [Complex64],
        work: &mut [Complex64],
        scratch: &mut [Complex64],
    ) {
        let n = coeffs.n_grid;
        let scale = 1.0 / n as f64;
        work.copy_from_slice(v);
        coeffs.inverse.process_with_scratch(work, scratch);
        for w in work.iter_mut() {
            let u = w.re * scale;
            *w = Complex64::new(u * u, 0.0);
        }
        coeffs.forward.process_with_scratch(work, scratch);
        for j in 0..n {
            out[j] = if coeffs.keep[j] {
                Complex64::new(0.0, -0.5 * coeffs.wavenumbers[j]) * work[j]
            } else {
                Complex64::new(0.0, 0.0)
            };
        }
    }

    /// Advances `v` by one step, in place.
    pub fn step(&mut self, v: &mut [Complex64]) {
        let c = &self.coeffs;
        let n = c.n_grid;
        Self::nonlinear(c, v, &mut self.nv, &mut self.work, &mut self.scratch);
        for j in 0..n {
            self.a[j] = c.e2[j] * v[j] + c.q[j] * self.nv[j];
        }
        Self::nonlinear(c, &self.a, &mut self.na, &mut self.work, &mut self.scratch);
        for j in 0..n {
            self.b[j] = c.e2[j] * v[j] + c.q[j] * self.na[j];
        }
        Self::nonlinear(c, &self.b, &mut self.nb, &mut self.work, &mut self.scratch);
        for j in 0..n {
            self.c[j] = c.e2[j] * self.a[j] + c.q[j] * (2.0 * self.nb[j] - self.nv[j]);
        }
        Self::nonlinear(c, &self.c, &mut self.nc, &mut self.work, &mut self.scratch);
        for j in 0..n {
            v[j] = c.e[j] * v[j]
                + self.nv[j] * c.f1[j]
                + 2.0 * (self.na[j] + self.nb[j]) * c.f2[j]
                + self.nc[j] * c.f3[j];
        }
        // Round-off leaves an anti-Hermitian part that the unstable low
        // modes amplify; project back onto real fields.
        v[0].im = 0.0;
        for j in 1..=n / 2 {
            let s = 0.5 * (v[j] + v[n - j].conj());
            v[j] = s;
            v[n - j] = s.conj();
        }
    }

    /// The de-aliased nonlinear term alone, exposed for invariant checks.
    pub fn nonlinear_term(&mut self, v: &[Complex64]) -> Vec<Complex64> {
        let mut out = vec![Complex64::new(0.0, 0.0); self.coeffs.n_grid];
        Self::nonlinear(&self.coeffs, v, &mut out, &mut self.work, &mut self.scratch);
        out
    }
}

fn spectrum_blew_up(v: &[Complex64], n: usize) -> bool {
    // |u(x)| ≤ Σ|û|/n bounds the physical field.
    let bound: f64 = v.iter().map(|c| c.norm()).sum::<f64>() / n as f64;
    !bound.is_finite() || bound > BLOWUP_THRESHOLD
}

/// One ETDRK4 step of the KS equation in spectral space.
pub fn ks_step(coeffs: &EtdrkCoefficients, u_hat: &[Complex64]) -> Result<Vec<Complex64>> {
    check_dim(coeffs.n_grid, u_hat.len())?;
    let mut v = u_hat.to_vec();
    KsStepper::new(coeffs.clone()).step(&mut v);
    if spectrum_blew_up(&v, coeffs.n_grid) {
        return Err(Error::BlowUp { time: coeffs.dt });
    }
    Ok(v)
}

/// Integrates from `x0`, discards the burn-in and returns `n_snapshots`
/// states spaced `sample_interval` apart.
pub fn simulate(spec: &SystemSpec, cfg: &TrajectoryConfig, x0: &State) -> Result<Vec<State>> {
    spec.validate()?;
    cfg.validate()?;
    check_dim(spec.state_dim(), x0.dim())?;
    let substeps = cfg.substeps()?;
    let burn = cfg.burn_in_steps()?;
    let dt = cfg.inner_dt;
    let mut out = Vec::with_capacity(cfg.n_snapshots);

    match *spec {
        SystemSpec::KuramotoSivashinsky { length, n_grid } => {
            let coeffs = ks_precompute(length, n_grid, dt)?;
            let mut v = coeffs.to_spectral(x0.as_slice())?;
            let mut stepper = KsStepper::new(coeffs);
            let mut steps = 0usize;
            for snap in 0..cfg.n_snapshots {
                let count = if snap == 0 { burn } else { substeps };
                for _ in 0..count {
                    stepper.step(&mut v);
                    steps += 1;
                    if steps.is_multiple_of(100) && spectrum_blew_up(&v, n_grid) {
                        return Err(Error::BlowUp {
                            time: steps as f64 * dt,
                        });
                    }
                }
                if spectrum_blew_up(&v, n_grid) {
                    return Err(Error::BlowUp {
                        time: steps as f64 * dt,
                    });
                }
                out.push(State::new(stepper.coefficients().to_physical(&v)?)?);
            }
        }
        _ => {
            let mut x = x0.as_slice().to_vec();
            let mut rk = Rk4::new(x.len());
            let mut steps = 0usize;
            let mut advance = |x: &mut [f64], count: usize, steps: &mut usize| -> Result<()> {
                for _ in 0..count {
                    rk.step(spec, x, dt);
                    *steps += 1;
                    if exceeds(x) {
                        return Err(Error::BlowUp {
                            time: *steps as f64 * dt,
                        });
                    }
                }
                Ok(())
            };
            advance(&mut x, burn, &mut steps)?;
            out.push(State(x.clone()));
            for _ in 1..cfg.n_snapshots {
                advance(&mut x, substeps, &mut steps)?;
                out.push(State(x.clone()));
            }
        }
    }
    Ok(out)
}

/// One period of a stable limit cycle, densely sampled.
#[derive(Debug, Clone, PartialEq)]
pub struct LimitCycle {
    pub states: Vec<State>,
    pub period: f64,
}

/// Relaxes an ODE onto its limit cycle and records one period.
///
/// The period is the mean spacing of upward zero crossings of the first
/// state component over `n_periods` cycles, located by linear interpolation.
pub fn trace_limit_cycle(
    spec: &SystemSpec,
    x0: &State,
    burn_in: f64,
    inner_dt: f64,
    n_periods: usize,
) -> Result<LimitCycle> {
    if !spec.is_ode() {
        return Err(invalid("limit cycles are traced for ODE systems only"));
    }
    check_dim(spec.state_dim(), x0.dim())?;
    if n_periods == 0 || !(inner_dt > 0.0) {
        return Err(invalid("need a positive step and at least one period"));
    }
    let mut x = x0.as_slice().to_vec();
    let mut rk = Rk4::new(x.len());
    let burn = (burn_in / inner_dt).round() as usize;
    for i in 0..burn {
        rk.step(spec, &mut x, inner_dt);
        if exceeds(&x) {
            return Err(Error::BlowUp {
                time: (i + 1) as f64 * inner_dt,
            });
        }
    }

    // Advance to the first upward crossing so the stored cycle starts at φ ≈ 0.
    let max_steps = (1e4 / inner_dt) as usize;
    let mut crossings = Vec::new();
    let mut cycle_states = Vec::new();
    let mut t = 0.0;
    for _ in 0..max_steps {
        let prev = x[0];
        rk.step(spec, &mut x, inner_dt);
        t += inner_dt;
        if exceeds(&x) {
            return Err(Error::BlowUp { time: burn_in + t });
        }
        if prev < 0.0 && x[0] >= 0.0 {
            crossings.push(t - inner_dt * x[0] / (x[0] - prev));
        }
        if crossings.len() == 1 {
            cycle_states.push(State(x.clone()));
        }
        if crossings.len() > n_periods {
            break;
        }
    }
    if crossings.len() <= n_periods {
        return Err(invalid("no periodic orbit detected"));
    }
    let period = (crossings[n_periods] - crossings[0]) / n_periods as f64;
    Ok(LimitCycle {
        states: cycle_states,
        period,
    })
}

/// Initial-condition distributions.
#[derive(Debug, Clone, PartialEq)]
pub enum InitialDistribution {
    /// `shift + Beta(alpha, beta)` on the real line.
    ShiftedBeta { shift: f64, alpha: f64, beta: f64 },
    /// Evenly spaced phases along a stored cycle.
    LimitCycle(LimitCycle),
    /// A single state repeated (ergodic sampling from one long run).
    Fixed(State),
}

/// Distribution tags accepted in configuration files.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistributionTag {
    ShiftedBeta,
    LimitCycle,
    Fixed,
}

impl std::str::FromStr for DistributionTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shifted_beta" | "beta" => Ok(DistributionTag::ShiftedBeta),
            "limit_cycle" => Ok(DistributionTag::LimitCycle),
            "fixed" | "ergodic" => Ok(DistributionTag::Fixed),
            other => Err(Error::UnknownDistribution(other.to_string())),
        }
    }
}

pub fn sample_initial(dist: &InitialDistribution, n: usize, seed: u64) -> Result<Vec<State>> {
    if n == 0 {
        return Err(invalid("need at least one sample"));
    }
    match dist {
        InitialDistribution::ShiftedBeta { shift, alpha, beta } => {
            let beta = Beta::new(*alpha, *beta).map_err(|e| invalid(e.to_string()))?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Ok((0..n)
                .map(|_| State(vec![shift + beta.sample(&mut rng)]))
                .collect())
        }
        InitialDistribution::LimitCycle(cycle) => {
            let len = cycle.states.len();
            if len == 0 {
                return Err(invalid("empty limit cycle"));
            }
            Ok((0..n)
                .map(|j| cycle.states[(j * len) / n].clone())
                .collect())
        }
        InitialDistribution::Fixed(state) => Ok(vec![state.clone(); n]),
    }
}

/// `u0(x) = cos(2πx/L)(1 + sin(2πx/L))`, the standard KS training initial field.
pub fn ks_training_field(length: f64, n_grid: usize) -> State {
    State(
        (0..n_grid)
            .map(|i| {
                let x = length * i as f64 / n_grid as f64;
                let a = 2.0 * PI * x / length;
                a.cos() * (1.0 + a.sin())
            })
            .collect(),
    )
}

/// `u0(x) = sin(2πx/L)(1 + cos(2πx/L))`, used for held-out test trajectories.
pub fn ks_test_field(length: f64, n_grid: usize) -> State {
    State(
        (0..n_grid)
            .map(|i| {
                let x = length * i as f64 / n_grid as f64;
                let a = 2.0 * PI * x / length;
                a.sin() * (1.0 + a.cos())
            })
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn logistic_exact(phi0: f64, t: f64) -> f64 {
        phi0 * t.exp() / (1.0 + phi0 * (t.exp() - 1.0))
    }

    #[test]
    fn logistic_fixed_point() {
        let s = State::new(vec![1.0]).unwrap();
        for dt in [1e-3, 0.05, 0.7] {
            let next = step_rk4(&SystemSpec::ToyLogistic, &s, dt).unwrap();
            assert_eq!(next[0], 1.0);
        }
    }

    #[test]
    fn logistic_matches_closed_form() {
        let mut s = State::new(vec![1.4]).unwrap();
        for _ in 0..1000 {
            s = step_rk4(&SystemSpec::ToyLogistic, &s, 1e-3).unwrap();
        }
        let exact = logistic_exact(1.4, 1.0);
        assert!(((s[0] - exact) / exact).abs() <= 1e-8);
    }

    #[test]
    fn lorenz_equilibrium_is_fixed() {
        let s = State::new(vec![0.0; 3]).unwrap();
        let next = step_rk4(&SystemSpec::lorenz63_classic(), &s, 0.01).unwrap();
        assert_eq!(next.as_slice(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn rk4_rejects_ks_and_bad_dt() {
        let s = State::new(vec![0.0; 16]).unwrap();
        let ks = SystemSpec::KuramotoSivashinsky {
            length: 10.0,
            n_grid: 16,
        };
        assert!(step_rk4(&ks, &s, 0.1).is_err());
        let s = State::new(vec![1.0]).unwrap();
        assert!(step_rk4(&SystemSpec::ToyLogistic, &s, 0.0).is_err());
    }

    #[test]
    fn blow_up_is_reported() {
        // φ' = φ − φ² diverges in finite time for φ0 < 0.
        let cfg = TrajectoryConfig::new(0.1, 200, 0.0);
        let x0 = State::new(vec![-5.0]).unwrap();
        match simulate(&SystemSpec::ToyLogistic, &cfg, &x0) {
            Err(Error::BlowUp { time }) => assert!(time > 0.0 && time < 1.0),
            other => panic!("expected blow-up, got {other:?}"),
        }
    }

    #[test]
    fn spec_validation() {
        assert!(SystemSpec::VanDerPol { mu: 0.0 }.validate().is_err());
        assert!(SystemSpec::Lorenz63 {
            sigma: 10.0,
            rho: -1.0,
            beta: 1.0
        }
        .validate()
        .is_err());
        assert!(SystemSpec::KuramotoSivashinsky {
            length: 1.0,
            n_grid: 15
        }
        .validate()
        .is_err());
        assert!(SystemSpec::KuramotoSivashinsky {
            length: 1.0,
            n_grid: 8
        }
        .validate()
        .is_err());
        assert!(SystemSpec::KuramotoSivashinsky {
            length: 1.0,
            n_grid: 32
        }
        .validate()
        .is_ok());
    }

    #[test]
    fn substeps_must_divide() {
        let cfg = TrajectoryConfig::new(0.5, 3, 0.0).with_inner_dt(0.3);
        assert!(cfg.substeps().is_err());
        let cfg = TrajectoryConfig::new(1.0, 3, 0.0).with_inner_dt(1e-3);
        assert_eq!(cfg.substeps().unwrap(), 1000);
    }

    #[test]
    fn two_snapshots_are_delta_apart() {
        let cfg = TrajectoryConfig::new(0.05, 2, 0.0);
        let x0 = State::new(vec![1.4]).unwrap();
        let traj = simulate(&SystemSpec::ToyLogistic, &cfg, &x0).unwrap();
        assert_eq!(traj.len(), 2);
        assert_eq!(traj[0][0], 1.4);
        assert!((traj[1][0] - logistic_exact(1.4, 0.05)).abs() < 1e-12);
    }

    #[test]
    fn zero_mode_exponential_is_one() {
        let c = ks_precompute(16.0 * PI, 128, 1e-3).unwrap();
        assert_eq!(c.e[0], 1.0);
        assert_eq!(c.e2[0], 1.0);
        // q → dt/2 · (e^{dtL/2}−1)/(dtL/2) → dt/2 for L = 0.
        assert!((c.q[0] - 0.5e-3).abs() < 1e-15);
    }

    #[test]
    fn halving_dt_changes_weights() {
        let a = ks_precompute(16.0 * PI, 64, 1e-2).unwrap();
        let b = ks_precompute(16.0 * PI, 64, 5e-3).unwrap();
        assert!(a.e.iter().zip(&b.e).any(|(x, y)| x != y));
        assert!(a.f1.iter().zip(&b.f1).any(|(x, y)| x != y));
    }

    #[test]
    fn ks_zero_is_invariant() {
        let c = ks_precompute(16.0 * PI, 32, 1e-2).unwrap();
        let zero = vec![Complex64::new(0.0, 0.0); 32];
        let next = ks_step(&c, &zero).unwrap();
        assert!(next.iter().all(|z| z.norm() == 0.0));
    }

    #[test]
    fn distribution_tags() {
        assert_eq!(
            "beta".parse::<DistributionTag>().unwrap(),
            DistributionTag::ShiftedBeta
        );
        assert!(matches!(
            "gaussian".parse::<DistributionTag>(),
            Err(Error::UnknownDistribution(_))
        ));
    }

    #[test]
    fn fixed_distribution_copies() {
        let s = State::new(vec![0.01, 1.0, 10.0]).unwrap();
        let xs = sample_initial(&InitialDistribution::Fixed(s.clone()), 4, 0).unwrap();
        assert_eq!(xs, vec![s; 4]);
        assert!(sample_initial(&InitialDistribution::Fixed(xs[0].clone()), 0, 0).is_err());
    }
}
