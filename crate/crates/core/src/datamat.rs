//! The `N × M × K` snapshot data matrix and its transformations.
//!
//! Entry `(i, j, k)` is observable `j` evaluated on sample `i` at time index
//! `k`. Internally a matrix is a set of snapshot series plus one window per
//! sample, so ergodic data (overlapping windows of one long run) and
//! augmented KS data never have to be expanded in memory. The on-disk form
//! is always the dense `(i, j, k)` row-major tensor.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::dynamics::State;
use crate::error::{invalid, Error, Result};

pub const MAGIC: &[u8; 4] = b"MZDM";
pub const FORMAT_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    /// Independent initial conditions drawn from a chosen distribution.
    Ensemble,
    /// Lagged windows of a single long trajectory.
    Ergodic,
}

/// Dictionary of observables `g_j` applied to a full state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ObservableDict {
    /// `[1,] x, x², …, x^max_degree` of one state component; the constant
    /// comes first when included.
    Monomials {
        max_degree: u32,
        include_constant: bool,
        #[serde(default)]
        component: usize,
    },
    RawComponents {
        indices: Vec<usize>,
    },
    /// Every `factor`-th grid value starting at `offset`.
    CoarseGrid {
        factor: usize,
        offset: usize,
    },
}

impl ObservableDict {
    pub fn monomials(max_degree: u32, include_constant: bool) -> Self {
        ObservableDict::Monomials {
            max_degree,
            include_constant,
            component: 0,
        }
    }

    pub fn validate(&self, state_dim: usize) -> Result<()> {
        match self {
            ObservableDict::Monomials {
                max_degree,
                component,
                ..
            } => {
                if *max_degree < 1 {
                    return Err(invalid("monomial dictionary needs degree >= 1"));
                }
                if *component >= state_dim {
                    return Err(invalid("monomial component out of range"));
                }
            }
            ObservableDict::RawComponents { indices } => {
                if indices.is_empty() || indices.iter().any(|&i| i >= state_dim) {
                    return Err(invalid("raw component indices out of range"));
                }
            }
            ObservableDict::CoarseGrid { factor, offset } => {
                if *factor == 0 || !state_dim.is_multiple_of(*factor) {
                    return Err(invalid(format!(
                        "coarse-graining factor {factor} does not divide grid size {state_dim}"
                    )));
                }
                if offset >= factor {
                    return Err(invalid("coarse-grid offset must be below the factor"));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self, state_dim: usize) -> usize {
        match self {
            ObservableDict::Monomials {
                max_degree,
                include_constant,
                ..
            } => *max_degree as usize + usize::from(*include_constant),
            ObservableDict::RawComponents { indices } => indices.len(),
            ObservableDict::CoarseGrid { factor, .. } => state_dim / factor,
        }
    }

    pub fn names(&self, state_dim: usize) -> Vec<String> {
        match self {
            ObservableDict::Monomials {
                max_degree,
                include_constant,
                component,
            } => {
                let mut names = Vec::new();
                if *include_constant {
                    names.push("1".to_string());
                }
                names.push(format!("x{component}"));
                for p in 2..=*max_degree {
                    names.push(format!("x{component}^{p}"));
                }
                names
            }
            ObservableDict::RawComponents { indices } => {
                indices.iter().map(|i| format!("x{i}")).collect()
            }
            ObservableDict::CoarseGrid { factor, offset } => (0..state_dim / factor)
                .map(|i| format!("u{}", factor * i + offset))
                .collect(),
        }
    }

    pub fn eval_into(&self, state: &[f64], out: &mut Vec<f64>) {
        match self {
            ObservableDict::Monomials {
                max_degree,
                include_constant,
                component,
            } => {
                let x = state[*component];
                if *include_constant {
                    out.push(1.0);
                }
                let mut p = x;
                out.push(p);
                for _ in 2..=*max_degree {
                    p *= x;
                    out.push(p);
                }
            }
            ObservableDict::RawComponents { indices } => {
                out.extend(indices.iter().map(|&i| state[i]));
            }
            ObservableDict::CoarseGrid { factor, offset } => {
                out.extend(state.iter().skip(*offset).step_by(*factor));
            }
        }
    }

    pub fn eval(&self, state: &[f64]) -> Vec<f64> {
        let mut out = Vec::new();
        self.eval_into(state, &mut out);
        out
    }
}

/// One sample of the matrix: `K` consecutive snapshots of a series, with an
/// optional cyclic channel rotation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Window {
    pub series: usize,
    pub start: usize,
    pub rotation: usize,
}

#[derive(Debug, Clone)]
pub struct DataMatrix {
    n: usize,
    m: usize,
    k: usize,
    delta: f64,
    names: Vec<String>,
    provenance: Provenance,
    embed_lags: usize,
    periodic_width: Option<usize>,
    /// Each series is `len × m`, snapshot-major.
    series: Vec<Arc<Vec<f64>>>,
    windows: Vec<Window>,
}

impl PartialEq for DataMatrix {
    fn eq(&self, other: &Self) -> bool {
        self.shape() == other.shape()
            && self.delta.to_bits() == other.delta.to_bits()
            && self.names == other.names
            && self.provenance == other.provenance
            && self.embed_lags == other.embed_lags
            && self.periodic_width == other.periodic_width
            && self.to_dense() == other.to_dense()
    }
}

/// Sidecar metadata written next to the binary tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sidecar {
    pub observable_names: Vec<String>,
    pub provenance: Provenance,
    #[serde(default = "one")]
    pub embed_lags: usize,
    #[serde(default)]
    pub periodic_width: Option<usize>,
    /// Free-form provenance: seeds, config hash, preset.
    #[serde(default)]
    pub info: BTreeMap<String, String>,
}

fn one() -> usize {
    1
}

impl DataMatrix {
    /// Dense constructor from `(i, j, k)` row-major values.
    pub fn from_dense(
        shape: (usize, usize, usize),
        delta: f64,
        values: &[f64],
        names: Vec<String>,
        provenance: Provenance,
    ) -> Result<Self> {
        let (n, m, k) = shape;
        if values.len() != n * m * k {
            return Err(invalid(format!(
                "expected {} values for shape {n}x{m}x{k}, got {}",
                n * m * k,
                values.len()
            )));
        }
        let series = (0..n)
            .map(|i| {
                let mut s = vec![0.0; k * m];
                for j in 0..m {
                    for t in 0..k {
                        s[t * m + j] = values[(i * m + j) * k + t];
                    }
                }
                Arc::new(s)
            })
            .collect();
        let windows = (0..n)
            .map(|i| Window {
                series: i,
                start: 0,
                rotation: 0,
            })
            .collect();
        let d = DataMatrix {
            n,
            m,
            k,
            delta,
            names,
            provenance,
            embed_lags: 1,
            periodic_width: None,
            series,
            windows,
        };
        d.validate()?;
        Ok(d)
    }

    /// Builds a matrix from series (each `len × m`, snapshot-major) and windows.
    pub fn from_series(
        m: usize,
        k: usize,
        delta: f64,
        series: Vec<Arc<Vec<f64>>>,
        windows: Vec<Window>,
        names: Vec<String>,
        provenance: Provenance,
    ) -> Result<Self> {
        let d = DataMatrix {
            n: windows.len(),
            m,
            k,
            delta,
            names,
            provenance,
            embed_lags: 1,
            periodic_width: None,
            series,
            windows,
        };
        d.validate()?;
        Ok(d)
    }

    fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(invalid("data matrix needs at least one sample"));
        }
        if self.k < 2 {
            return Err(invalid("data matrix needs K >= 2"));
        }
        if self.names.len() != self.m {
            return Err(invalid(format!(
                "{} observable names for {} observables",
                self.names.len(),
                self.m
            )));
        }
        let mut seen = std::collections::HashSet::new();
        if !self.names.iter().all(|n| seen.insert(n)) {
            return Err(invalid("observable names must be unique"));
        }
        for s in &self.series {
            if s.len() % self.m != 0 {
                return Err(invalid("series length is not a multiple of M"));
            }
            if s.iter().any(|v| !v.is_finite()) {
                return Err(invalid("data matrix entries must be finite"));
            }
        }
        for w in &self.windows {
            let len = self
                .series
                .get(w.series)
                .ok_or_else(|| invalid("window refers to a missing series"))?
                .len()
                / self.m;
            if w.start + self.k > len {
                return Err(invalid("window extends past the end of its series"));
            }
        }
        Ok(())
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.n, self.m, self.k)
    }
    pub fn n_samples(&self) -> usize {
        self.n
    }
    pub fn n_observables(&self) -> usize {
        self.m
    }
    pub fn n_times(&self) -> usize {
        self.k
    }
    pub fn delta(&self) -> f64 {
        self.delta
    }
    pub fn observable_names(&self) -> &[String] {
        &self.names
    }
    pub fn provenance(&self) -> Provenance {
        self.provenance
    }
    /// Number of stacked lags `E` (1 when not delay-embedded).
    pub fn embed_lags(&self) -> usize {
        self.embed_lags
    }
    /// Width of one periodic block for coarse-grid KS data.
    pub fn periodic_width(&self) -> Option<usize> {
        self.periodic_width
    }
    pub fn windows(&self) -> &[Window] {
        &self.windows
    }

    /// The samples `idx` in the given order.
    pub fn select_samples(&self, idx: &[usize]) -> Result<DataMatrix> {
        if let Some(&bad) = idx.iter().find(|&&i| i >= self.n) {
            return Err(invalid(format!(
                "sample {bad} out of range for N = {}",
                self.n
            )));
        }
        let out = DataMatrix {
            n: idx.len(),
            windows: idx.iter().map(|&i| self.windows[i]).collect(),
            ..self.clone()
        };
        out.validate()?;
        Ok(out)
    }

    pub fn with_periodic_width(mut self, width: usize) -> Result<Self> {
        if width == 0 || !self.m.is_multiple_of(width) {
            return Err(invalid("periodic width must divide M"));
        }
        self.periodic_width = Some(width);
        Ok(self)
    }

    #[inline]
    fn channel(&self, j: usize, rotation: usize) -> usize {
        match (rotation, self.periodic_width) {
            (0, _) | (_, None) => j,
            (r, Some(w)) => (j / w) * w + (j % w + r) % w,
        }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        let w = self.windows[i];
        self.series[w.series][(w.start + k) * self.m + self.channel(j, w.rotation)]
    }

    /// Copies `D(i, ·, k)` into `out`.
    pub fn snapshot_into(&self, i: usize, k: usize, out: &mut [f64]) {
        let w = self.windows[i];
        let base = (w.start + k) * self.m;
        let s = &self.series[w.series];
        if w.rotation == 0 || self.periodic_width.is_none() {
            out.copy_from_slice(&s[base..base + self.m]);
        } else {
            for (j, o) in out.iter_mut().enumerate() {
                *o = s[base + self.channel(j, w.rotation)];
            }
        }
    }

    pub fn snapshot(&self, i: usize, k: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.m];
        self.snapshot_into(i, k, &mut out);
        out
    }

    /// `D(·, ·, k)` as an `N × M` row-major array.
    pub fn time_slice(&self, k: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.n * self.m];
        for i in 0..self.n {
            self.snapshot_into(i, k, &mut out[i * self.m..(i + 1) * self.m]);
        }
        out
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.n * self.m * self.k];
        for i in 0..self.n {
            for j in 0..self.m {
                for t in 0..self.k {
                    out[(i * self.m + j) * self.k + t] = self.get(i, j, t);
                }
            }
        }
        out
    }

    /// Distinct series with rotations applied, plus each sample's
    /// `(series, start)` in that list. Unrotated series are shared.
    pub fn series_view(&self) -> SeriesView {
        let mut index: BTreeMap<(usize, usize), usize> = BTreeMap::new();
        let mut series = Vec::new();
        let mut origins = Vec::with_capacity(self.n);
        for w in &self.windows {
            let key = (w.series, w.rotation);
            let idx = *index.entry(key).or_insert_with(|| {
                let src = &self.series[w.series];
                let s = if w.rotation == 0 || self.periodic_width.is_none() {
                    Arc::clone(src)
                } else {
                    let len = src.len() / self.m;
                    let mut rotated = vec![0.0; src.len()];
                    for t in 0..len {
                        for j in 0..self.m {
                            rotated[t * self.m + j] = src[t * self.m + self.channel(j, w.rotation)];
                        }
                    }
                    Arc::new(rotated)
                };
                series.push(s);
                series.len() - 1
            });
            origins.push((idx, w.start));
        }
        SeriesView {
            m: self.m,
            series,
            origins,
        }
    }

    pub fn sidecar(&self) -> Sidecar {
        Sidecar {
            observable_names: self.names.clone(),
            provenance: self.provenance,
            embed_lags: self.embed_lags,
            periodic_width: self.periodic_width,
            info: BTreeMap::new(),
        }
    }

    /// Writes the binary tensor: magic, version, `(N, M, K)`, Δ, values.
    pub fn write_binary<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        for d in [self.n, self.m, self.k] {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        w.write_all(&self.delta.to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.k * 8);
        for i in 0..self.n {
            for j in 0..self.m {
                buf.clear();
                for t in 0..self.k {
                    buf.extend_from_slice(&self.get(i, j, t).to_le_bytes());
                }
                w.write_all(&buf)?;
            }
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(r: &mut R, sidecar: &Sidecar) -> Result<Self> {
        let (shape, delta, values) = read_tensor(r)?;
        let mut d = DataMatrix::from_dense(
            shape,
            delta,
            &values,
            sidecar.observable_names.clone(),
            sidecar.provenance,
        )?;
        d.embed_lags = sidecar.embed_lags.max(1);
        if let Some(w) = sidecar.periodic_width {
            d = d.with_periodic_width(w)?;
        }
        Ok(d)
    }

    /// Writes `path` and its sidecar `path.meta.toml`.
    pub fn save(&self, path: &Path, info: &BTreeMap<String, String>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_binary(&mut w)?;
        w.flush()?;
        let mut sidecar = self.sidecar();
        sidecar.info = info.clone();
        let text = toml::to_string(&sidecar).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(sidecar_path(path), text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Self, Sidecar)> {
        let text = std::fs::read_to_string(sidecar_path(path))?;
        let sidecar: Sidecar = toml::from_str(&text).map_err(|e| Error::Format(e.to_string()))?;
        let mut r = BufReader::new(File::open(path)?);
        let d = DataMatrix::read_binary(&mut r, &sidecar)?;
        Ok((d, sidecar))
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.toml");
    PathBuf::from(s)
}

/// Shape, sampling interval and row-major values of a raw tensor.
pub type RawTensor = ((usize, usize, usize), f64, Vec<f64>);

/// Reads a raw `MZDM` tensor.
pub fn read_tensor<R: Read>(r: &mut R) -> Result<RawTensor> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("bad magic bytes".into()));
    }
    let mut b2 = [0u8; 2];
    r.read_exact(&mut b2)?;
    let version = u16::from_le_bytes(b2);
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let mut b8 = [0u8; 8];
    let mut dims = [0usize; 3];
    for d in dims.iter_mut() {
        r.read_exact(&mut b8)?;
        *d = u64::from_le_bytes(b8) as usize;
    }
    r.read_exact(&mut b8)?;
    let delta = f64::from_le_bytes(b8);
    let total = dims[0]
        .checked_mul(dims[1])
        .and_then(|x| x.checked_mul(dims[2]))
        .ok_or_else(|| Error::Format("dimensions overflow".into()))?;
    let mut bytes = vec![0u8; total * 8];
    r.read_exact(&mut bytes)?;
    let values = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(((dims[0], dims[1], dims[2]), delta, values))
}

/// Writes a raw `MZDM` tensor from `(i, j, k)` row-major values.
pub fn write_tensor<W: Write>(
    w: &mut W,
    shape: (usize, usize, usize),
    delta: f64,
    values: &[f64],
) -> Result<()> {
    if values.len() != shape.0 * shape.1 * shape.2 {
        return Err(invalid("tensor shape does not match value count"));
    }
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    for d in [shape.0, shape.1, shape.2] {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    w.write_all(&delta.to_le_bytes())?;
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Distinct snapshot series and per-sample origins, as consumed by the
/// operator extraction.
#[derive(Debug, Clone)]
pub struct SeriesView {
    pub m: usize,
    pub series: Vec<Arc<Vec<f64>>>,
    /// `(series index, start)` of each sample window.
    pub origins: Vec<(usize, usize)>,
}

impl SeriesView {
    pub fn len_of(&self, s: usize) -> usize {
        self.series[s].len() / self.m
    }

    #[inline]
    pub fn snapshot(&self, s: usize, t: usize) -> &[f64] {
        &self.series[s][t * self.m..(t + 1) * self.m]
    }
}

fn eval_series(states: &[State], dict: &ObservableDict) -> Vec<f64> {
    let mut out = Vec::with_capacity(states.len() * dict.len(states[0].dim()));
    for s in states {
        dict.eval_into(s.as_slice(), &mut out);
    }
    out
}

fn check_dict(trajectories: &[&[State]], dict: &ObservableDict) -> Result<usize> {
    let first = trajectories
        .first()
        .and_then(|t| t.first())
        .ok_or_else(|| invalid("no trajectories"))?;
    let dim = first.dim();
    dict.validate(dim)?;
    Ok(dim)
}

/// Ensemble matrix: one sample per trajectory, `D(i, j, k) = g_j(φ_i(k))`.
pub fn build_data_matrix(
    trajectories: &[Vec<State>],
    dict: &ObservableDict,
    delta: f64,
) -> Result<DataMatrix> {
    let refs: Vec<&[State]> = trajectories.iter().map(|t| t.as_slice()).collect();
    let dim = check_dict(&refs, dict)?;
    let k = trajectories[0].len();
    for t in trajectories {
        if t.len() != k {
            return Err(invalid("trajectories have different lengths"));
        }
        if t.iter().any(|s| s.dim() != dim) {
            return Err(invalid("trajectories have different state dimensions"));
        }
    }
    let m = dict.len(dim);
    let series = trajectories
        .iter()
        .map(|t| Arc::new(eval_series(t, dict)))
        .collect();
    let windows = (0..trajectories.len())
        .map(|i| Window {
            series: i,
            start: 0,
            rotation: 0,
        })
        .collect();
    let d = DataMatrix::from_series(
        m,
        k,
        delta,
        series,
        windows,
        dict.names(dim),
        Provenance::Ensemble,
    )?;
    match dict {
        ObservableDict::CoarseGrid { .. } => d.with_periodic_width(m),
        _ => Ok(d),
    }
}

/// Ergodic matrix: a series of length `L` becomes `N = L − K + 1` windows
/// with stride one; window `i` starts at index `i`.
pub fn build_ergodic(
    series: &[State],
    dict: &ObservableDict,
    delta: f64,
    k: usize,
) -> Result<DataMatrix> {
    let dim = check_dict(&[series], dict)?;
    if series.iter().any(|s| s.dim() != dim) {
        return Err(invalid("series has inconsistent state dimensions"));
    }
    if k < 2 || k > series.len() {
        return Err(invalid(format!(
            "window length {k} incompatible with series of length {}",
            series.len()
        )));
    }
    let m = dict.len(dim);
    let values = Arc::new(eval_series(series, dict));
    let windows = (0..=series.len() - k)
        .map(|i| Window {
            series: 0,
            start: i,
            rotation: 0,
        })
        .collect();
    let d = DataMatrix::from_series(
        m,
        k,
        delta,
        vec![values],
        windows,
        dict.names(dim),
        Provenance::Ergodic,
    )?;
    match dict {
        ObservableDict::CoarseGrid { .. } => d.with_periodic_width(m),
        _ => Ok(d),
    }
}

/// Re-windows an ergodic matrix to a new window length; windows keep
/// stride one over the union of the underlying series.
pub fn rewindow(d: &DataMatrix, k: usize) -> Result<DataMatrix> {
    if d.provenance != Provenance::Ergodic {
        return Err(invalid("only ergodic data can be re-windowed"));
    }
    let mut windows = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for w in &d.windows {
        seen.insert((w.series, w.rotation));
    }
    for (s, rot) in seen {
        let len = d.series[s].len() / d.m;
        if len < k {
            continue;
        }
        windows.extend((0..=len - k).map(|start| Window {
            series: s,
            start,
            rotation: rot,
        }));
    }
    let mut out = DataMatrix {
        n: windows.len(),
        k,
        windows,
        ..d.clone()
    };
    out.n = out.windows.len();
    out.validate()?;
    Ok(out)
}

/// Observes every `factor`-th grid point starting at `offset`.
pub fn coarse_grain(snapshots: &[State], factor: usize, offset: usize) -> Result<Vec<Vec<f64>>> {
    let dict = ObservableDict::CoarseGrid { factor, offset };
    let first = snapshots.first().ok_or_else(|| invalid("no snapshots"))?;
    dict.validate(first.dim())?;
    Ok(snapshots.iter().map(|s| dict.eval(s.as_slice())).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentationSpec {
    /// Include the sub-grid offsets `j = 0..factor`.
    pub shift: bool,
    /// Include all cyclic rotations of the periodic channels.
    pub reorder: bool,
}

/// Symmetry augmentation of coarse-grid data.
///
/// `offsets[j]` is the matrix observed on sub-grid offset `j`; without
/// `shift` only `offsets[0]` is used. With `reorder` every sample appears
/// under all cyclic rotations of its channels, the same rotation at every
/// time index.
pub fn augment(offsets: &[DataMatrix], spec: AugmentationSpec) -> Result<DataMatrix> {
    let base = offsets
        .first()
        .ok_or_else(|| invalid("no data to augment"))?;
    let width = base
        .periodic_width
        .ok_or_else(|| invalid("augmentation needs periodic coarse-grid data"))?;
    let parts: &[DataMatrix] = if spec.shift { offsets } else { &offsets[..1] };
    for p in parts {
        if p.shape().1 != base.m || p.k != base.k || p.periodic_width != Some(width) {
            return Err(invalid("augmented parts must share shape and layout"));
        }
    }
    let rotations = if spec.reorder { width } else { 1 };
    let mut series = Vec::new();
    let mut windows = Vec::new();
    for p in parts {
        let offset = series.len();
        series.extend(p.series.iter().cloned());
        for w in &p.windows {
            for r in 0..rotations {
                windows.push(Window {
                    series: w.series + offset,
                    start: w.start,
                    rotation: (w.rotation + r) % width,
                });
            }
        }
    }
    let out = DataMatrix {
        n: windows.len(),
        series,
        windows,
        ..base.clone()
    };
    out.validate()?;
    Ok(out)
}

/// Delay embedding with `e` lags: `M' = M·e`, `K' = K − e + 1`, channel
/// block `l` holds the snapshot lagged by `l` (newest first).
pub fn delay_embed(d: &DataMatrix, e: usize) -> Result<DataMatrix> {
    if e == 0 {
        return Err(invalid("embedding length must be at least 1"));
    }
    if e >= d.k {
        return Err(invalid(format!(
            "embedding length {e} must be below K = {}",
            d.k
        )));
    }
    if e == 1 {
        return Ok(d.clone());
    }
    let m = d.m;
    let series = d
        .series
        .iter()
        .map(|s| {
            let len = s.len() / m;
            let new_len = len + 1 - e;
            let mut out = Vec::with_capacity(new_len * m * e);
            for t in 0..new_len {
                for lag in 0..e {
                    let src = t + e - 1 - lag;
                    out.extend_from_slice(&s[src * m..(src + 1) * m]);
                }
            }
            Arc::new(out)
        })
        .collect();
    let names = (0..e)
        .flat_map(|lag| {
            d.names.iter().map(move |n| {
                if lag == 0 {
                    format!("{n}[t]")
                } else {
                    format!("{n}[t-{lag}]")
                }
            })
        })
        .collect();
    let out = DataMatrix {
        n: d.n,
        m: m * e,
        k: d.k + 1 - e,
        delta: d.delta,
        names,
        provenance: d.provenance,
        embed_lags: d.embed_lags * e,
        periodic_width: d.periodic_width,
        series,
        windows: d.windows.clone(),
    };
    out.validate()?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn states(values: &[f64]) -> Vec<State> {
        values
            .iter()
            .map(|&v| State::new(vec![v]).unwrap())
            .collect()
    }

    #[test]
    fn monomial_row_constant_first() {
        let traj = vec![states(&[2.0, 3.0])];
        let d = build_data_matrix(&traj, &ObservableDict::monomials(2, true), 0.1).unwrap();
        assert_eq!(d.shape(), (1, 3, 2));
        assert_eq!(d.snapshot(0, 0), vec![1.0, 2.0, 4.0]);
        assert_eq!(d.observable_names(), &["1", "x0", "x0^2"]);
    }

    #[test]
    fn ergodic_windows() {
        let series = states(&(0..12).map(|v| v as f64).collect::<Vec<_>>());
        let d = build_ergodic(&series, &ObservableDict::monomials(1, false), 1.0, 3).unwrap();
        assert_eq!(d.shape(), (10, 1, 3));
        for i in 0..10 {
            for k in 0..3 {
                assert_eq!(d.get(i, 0, k), (i + k) as f64);
            }
        }
        assert_eq!(d.provenance(), Provenance::Ergodic);
    }

    #[test]
    fn build_errors() {
        let bad = vec![states(&[1.0, 2.0]), states(&[1.0])];
        assert!(build_data_matrix(&bad, &ObservableDict::monomials(1, true), 1.0).is_err());
        assert!(build_data_matrix(&[], &ObservableDict::monomials(1, true), 1.0).is_err());
        let one = vec![states(&[1.0])];
        assert!(build_data_matrix(&one, &ObservableDict::monomials(1, true), 1.0).is_err());
        assert!(ObservableDict::monomials(0, true).validate(1).is_err());
    }

    #[test]
    fn coarse_grain_partitions_grid() {
        let snap = State::new((0..128).map(|v| v as f64).collect()).unwrap();
        let mut seen = [false; 128];
        for j in 0..4 {
            let obs = coarse_grain(std::slice::from_ref(&snap), 4, j).unwrap();
            assert_eq!(obs[0].len(), 32);
            for &v in &obs[0] {
                assert!(!seen[v as usize]);
                seen[v as usize] = true;
            }
        }
        assert!(seen.iter().all(|&s| s));
        let constant = State::new(vec![2.5; 128]).unwrap();
        assert_eq!(
            coarse_grain(std::slice::from_ref(&constant), 4, 1).unwrap()[0],
            vec![2.5; 32]
        );
        assert!(coarse_grain(std::slice::from_ref(&constant), 3, 0).is_err());
        assert!(coarse_grain(&[constant], 4, 4).is_err());
    }

    fn coarse_parts(n: usize, k: usize) -> Vec<DataMatrix> {
        (0..4)
            .map(|j| {
                let trajs: Vec<Vec<State>> = (0..n)
                    .map(|i| {
                        (0..k)
                            .map(|t| {
                                State::new(
                                    (0..128).map(|x| (i * 1000 + t * 200 + x) as f64).collect(),
                                )
                                .unwrap()
                            })
                            .collect()
                    })
                    .collect();
                build_data_matrix(
                    &trajs,
                    &ObservableDict::CoarseGrid {
                        factor: 4,
                        offset: j,
                    },
                    1.0,
                )
                .unwrap()
            })
            .collect()
    }

    #[test]
    fn augmentation_counts() {
        let parts = coarse_parts(7, 3);
        let r = augment(
            &parts,
            AugmentationSpec {
                shift: false,
                reorder: true,
            },
        )
        .unwrap();
        assert_eq!(r.n_samples(), 224);
        let s = augment(
            &parts,
            AugmentationSpec {
                shift: true,
                reorder: false,
            },
        )
        .unwrap();
        assert_eq!(s.n_samples(), 28);
        let both = augment(
            &parts,
            AugmentationSpec {
                shift: true,
                reorder: true,
            },
        )
        .unwrap();
        assert_eq!(both.n_samples(), 7 * 4 * 32);
    }

    #[test]
    fn rotated_samples_unrotate_to_originals() {
        let parts = coarse_parts(2, 3);
        let r = augment(
            &parts,
            AugmentationSpec {
                shift: false,
                reorder: true,
            },
        )
        .unwrap();
        for (idx, w) in r.windows().iter().enumerate() {
            for t in 0..3 {
                let rotated = r.snapshot(idx, t);
                let original = parts[0].snapshot(w.series, t);
                for c in 0..32 {
                    assert_eq!(rotated[c], original[(c + w.rotation) % 32]);
                }
            }
        }
        // Full-cycle rotation is the identity.
        let w = Window {
            series: 0,
            start: 0,
            rotation: 32 % 32,
        };
        assert_eq!(w.rotation, 0);
    }

    #[test]
    fn augment_needs_periodic_data() {
        let d = build_data_matrix(
            &[states(&[1.0, 2.0])],
            &ObservableDict::monomials(1, true),
            1.0,
        )
        .unwrap();
        assert!(augment(
            &[d],
            AugmentationSpec {
                shift: false,
                reorder: true
            }
        )
        .is_err());
    }

    #[test]
    fn delay_embedding_shapes() {
        let trajs: Vec<Vec<State>> = (0..3)
            .map(|i| states(&(0..5).map(|t| (10 * i + t) as f64).collect::<Vec<_>>()))
            .collect();
        let d = build_data_matrix(&trajs, &ObservableDict::monomials(1, true), 1.0).unwrap();
        assert_eq!(delay_embed(&d, 1).unwrap(), d);
        let e = delay_embed(&d, 3).unwrap();
        assert_eq!(e.shape(), (3, 6, 3));
        for i in 0..3 {
            for k in 0..3 {
                let snap = e.snapshot(i, k);
                assert_eq!(&snap[..2], d.snapshot(i, k + 2).as_slice());
                assert_eq!(&snap[2..4], d.snapshot(i, k + 1).as_slice());
                assert_eq!(&snap[4..], d.snapshot(i, k).as_slice());
            }
        }
        assert!(delay_embed(&d, 5).is_err());
    }

    #[test]
    fn binary_round_trip() {
        let series = states(&[0.5, -1.25, 3.0, 1e-300, 7.0]);
        let d = build_ergodic(&series, &ObservableDict::monomials(2, true), 0.01, 3).unwrap();
        let mut buf = Vec::new();
        d.write_binary(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"MZDM");
        assert_eq!(buf.len(), 4 + 2 + 24 + 8 + 8 * 3 * 3 * 3);
        let back = DataMatrix::read_binary(&mut buf.as_slice(), &d.sidecar()).unwrap();
        assert_eq!(back.to_dense(), d.to_dense());
        assert_eq!(back.delta(), 0.01);
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(DataMatrix::read_binary(&mut bad.as_slice(), &d.sidecar()).is_err());
    }

    #[test]
    fn rewindow_keeps_stride_one() {
        let series = states(&(0..20).map(|v| v as f64).collect::<Vec<_>>());
        let d = build_ergodic(&series, &ObservableDict::monomials(1, false), 1.0, 20).unwrap();
        assert_eq!(d.n_samples(), 1);
        let w = rewindow(&d, 4).unwrap();
        assert_eq!(w.shape(), (17, 1, 4));
        assert_eq!(w.get(16, 0, 3), 19.0);
    }
}
