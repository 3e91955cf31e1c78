//! Regression families used as the projection operator.
//!
//! A [`RegressionFamily`] names a parametric function family and how to
//! train it; [`fit`] minimizes the mean squared error (summed over output
//! dimensions) and returns an immutable [`FittedModel`]. Linear, polynomial
//! and spline-ridge families are solved in closed form. Dense and
//! convolutional networks are trained with Adam on hand-written gradients.

mod basis;
mod net;

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, invalid, Error, Result};

pub use basis::{bspline_basis, knots_for, least_squares, spline_features, FeatureMap};
pub use net::{Activation, Net, Scratch};

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FamilyKind {
    /// `y = A x` without intercept; observable dictionaries carry the constant.
    Linear,
    Polynomial {
        degree: u32,
    },
    SplineRidge {
        n_knots: usize,
        degree: usize,
        lambda: f64,
        knot_range_factor: f64,
    },
    Mlp {
        hidden: Vec<usize>,
        #[serde(default)]
        activation: Activation,
    },
    /// Input channels are `d_in / d_out` blocks of width `d_out`.
    Conv1d {
        n_layers: usize,
        channels: usize,
        kernel_size: usize,
        circular: bool,
        #[serde(default)]
        activation: Activation,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub early_stop_patience: usize,
    /// Train on a random subset of at most this many samples.
    #[serde(default)]
    pub max_samples: Option<usize>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            epochs: 500,
            batch_size: 256,
            early_stop_patience: 20,
            max_samples: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case", deny_unknown_fields)]
pub enum Optimizer {
    ClosedForm,
    Adam(AdamConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainerConfig {
    pub optimizer: Optimizer,
    #[serde(default = "default_validation_fraction")]
    pub validation_fraction: f64,
}

fn default_validation_fraction() -> f64 {
    0.1
}

impl TrainerConfig {
    pub fn closed_form() -> Self {
        TrainerConfig {
            optimizer: Optimizer::ClosedForm,
            validation_fraction: 0.0,
        }
    }

    pub fn adam(cfg: AdamConfig) -> Self {
        TrainerConfig {
            optimizer: Optimizer::Adam(cfg),
            validation_fraction: default_validation_fraction(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegressionFamily {
    pub kind: FamilyKind,
    pub trainer: TrainerConfig,
}

impl RegressionFamily {
    pub fn linear() -> Self {
        Self::closed(FamilyKind::Linear)
    }

    pub fn polynomial(degree: u32) -> Self {
        Self::closed(FamilyKind::Polynomial { degree })
    }

    pub fn spline_ridge(
        n_knots: usize,
        degree: usize,
        lambda: f64,
        knot_range_factor: f64,
    ) -> Self {
        Self::closed(FamilyKind::SplineRidge {
            n_knots,
            degree,
            lambda,
            knot_range_factor,
        })
    }

    pub fn mlp(hidden: Vec<usize>, activation: Activation) -> Self {
        RegressionFamily {
            kind: FamilyKind::Mlp { hidden, activation },
            trainer: TrainerConfig::adam(AdamConfig::default()),
        }
    }

    pub fn conv1d(n_layers: usize, channels: usize, kernel_size: usize, circular: bool) -> Self {
        RegressionFamily {
            kind: FamilyKind::Conv1d {
                n_layers,
                channels,
                kernel_size,
                circular,
                activation: Activation::Tanh,
            },
            trainer: TrainerConfig::adam(AdamConfig::default()),
        }
    }

    pub fn with_adam(mut self, cfg: AdamConfig) -> Self {
        self.trainer = TrainerConfig::adam(cfg);
        self
    }

    fn closed(kind: FamilyKind) -> Self {
        RegressionFamily {
            kind,
            trainer: TrainerConfig::closed_form(),
        }
    }

    pub fn is_closed_form(&self) -> bool {
        matches!(
            self.kind,
            FamilyKind::Linear | FamilyKind::Polynomial { .. } | FamilyKind::SplineRidge { .. }
        )
    }

    /// Short name for diagnostics and file names.
    pub fn tag(&self) -> &'static str {
        match self.kind {
            FamilyKind::Linear => "linear",
            FamilyKind::Polynomial { .. } => "polynomial",
            FamilyKind::SplineRidge { .. } => "spline_ridge",
            FamilyKind::Mlp { .. } => "mlp",
            FamilyKind::Conv1d { .. } => "conv1d",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match &self.kind {
            FamilyKind::Linear => {}
            FamilyKind::Polynomial { degree } => {
                if *degree < 1 {
                    return Err(invalid("polynomial degree must be at least 1"));
                }
            }
            FamilyKind::SplineRidge {
                n_knots,
                lambda,
                knot_range_factor,
                ..
            } => {
                if *n_knots < 2 {
                    return Err(invalid("spline needs at least two knots"));
                }
                if !(*lambda >= 0.0) {
                    return Err(invalid("ridge penalty must be nonnegative"));
                }
                if !(*knot_range_factor > 0.0) {
                    return Err(invalid("knot range factor must be positive"));
                }
            }
            FamilyKind::Mlp { hidden, .. } => {
                if hidden.contains(&0) {
                    return Err(invalid("layer sizes must be at least 1"));
                }
            }
            FamilyKind::Conv1d {
                n_layers,
                channels,
                kernel_size,
                ..
            } => {
                if *n_layers == 0 || *channels == 0 {
                    return Err(invalid("convolution needs at least one layer and channel"));
                }
                if kernel_size % 2 == 0 {
                    return Err(invalid("convolution kernel size must be odd"));
                }
            }
        }
        match (&self.trainer.optimizer, self.is_closed_form()) {
            (Optimizer::ClosedForm, false) => {
                return Err(invalid(format!(
                    "{} family cannot be solved in closed form",
                    self.tag()
                )))
            }
            (Optimizer::Adam(cfg), _)
                if (!(cfg.lr > 0.0) || cfg.batch_size == 0 || cfg.epochs == 0) =>
            {
                return Err(invalid("Adam needs lr > 0, batch size and epochs >= 1"));
            }
            _ => {}
        }
        if !(0.0..1.0).contains(&self.trainer.validation_fraction) {
            return Err(invalid("validation fraction must lie in [0, 1)"));
        }
        Ok(())
    }

    /// Network architecture for given input and output dimensions.
    pub fn net(&self, d_in: usize, d_out: usize) -> Result<Net> {
        match &self.kind {
            FamilyKind::Mlp { hidden, activation } => {
                let mut sizes = vec![d_in];
                sizes.extend_from_slice(hidden);
                sizes.push(d_out);
                Ok(Net::Mlp {
                    sizes,
                    act: *activation,
                })
            }
            FamilyKind::Conv1d {
                n_layers,
                channels,
                kernel_size,
                circular,
                activation,
            } => {
                if d_out == 0 || !d_in.is_multiple_of(d_out) {
                    return Err(invalid(format!(
                        "convolution input {d_in} is not a whole number of {d_out}-wide channels"
                    )));
                }
                Ok(Net::Conv {
                    c_in: d_in / d_out,
                    width: d_out,
                    channels: *channels,
                    kernel: *kernel_size,
                    n_layers: *n_layers,
                    circular: *circular,
                    act: *activation,
                })
            }
            _ => Err(invalid(format!("{} family is not a network", self.tag()))),
        }
    }
}

/// Row-major regression samples.
#[derive(Debug, Clone, Copy)]
pub struct Dataset<'a> {
    pub x: &'a [f64],
    pub y: &'a [f64],
    pub d_in: usize,
    pub d_out: usize,
}

impl<'a> Dataset<'a> {
    pub fn new(x: &'a [f64], d_in: usize, y: &'a [f64], d_out: usize) -> Result<Self> {
        if d_in == 0 || d_out == 0 {
            return Err(invalid("regression dimensions must be positive"));
        }
        if !x.len().is_multiple_of(d_in)
            || !y.len().is_multiple_of(d_out)
            || x.len() / d_in != y.len() / d_out
        {
            return Err(invalid(
                "inputs and targets have inconsistent sample counts",
            ));
        }
        if x.is_empty() {
            return Err(invalid("regression needs at least one sample"));
        }
        if x.iter().chain(y).any(|v| !v.is_finite()) {
            return Err(invalid("regression data must be finite"));
        }
        Ok(Dataset { x, y, d_in, d_out })
    }

    pub fn len(&self) -> usize {
        self.x.len() / self.d_in
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn x_row(&self, i: usize) -> &[f64] {
        &self.x[i * self.d_in..(i + 1) * self.d_in]
    }

    pub fn y_row(&self, i: usize) -> &[f64] {
        &self.y[i * self.d_out..(i + 1) * self.d_out]
    }
}

/// Affine standardization wrapped around a network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaling {
    pub x_shift: Vec<f64>,
    pub x_scale: Vec<f64>,
    pub y_shift: Vec<f64>,
    pub y_scale: Vec<f64>,
}

impl Scaling {
    /// Per-dimension statistics for dense nets; per-channel (shared across
    /// the spatial width) for convolutions so translation symmetry survives.
    fn from_data(net: &Net, data: &Dataset) -> Self {
        let (x_groups, y_groups) = match net {
            Net::Mlp { .. } => (
                (0..data.d_in).map(|j| vec![j]).collect::<Vec<_>>(),
                (0..data.d_out).map(|j| vec![j]).collect::<Vec<_>>(),
            ),
            Net::Conv { c_in, width, .. } => (
                (0..*c_in)
                    .map(|c| (c * width..(c + 1) * width).collect())
                    .collect(),
                vec![(0..*width).collect()],
            ),
        };
        let stats = |values: &[f64], dim: usize, groups: &[Vec<usize>]| {
            let n = values.len() / dim;
            let mut shift = vec![0.0; dim];
            let mut scale = vec![1.0; dim];
            for g in groups {
                let count = (n * g.len()) as f64;
                let mean = (0..n)
                    .flat_map(|i| g.iter().map(move |&j| values[i * dim + j]))
                    .sum::<f64>()
                    / count;
                let var = (0..n)
                    .flat_map(|i| g.iter().map(move |&j| values[i * dim + j]))
                    .map(|v| (v - mean) * (v - mean))
                    .sum::<f64>()
                    / count;
                let sd = if var.sqrt() > 1e-12 * mean.abs().max(1e-300) && var > 0.0 {
                    var.sqrt()
                } else {
                    1.0
                };
                for &j in g {
                    shift[j] = mean;
                    scale[j] = sd;
                }
            }
            (shift, scale)
        };
        let (x_shift, x_scale) = stats(data.x, data.d_in, &x_groups);
        let (y_shift, y_scale) = stats(data.y, data.d_out, &y_groups);
        Scaling {
            x_shift,
            x_scale,
            y_shift,
            y_scale,
        }
    }

    fn identity(d_in: usize, d_out: usize) -> Self {
        Scaling {
            x_shift: vec![0.0; d_in],
            x_scale: vec![1.0; d_in],
            y_shift: vec![0.0; d_out],
            y_scale: vec![1.0; d_out],
        }
    }

    fn normalize_x(&self, x: &[f64], out: &mut Vec<f64>) {
        let d = self.x_shift.len();
        out.clear();
        out.extend(
            x.iter()
                .enumerate()
                .map(|(i, v)| (v - self.x_shift[i % d]) / self.x_scale[i % d]),
        );
    }

    fn normalize_y(&self, y: &[f64], out: &mut Vec<f64>) {
        let d = self.y_shift.len();
        out.clear();
        out.extend(
            y.iter()
                .enumerate()
                .map(|(i, v)| (v - self.y_shift[i % d]) / self.y_scale[i % d]),
        );
    }
}

/// A trained member of a regression family.
#[derive(Debug, Clone, PartialEq)]
pub struct FittedModel {
    family: RegressionFamily,
    input_dim: usize,
    output_dim: usize,
    /// Closed form: `d_out × p` row-major coefficients. Networks: flat weights.
    params: Vec<f64>,
    features: Option<FeatureMap>,
    scaling: Option<Scaling>,
    fit_mse: f64,
    validation_mse: Option<f64>,
    jitter: Option<f64>,
    seed: u64,
}

/// Structured-text header of a serialized model.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelHeader {
    format_version: u32,
    family: RegressionFamily,
    input_dim: usize,
    output_dim: usize,
    n_params: usize,
    fit_mse: f64,
    validation_mse: Option<f64>,
    jitter: Option<f64>,
    seed: u64,
    features: Option<FeatureMap>,
    scaling: Option<Scaling>,
}

const MODEL_MAGIC: &str = "MZFM";

impl FittedModel {
    pub fn family(&self) -> &RegressionFamily {
        &self.family
    }
    pub fn input_dim(&self) -> usize {
        self.input_dim
    }
    pub fn output_dim(&self) -> usize {
        self.output_dim
    }
    pub fn params(&self) -> &[f64] {
        &self.params
    }
    pub fn fit_mse(&self) -> f64 {
        self.fit_mse
    }
    pub fn validation_mse(&self) -> Option<f64> {
        self.validation_mse
    }
    /// Diagonal jitter added to a singular normal matrix, if any.
    pub fn jitter(&self) -> Option<f64> {
        self.jitter
    }
    pub fn features(&self) -> Option<&FeatureMap> {
        self.features.as_ref()
    }

    /// Closed-form coefficients as a `d_out × p` matrix; for the linear
    /// family this is the operator matrix itself.
    pub fn coefficients(&self) -> Option<DMatrix<f64>> {
        let f = self.features.as_ref()?;
        let p = f.dim(self.input_dim);
        Some(DMatrix::from_row_slice(self.output_dim, p, &self.params))
    }

    /// A linear-family model with the given `d_out × d_in` matrix.
    pub fn from_matrix(a: &DMatrix<f64>) -> Self {
        let (d_out, d_in) = a.shape();
        let params = (0..d_out)
            .flat_map(|r| (0..d_in).map(move |c| a[(r, c)]))
            .collect();
        FittedModel {
            family: RegressionFamily::linear(),
            input_dim: d_in,
            output_dim: d_out,
            params,
            features: Some(FeatureMap::Identity),
            scaling: None,
            fit_mse: 0.0,
            validation_mse: None,
            jitter: None,
            seed: 0,
        }
    }

    /// A network model with explicit raw parameters and no scaling.
    pub fn from_net_params(
        family: RegressionFamily,
        d_in: usize,
        d_out: usize,
        params: Vec<f64>,
    ) -> Result<Self> {
        family.validate()?;
        let net = family.net(d_in, d_out)?;
        check_dim(net.n_params(), params.len())?;
        Ok(FittedModel {
            family,
            input_dim: d_in,
            output_dim: d_out,
            params,
            features: None,
            scaling: Some(Scaling::identity(d_in, d_out)),
            fit_mse: 0.0,
            validation_mse: None,
            jitter: None,
            seed: 0,
        })
    }

    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.input_dim, x.len())?;
        Ok(self.predict_batch(x))
    }

    /// Predictions for row-major inputs (`x.len()` a multiple of the input
    /// dimension), row-major outputs.
    pub fn predict_batch(&self, x: &[f64]) -> Vec<f64> {
        let n = x.len() / self.input_dim;
        let mut out = vec![0.0; n * self.output_dim];
        if let Some(f) = &self.features {
            let p = f.dim(self.input_dim);
            let mut row = Vec::with_capacity(p);
            for i in 0..n {
                row.clear();
                f.eval_into(&x[i * self.input_dim..(i + 1) * self.input_dim], &mut row);
                for o in 0..self.output_dim {
                    out[i * self.output_dim + o] = self.params[o * p..(o + 1) * p]
                        .iter()
                        .zip(&row)
                        .map(|(a, b)| a * b)
                        .sum();
                }
            }
        } else {
            let net = self
                .family
                .net(self.input_dim, self.output_dim)
                .expect("fitted network family is valid");
            let scaling = self.scaling.as_ref().expect("networks carry a scaling");
            let mut s = Scratch::default();
            let mut u = Vec::with_capacity(self.input_dim);
            for i in 0..n {
                scaling.normalize_x(&x[i * self.input_dim..(i + 1) * self.input_dim], &mut u);
                let y = net.forward(&self.params, &u, &mut s);
                for (o, v) in y.iter().enumerate() {
                    out[i * self.output_dim + o] = scaling.y_shift[o] + scaling.y_scale[o] * v;
                }
            }
        }
        out
    }

    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        let header = ModelHeader {
            format_version: MODEL_FORMAT_VERSION,
            family: self.family.clone(),
            input_dim: self.input_dim,
            output_dim: self.output_dim,
            n_params: self.params.len(),
            fit_mse: self.fit_mse,
            validation_mse: self.validation_mse,
            jitter: self.jitter,
            seed: self.seed,
            features: self.features.clone(),
            scaling: self.scaling.clone(),
        };
        let text = toml::to_string(&header).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(w, "{MODEL_MAGIC} {}", text.len())?;
        w.write_all(text.as_bytes())?;
        for v in &self.params {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read<R: Read>(r: &mut R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Format("missing model header line".into()))?;
        let first = std::str::from_utf8(&bytes[..nl]).map_err(|e| Error::Format(e.to_string()))?;
        let len: usize = first
            .strip_prefix(MODEL_MAGIC)
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| Error::Format("bad model magic".into()))?;
        let body = &bytes[nl + 1..];
        if body.len() < len {
            return Err(Error::Format("truncated model header".into()));
        }
        let text = std::str::from_utf8(&body[..len]).map_err(|e| Error::Format(e.to_string()))?;
        let h: ModelHeader = toml::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
        if h.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported model version {}",
                h.format_version
            )));
        }
        let blob = &body[len..];
        if blob.len() != h.n_params * 8 {
            return Err(Error::Format("parameter blob has the wrong length".into()));
        }
        let params = blob
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(FittedModel {
            family: h.family,
            input_dim: h.input_dim,
            output_dim: h.output_dim,
            params,
            features: h.features,
            scaling: h.scaling,
            fit_mse: h.fit_mse,
            validation_mse: h.validation_mse,
            jitter: h.jitter,
            seed: h.seed,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(&mut std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

/// Mean over samples of the squared error summed over output dimensions.
pub fn cost(model: &FittedModel, data: &Dataset) -> Result<f64> {
    check_dim(model.input_dim, data.d_in)?;
    check_dim(model.output_dim, data.d_out)?;
    Ok(mse(&model.predict_batch(data.x), data.y, data.len()))
}

fn mse(pred: &[f64], y: &[f64], n: usize) -> f64 {
    pred.iter()
        .zip(y)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n as f64
}

/// Fits `family` to the samples by minimizing the MSE cost.
pub fn fit(family: &RegressionFamily, data: &Dataset, seed: u64) -> Result<FittedModel> {
    family.validate()?;
    match &family.trainer.optimizer {
        Optimizer::ClosedForm => {
            let features = match &family.kind {
                FamilyKind::Linear => FeatureMap::Identity,
                FamilyKind::Polynomial { degree } => FeatureMap::Polynomial { degree: *degree },
                FamilyKind::SplineRidge {
                    n_knots,
                    degree,
                    knot_range_factor,
                    ..
                } => FeatureMap::Spline {
                    degree: *degree,
                    knots: (0..data.d_in)
                        .map(|j| {
                            knots_for(
                                (0..data.len()).map(|i| data.x[i * data.d_in + j]),
                                *n_knots,
                                *knot_range_factor,
                            )
                        })
                        .collect(),
                },
                _ => unreachable!("validated closed-form family"),
            };
            fit_closed_form(family, features, data, seed)
        }
        Optimizer::Adam(cfg) => {
            let net = family.net(data.d_in, data.d_out)?;
            let scaling = Scaling::from_data(&net, data);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let init = net.init(&mut rng);
            train_net(family, &net, init, scaling, data, cfg, &mut rng, seed)
        }
    }
}

fn ridge_of(family: &RegressionFamily) -> f64 {
    match family.kind {
        FamilyKind::SplineRidge { lambda, .. } => lambda,
        _ => 0.0,
    }
}

fn fit_closed_form(
    family: &RegressionFamily,
    features: FeatureMap,
    data: &Dataset,
    seed: u64,
) -> Result<FittedModel> {
    let f = features.design(data.x, data.d_in);
    let y = DMatrix::from_row_slice(data.len(), data.d_out, data.y);
    let (theta, jitter) = least_squares(&f, &y, ridge_of(family), features.has_intercept());
    if theta.iter().any(|v| !v.is_finite()) {
        return Err(Error::TrainingDiverged(
            "non-finite least-squares solution".into(),
        ));
    }
    let p = theta.nrows();
    let params = (0..data.d_out)
        .flat_map(|o| (0..p).map(move |c| (o, c)))
        .map(|(o, c)| theta[(c, o)])
        .collect();
    let mut model = FittedModel {
        family: family.clone(),
        input_dim: data.d_in,
        output_dim: data.d_out,
        params,
        features: Some(features),
        scaling: None,
        fit_mse: 0.0,
        validation_mse: None,
        jitter,
        seed,
    };
    model.fit_mse = mse(&model.predict_batch(data.x), data.y, data.len());
    Ok(model)
}

#[allow(clippy::too_many_arguments)]
fn train_net(
    family: &RegressionFamily,
    net: &Net,
    init: Vec<f64>,
    scaling: Scaling,
    data: &Dataset,
    cfg: &AdamConfig,
    rng: &mut ChaCha8Rng,
    seed: u64,
) -> Result<FittedModel> {
    let (d_in, d_out) = (data.d_in, data.d_out);
    let mut idx: Vec<usize> = (0..data.len()).collect();
    idx.shuffle(rng);
    if let Some(cap) = cfg.max_samples {
        idx.truncate(cap.max(1));
    }
    let n_val = ((idx.len() as f64) * family.trainer.validation_fraction).floor() as usize;
    let n_val = if n_val >= idx.len() { 0 } else { n_val };
    let (val_idx, train_idx) = idx.split_at(n_val);
    let mut train_idx = train_idx.to_vec();

    // Normalized copies of the used samples.
    let mut xs = Vec::with_capacity(data.len() * d_in);
    let mut ys = Vec::with_capacity(data.len() * d_out);
    let mut buf = Vec::new();
    for i in 0..data.len() {
        scaling.normalize_x(data.x_row(i), &mut buf);
        xs.extend_from_slice(&buf);
        scaling.normalize_y(data.y_row(i), &mut buf);
        ys.extend_from_slice(&buf);
    }
    let xrow = |i: usize| &xs[i * d_in..(i + 1) * d_in];
    let yrow = |i: usize| &ys[i * d_out..(i + 1) * d_out];

    let np = net.n_params();
    let mut params = init;
    let mut grad = vec![0.0; np];
    let mut m = vec![0.0; np];
    let mut v = vec![0.0; np];
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let mut t = 0i32;
    let mut s = Scratch::default();

    let eval = |p: &[f64], set: &[usize], s: &mut Scratch| -> f64 {
        let mut total = 0.0;
        for &i in set {
            let out = net.forward(p, xrow(i), s);
            total += out
                .iter()
                .zip(yrow(i))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
        }
        total / set.len().max(1) as f64
    };

    let monitor: &[usize] = if val_idx.is_empty() {
        &train_idx.clone()
    } else {
        val_idx
    };
    let mut best = params.clone();
    let mut best_loss = eval(&params, monitor, &mut s);
    let mut since_best = 0;
    for epoch in 0..cfg.epochs {
        train_idx.shuffle(rng);
        for batch in train_idx.chunks(cfg.batch_size) {
            grad.fill(0.0);
            for &i in batch {
                net.backward(&params, xrow(i), yrow(i), &mut s, &mut grad);
            }
            let inv = 1.0 / batch.len() as f64;
            t += 1;
            let c1 = 1.0 - b1.powi(t);
            let c2 = 1.0 - b2.powi(t);
            for k in 0..np {
                let g = grad[k] * inv;
                m[k] = b1 * m[k] + (1.0 - b1) * g;
                v[k] = b2 * v[k] + (1.0 - b2) * g * g;
                params[k] -= cfg.lr * (m[k] / c1) / ((v[k] / c2).sqrt() + eps);
            }
        }
        let loss = eval(&params, monitor, &mut s);
        if !loss.is_finite() || params.iter().any(|p| !p.is_finite()) {
            return Err(Error::TrainingDiverged(format!(
                "non-finite loss at epoch {epoch}"
            )));
        }
        if loss < best_loss {
            best_loss = loss;
            best.copy_from_slice(&params);
            since_best = 0;
        } else {
            since_best += 1;
            if cfg.early_stop_patience > 0 && since_best >= cfg.early_stop_patience {
                log::debug!("early stop at epoch {epoch}");
                break;
            }
        }
    }
    let mut model = FittedModel {
        family: family.clone(),
        input_dim: d_in,
        output_dim: d_out,
        params: best,
        features: None,
        scaling: Some(scaling),
        fit_mse: 0.0,
        validation_mse: None,
        jitter: None,
        seed,
    };
    let pred = model.predict_batch(data.x);
    let sq = |i: usize| -> f64 {
        (0..d_out)
            .map(|o| {
                let e = pred[i * d_out + o] - data.y[i * d_out + o];
                e * e
            })
            .sum()
    };
    model.fit_mse = train_idx.iter().map(|&i| sq(i)).sum::<f64>() / train_idx.len().max(1) as f64;
    if !val_idx.is_empty() {
        model.validation_mse =
            Some(val_idx.iter().map(|&i| sq(i)).sum::<f64>() / val_idx.len() as f64);
    }
    Ok(model)
}

/// How far a fitted model is from a fixed point of refitting: the family is
/// refit to its own predictions on `x`. Closed-form families report the
/// largest coefficient change; networks (warm-started from their own
/// weights) report the RMS change of the predictions.
pub fn idempotence_residual(model: &FittedModel, x: &[f64]) -> Result<f64> {
    check_dim(0, x.len() % model.input_dim)?;
    let y = model.predict_batch(x);
    let data = Dataset::new(x, model.input_dim, &y, model.output_dim)?;
    match (&model.features, &model.family.trainer.optimizer) {
        (Some(features), _) => {
            let refit = fit_closed_form(&model.family, features.clone(), &data, model.seed)?;
            Ok(refit
                .params
                .iter()
                .zip(&model.params)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max))
        }
        (None, Optimizer::Adam(cfg)) => {
            let net = model.family.net(model.input_dim, model.output_dim)?;
            let mut rng = ChaCha8Rng::seed_from_u64(model.seed.wrapping_add(1));
            let refit = train_net(
                &model.family,
                &net,
                model.params.clone(),
                model.scaling.clone().expect("networks carry a scaling"),
                &data,
                cfg,
                &mut rng,
                model.seed,
            )?;
            let p2 = refit.predict_batch(x);
            Ok((mse(&p2, &y, data.len()) / model.output_dim as f64).sqrt())
        }
        (None, Optimizer::ClosedForm) => Err(invalid("network model without a trainer")),
    }
}

/// `max |Fᵀ r| / N` for a closed-form fit: the residual's correlation with
/// each feature column, after removing the ridge term `λ D θ`.
pub fn residual_orthogonality(model: &FittedModel, data: &Dataset) -> Result<f64> {
    let features = model
        .features
        .as_ref()
        .ok_or_else(|| invalid("orthogonality is defined for closed-form families"))?;
    let f = features.design(data.x, data.d_in);
    let pred = model.predict_batch(data.x);
    let r = DMatrix::from_fn(data.len(), data.d_out, |i, o| {
        data.y[i * data.d_out + o] - pred[i * data.d_out + o]
    });
    let mut ftr = f.transpose() * r;
    let lambda = ridge_of(&model.family);
    let p = ftr.nrows();
    for c in 0..p {
        if lambda > 0.0 && !(features.has_intercept() && c == 0) {
            for o in 0..data.d_out {
                ftr[(c, o)] -= lambda * model.params[o * p + c];
            }
        }
    }
    Ok(ftr.amax() / data.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientCheck {
    /// Largest relative error over components with gradient magnitude
    /// above `small`.
    pub max_rel_error: f64,
    /// Largest absolute error over the remaining near-zero components.
    pub max_abs_error_small: f64,
    pub small: f64,
}

/// Compares the analytic gradient of the MSE cost at raw parameters `theta`
/// with five-point central finite differences of step `1e-3` (error
/// `O(h⁴)`, so roundoff stays near `1e-13` instead of swamping small
/// components).
pub fn gradient_check(
    family: &RegressionFamily,
    theta: &[f64],
    data: &Dataset,
) -> Result<GradientCheck> {
    let net = family.net(data.d_in, data.d_out)?;
    check_dim(net.n_params(), theta.len())?;
    let n = data.len() as f64;
    let mut s = Scratch::default();
    let loss = |p: &[f64], s: &mut Scratch| -> f64 {
        (0..data.len())
            .map(|i| {
                net.forward(p, data.x_row(i), s)
                    .iter()
                    .zip(data.y_row(i))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
            })
            .sum::<f64>()
            / n
    };
    let mut grad = vec![0.0; theta.len()];
    for i in 0..data.len() {
        net.backward(theta, data.x_row(i), data.y_row(i), &mut s, &mut grad);
    }
    grad.iter_mut().for_each(|g| *g /= n);

    let h = 1e-3;
    let small = 1e-6;
    let mut p = theta.to_vec();
    let mut report = GradientCheck {
        max_rel_error: 0.0,
        max_abs_error_small: 0.0,
        small,
    };
    for k in 0..p.len() {
        let orig = p[k];
        let mut at = |dx: f64| {
            p[k] = orig + dx;
            loss(&p, &mut s)
        };
        let fd = (8.0 * (at(h) - at(-h)) - (at(2.0 * h) - at(-2.0 * h))) / (12.0 * h);
        p[k] = orig;
        let scale = grad[k].abs().max(fd.abs());
        let err = (grad[k] - fd).abs();
        if scale > small {
            report.max_rel_error = report.max_rel_error.max(err / scale);
        } else {
            report.max_abs_error_small = report.max_abs_error_small.max(err);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lcg_values(n: usize, seed: u64) -> Vec<f64> {
        let mut s = seed;
        (0..n)
            .map(|_| {
                s = s
                    .wrapping_mul(6364136223846793005)
                    .wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect()
    }

    #[test]
    fn linear_recovers_matrix() {
        let x = lcg_values(60, 1);
        let a = DMatrix::from_row_slice(2, 3, &[1.0, -2.0, 0.5, 0.25, 3.0, -1.0]);
        let y: Vec<f64> = x
            .chunks(3)
            .flat_map(|r| {
                let v = &a * nalgebra::DVector::from_column_slice(r);
                v.iter().copied().collect::<Vec<_>>()
            })
            .collect();
        let data = Dataset::new(&x, 3, &y, 2).unwrap();
        let m = fit(&RegressionFamily::linear(), &data, 0).unwrap();
        assert!((m.coefficients().unwrap() - &a).amax() < 1e-10);
        assert!(m.fit_mse() < 1e-20);
        let p = m.predict(&[1.0, 0.0, 0.0]).unwrap();
        assert!((p[0] - 1.0).abs() < 1e-10 && (p[1] - 0.25).abs() < 1e-10);
        assert!(m.predict(&[1.0]).is_err());
    }

    #[test]
    fn closed_form_is_rejected_for_networks() {
        let mut f = RegressionFamily::mlp(vec![3], Activation::Tanh);
        f.trainer = TrainerConfig::closed_form();
        assert!(f.validate().is_err());
        assert!(RegressionFamily::conv1d(2, 5, 10, true).validate().is_err());
        assert!(RegressionFamily::spline_ridge(1, 3, 1.0, 1.5)
            .validate()
            .is_err());
    }

    #[test]
    fn spline_is_constant_beyond_boundary_knots() {
        let x: Vec<f64> = lcg_values(200, 5);
        let y: Vec<f64> = x.iter().map(|v| (3.0 * v).sin()).collect();
        let data = Dataset::new(&x, 1, &y, 1).unwrap();
        let m = fit(&RegressionFamily::spline_ridge(10, 3, 1e-3, 1.5), &data, 0).unwrap();
        let Some(FeatureMap::Spline { knots, .. }) = m.features() else {
            panic!("spline model without knots")
        };
        let hi = *knots[0].last().unwrap();
        let at = m.predict(&[hi]).unwrap()[0];
        for far in [hi + 0.1, hi + 10.0, 1e6] {
            assert_eq!(m.predict(&[far]).unwrap()[0], at);
        }
    }

    #[test]
    fn serialization_round_trip() {
        let x = lcg_values(40, 2);
        let y: Vec<f64> = x.iter().map(|v| v * v).collect();
        let data = Dataset::new(&x, 1, &y, 1).unwrap();
        let fam = RegressionFamily::mlp(vec![4], Activation::Tanh).with_adam(AdamConfig {
            epochs: 3,
            ..AdamConfig::default()
        });
        for m in [
            fit(&RegressionFamily::polynomial(3), &data, 0).unwrap(),
            fit(&RegressionFamily::spline_ridge(5, 3, 0.1, 1.5), &data, 0).unwrap(),
            fit(&fam, &data, 9).unwrap(),
        ] {
            let mut buf = Vec::new();
            m.write(&mut buf).unwrap();
            let back = FittedModel::read(&mut buf.as_slice()).unwrap();
            assert_eq!(back, m);
            assert_eq!(back.predict_batch(&x), m.predict_batch(&x));
        }
    }

    #[test]
    fn nan_data_is_rejected() {
        assert!(Dataset::new(&[f64::NAN], 1, &[1.0], 1).is_err());
        assert!(Dataset::new(&[1.0, 2.0], 1, &[1.0], 1).is_err());
    }
}
