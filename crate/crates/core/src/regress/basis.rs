//! Feature maps of the closed-form families and their least-squares solver.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::linalg::solve_spd;

/// Feature map fixed at fit time. Spline knots depend on the training data
/// and are therefore part of the fitted model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureMap {
    /// `x` itself, no intercept.
    Identity,
    /// `[1, x, x², …, x^degree]`, powers of each input separately,
    /// degree-major: `[1, x_1..x_d, x_1²..x_d², …]`.
    Polynomial { degree: u32 },
    /// `[1, B(x_1), …, B(x_d)]` with one clamped B-spline basis per input.
    Spline { degree: usize, knots: Vec<Vec<f64>> },
}

impl FeatureMap {
    pub fn dim(&self, d_in: usize) -> usize {
        match self {
            FeatureMap::Identity => d_in,
            FeatureMap::Polynomial { degree } => 1 + d_in * *degree as usize,
            FeatureMap::Spline { degree, knots } => {
                1 + knots.iter().map(|k| k.len() + degree - 1).sum::<usize>()
            }
        }
    }

    /// Whether the first feature is the constant intercept.
    pub fn has_intercept(&self) -> bool {
        !matches!(self, FeatureMap::Identity)
    }

    pub fn eval_into(&self, x: &[f64], out: &mut Vec<f64>) {
        match self {
            FeatureMap::Identity => out.extend_from_slice(x),
            FeatureMap::Polynomial { degree } => {
                out.push(1.0);
                let start = out.len();
                out.extend_from_slice(x);
                for p in 1..*degree as usize {
                    for (j, &xj) in x.iter().enumerate() {
                        let prev = out[start + (p - 1) * x.len() + j];
                        out.push(prev * xj);
                    }
                }
            }
            FeatureMap::Spline { degree, knots } => {
                out.push(1.0);
                for (&xj, k) in x.iter().zip(knots) {
                    bspline_basis_into(xj, k, *degree, out);
                }
            }
        }
    }

    /// Row-major `n × dim` design matrix as a column-major nalgebra matrix.
    pub fn design(&self, x: &[f64], d_in: usize) -> DMatrix<f64> {
        let n = x.len() / d_in;
        let p = self.dim(d_in);
        let mut f = DMatrix::zeros(n, p);
        let mut row = Vec::with_capacity(p);
        for i in 0..n {
            row.clear();
            self.eval_into(&x[i * d_in..(i + 1) * d_in], &mut row);
            for (c, v) in row.iter().enumerate() {
                f[(i, c)] = *v;
            }
        }
        f
    }
}

/// Evenly spaced knots over the data range widened by `range_factor` about
/// its midpoint. For data symmetric about zero this is `[f·min, f·max]`.
pub fn knots_for(values: impl Iterator<Item = f64>, n_knots: usize, range_factor: f64) -> Vec<f64> {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let mid = 0.5 * (lo + hi);
    let mut half = 0.5 * (hi - lo) * range_factor;
    if !(half > 0.0) {
        half = 0.5;
    }
    let (a, b) = (mid - half, mid + half);
    (0..n_knots)
        .map(|i| a + (b - a) * i as f64 / (n_knots - 1) as f64)
        .collect()
}

/// Clamped knot vector: end breakpoints repeated `degree + 1` times.
fn knot_vector(breaks: &[f64], degree: usize) -> Vec<f64> {
    let mut t = Vec::with_capacity(breaks.len() + 2 * degree);
    t.extend(std::iter::repeat_n(breaks[0], degree));
    t.extend_from_slice(breaks);
    t.extend(std::iter::repeat_n(*breaks.last().unwrap(), degree));
    t
}

/// Appends the `n_knots + degree − 1` B-spline basis values at `x`. Inputs
/// outside the knot range are clamped, so the fitted spline extends as a
/// constant beyond the boundary knots.
pub fn bspline_basis_into(x: f64, breaks: &[f64], degree: usize, out: &mut Vec<f64>) {
    let t = knot_vector(breaks, degree);
    let nb = breaks.len() + degree - 1;
    let x = x.clamp(breaks[0], *breaks.last().unwrap());
    // Span index `s` with t[s] <= x < t[s+1], the last span closed on the right.
    let mut s = degree;
    while s + 1 < nb && x >= t[s + 1] {
        s += 1;
    }
    // Cox-de Boor, only the degree + 1 nonzero functions.
    let mut vals = vec![0.0; degree + 1];
    let mut left = vec![0.0; degree + 1];
    let mut right = vec![0.0; degree + 1];
    vals[0] = 1.0;
    for j in 1..=degree {
        left[j] = x - t[s + 1 - j];
        right[j] = t[s + j] - x;
        let mut saved = 0.0;
        for r in 0..j {
            let temp = vals[r] / (right[r + 1] + left[j - r]);
            vals[r] = saved + right[r + 1] * temp;
            saved = left[j - r] * temp;
        }
        vals[j] = saved;
    }
    let base = out.len();
    out.resize(base + nb, 0.0);
    for (r, v) in vals.into_iter().enumerate() {
        out[base + s - degree + r] = v;
    }
}

pub fn bspline_basis(x: f64, breaks: &[f64], degree: usize) -> Vec<f64> {
    let mut out = Vec::new();
    bspline_basis_into(x, breaks, degree, &mut out);
    out
}

/// Intercept followed by the B-spline basis values at `x`.
pub fn spline_features(x: f64, knots: &[f64], degree: usize) -> Result<Vec<f64>> {
    if knots.len() < 2 || knots.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(invalid("spline knots must be strictly increasing"));
    }
    let mut out = vec![1.0];
    bspline_basis_into(x, knots, degree, &mut out);
    Ok(out)
}

/// Least squares `min ‖Fθ − Y‖² + λ‖Dθ‖²` where `D` masks the unpenalized
/// intercept column. Returns `θ` as `p × d_out` and the jitter used, if any.
///
/// Solved by Householder QR on the column-equilibrated (and, for ridge,
/// row-augmented) design; a numerically rank-deficient `R` falls back to
/// jittered normal equations.
pub fn least_squares(
    f: &DMatrix<f64>,
    y: &DMatrix<f64>,
    ridge: f64,
    intercept: bool,
) -> (DMatrix<f64>, Option<f64>) {
    let (n, p) = f.shape();
    let scale: Vec<f64> = (0..p)
        .map(|c| {
            let s = f.column(c).norm();
            if s > 0.0 {
                s
            } else {
                1.0
            }
        })
        .collect();
    let penalized = |c: usize| ridge > 0.0 && !(intercept && c == 0);
    let extra = (0..p).filter(|&c| penalized(c)).count();
    let mut a = DMatrix::zeros(n + extra, p);
    let mut b = DMatrix::zeros(n + extra, y.ncols());
    for c in 0..p {
        for r in 0..n {
            a[(r, c)] = f[(r, c)] / scale[c];
        }
    }
    b.rows_mut(0, n).copy_from(y);
    let mut row = n;
    for c in 0..p {
        if penalized(c) {
            a[(row, c)] = ridge.sqrt() / scale[c];
            row += 1;
        }
    }

    let qr = a.qr();
    let r = qr.r();
    let rmax = r.diagonal().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let rank_ok = r.diagonal().iter().all(|v| v.abs() > 1e-13 * rmax);
    let (mut theta, jitter) = if rank_ok {
        let mut qtb = b;
        qr.q_tr_mul(&mut qtb);
        let qtb = qtb.rows(0, p).into_owned();
        let sol = r
            .solve_upper_triangular(&qtb)
            .expect("triangular factor has a nonzero diagonal");
        (sol, None)
    } else {
        let gram = r.transpose() * &r;
        let mut qtb = b;
        qr.q_tr_mul(&mut qtb);
        let rhs = r.transpose() * qtb.rows(0, p);
        solve_spd(&gram, &rhs)
    };
    for c in 0..p {
        for v in theta.row_mut(c).iter_mut() {
            *v /= scale[c];
        }
    }
    (theta, jitter)
}
