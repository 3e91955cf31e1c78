//! Dense and 1-D convolutional networks with hand-written backpropagation.
//!
//! Parameters live in one flat vector. Gradients are those of the squared
//! error `Σ_j (ŷ_j − y_j)²` of a single sample, accumulated into a caller
//! buffer.

use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the activation value `a = σ(z)`.
    #[inline]
    fn deriv_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Net {
    /// `sizes[0] → … → sizes[L]`; activation on hidden layers, linear output.
    Mlp { sizes: Vec<usize>, act: Activation },
    /// `n_layers` convolutions with `channels` filters each, followed by a
    /// linear 1×1 head to a single output channel of the input width.
    Conv {
        c_in: usize,
        width: usize,
        channels: usize,
        kernel: usize,
        n_layers: usize,
        circular: bool,
        act: Activation,
    },
}

/// Per-sample buffers reused across calls.
#[derive(Debug, Clone, Default)]
pub struct Scratch {
    acts: Vec<Vec<f64>>,
    delta: Vec<f64>,
    delta_prev: Vec<f64>,
    /// Padded copy of each conv layer's input, `cin × (width + kernel − 1)`.
    padded: Vec<Vec<f64>>,
    dpad: Vec<f64>,
}

/// Copies `cin` rows of `width` into rows of `width + kernel − 1` with
/// `kernel / 2` leading entries, wrapped or zero.
fn pad_rows(
    input: &[f64],
    cin: usize,
    width: usize,
    kernel: usize,
    circular: bool,
    out: &mut Vec<f64>,
) {
    let pad = kernel / 2;
    let pw = width + kernel - 1;
    out.clear();
    out.resize(cin * pw, 0.0);
    for i in 0..cin {
        let src = &input[i * width..(i + 1) * width];
        let dst = &mut out[i * pw..(i + 1) * pw];
        for (j, d) in dst.iter_mut().enumerate() {
            let x = j as isize - pad as isize;
            if circular {
                *d = src[x.rem_euclid(width as isize) as usize];
            } else if x >= 0 && (x as usize) < width {
                *d = src[x as usize];
            }
        }
    }
}

impl Net {
    pub fn input_dim(&self) -> usize {
        match self {
            Net::Mlp { sizes, .. } => sizes[0],
            Net::Conv { c_in, width, .. } => c_in * width,
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            Net::Mlp { sizes, .. } => *sizes.last().unwrap(),
            Net::Conv { width, .. } => *width,
        }
    }

    pub fn n_params(&self) -> usize {
        match self {
            Net::Mlp { sizes, .. } => sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum(),
            Net::Conv {
                c_in,
                channels,
                kernel,
                n_layers,
                ..
            } => {
                let mut n = 0;
                let mut cin = *c_in;
                for _ in 0..*n_layers {
                    n += channels * cin * kernel + channels;
                    cin = *channels;
                }
                n + cin + 1
            }
        }
    }

    /// Uniform fan-in initialization `U(−1/√fan_in, 1/√fan_in)` for weights
    /// and biases.
    pub fn init<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.n_params());
        let mut push = |count: usize, fan_in: usize, p: &mut Vec<f64>| {
            let b = 1.0 / (fan_in as f64).sqrt();
            p.extend((0..count).map(|_| rng.random_range(-b..b)));
        };
        match self {
            Net::Mlp { sizes, .. } => {
                for w in sizes.windows(2) {
                    push(w[0] * w[1] + w[1], w[0], &mut p);
                }
            }
            Net::Conv {
                c_in,
                channels,
                kernel,
                n_layers,
                ..
            } => {
                let mut cin = *c_in;
                for _ in 0..*n_layers {
                    push(channels * cin * kernel + channels, cin * kernel, &mut p);
                    cin = *channels;
                }
                push(cin + 1, cin, &mut p);
            }
        }
        p
    }

    /// Output of the network for one input.
    pub fn forward<'s>(&self, p: &[f64], x: &[f64], s: &'s mut Scratch) -> &'s [f64] {
        match self {
            Net::Mlp { sizes, act } => mlp_forward(sizes, *act, p, x, s),
            Net::Conv { .. } => self.conv_forward(p, x, s),
        }
        s.acts.last().unwrap()
    }

    /// Adds the gradient of `Σ_j (ŷ_j − y_j)²` to `grad` and returns the
    /// squared error.
    pub fn backward(
        &self,
        p: &[f64],
        x: &[f64],
        y: &[f64],
        s: &mut Scratch,
        grad: &mut [f64],
    ) -> f64 {
        match self {
            Net::Mlp { sizes, act } => {
                mlp_forward(sizes, *act, p, x, s);
                mlp_backward(sizes, *act, p, x, y, s, grad)
            }
            Net::Conv { .. } => {
                self.conv_forward(p, x, s);
                self.conv_backward(p, y, s, grad)
            }
        }
    }

    fn conv_forward(&self, p: &[f64], x: &[f64], s: &mut Scratch) {
        let Net::Conv {
            c_in,
            width,
            channels,
            kernel,
            n_layers,
            circular,
            act,
        } = *self
        else {
            unreachable!()
        };
        s.acts.resize(n_layers + 1, Vec::new());
        s.padded.resize(n_layers, Vec::new());
        let pw = width + kernel - 1;
        let mut off = 0;
        let mut cin = c_in;
        for l in 0..n_layers {
            let (before, after) = s.acts.split_at_mut(l);
            let input: &[f64] = if l == 0 { x } else { &before[l - 1] };
            pad_rows(input, cin, width, kernel, circular, &mut s.padded[l]);
            let padded = &s.padded[l];
            let out = &mut after[0];
            out.clear();
            out.resize(channels * width, 0.0);
            let w = &p[off..off + channels * cin * kernel];
            let b = &p[off + channels * cin * kernel..off + channels * cin * kernel + channels];
            for o in 0..channels {
                let row = &mut out[o * width..(o + 1) * width];
                row.fill(b[o]);
                for i in 0..cin {
                    let inp = &padded[i * pw..(i + 1) * pw];
                    let taps = &w[(o * cin + i) * kernel..(o * cin + i + 1) * kernel];
                    for (t, &wt) in taps.iter().enumerate() {
                        for (r, &v) in row.iter_mut().zip(&inp[t..t + width]) {
                            *r += wt * v;
                        }
                    }
                }
                for r in row.iter_mut() {
                    *r = act.apply(*r);
                }
            }
            off += channels * cin * kernel + channels;
            cin = channels;
        }
        let (before, after) = s.acts.split_at_mut(n_layers);
        let hidden = &before[n_layers - 1];
        let out = &mut after[0];
        out.clear();
        out.resize(width, p[off + cin]);
        for o in 0..cin {
            let hw = p[off + o];
            for (r, h) in out.iter_mut().zip(&hidden[o * width..(o + 1) * width]) {
                *r += hw * h;
            }
        }
    }

    fn conv_backward(&self, p: &[f64], y: &[f64], s: &mut Scratch, grad: &mut [f64]) -> f64 {
        let Net::Conv {
            c_in,
            width,
            channels,
            kernel,
            n_layers,
            circular,
            act,
        } = *self
        else {
            unreachable!()
        };
        let pad = kernel / 2;
        // Parameter offsets per layer.
        let mut offs = Vec::with_capacity(n_layers + 1);
        let mut off = 0;
        let mut cin = c_in;
        for _ in 0..n_layers {
            offs.push(off);
            off += channels * cin * kernel + channels;
            cin = channels;
        }
        let head = off;

        let out = &s.acts[n_layers];
        let mut sq = 0.0;
        let mut d_out = vec![0.0; width];
        for ((d, &o), &t) in d_out.iter_mut().zip(out).zip(y) {
            let e = o - t;
            sq += e * e;
            *d = 2.0 * e;
        }
        let hidden = &s.acts[n_layers - 1];
        s.delta.clear();
        s.delta.resize(channels * width, 0.0);
        for o in 0..channels {
            let h = &hidden[o * width..(o + 1) * width];
            grad[head + o] += h.iter().zip(&d_out).map(|(a, b)| a * b).sum::<f64>();
            let hw = p[head + o];
            for xx in 0..width {
                s.delta[o * width + xx] = hw * d_out[xx] * act.deriv_from_output(h[xx]);
            }
        }
        grad[head + channels] += d_out.iter().sum::<f64>();

        let pw = width + kernel - 1;
        for l in (0..n_layers).rev() {
            let cin = if l == 0 { c_in } else { channels };
            let padded = &s.padded[l];
            let off = offs[l];
            let nw = channels * cin * kernel;
            let need_prev = l > 0;
            if need_prev {
                s.dpad.clear();
                s.dpad.resize(cin * pw, 0.0);
            }
            for o in 0..channels {
                let dz = &s.delta[o * width..(o + 1) * width];
                grad[off + nw + o] += dz.iter().sum::<f64>();
                for i in 0..cin {
                    let inp = &padded[i * pw..(i + 1) * pw];
                    let wbase = off + (o * cin + i) * kernel;
                    for t in 0..kernel {
                        grad[wbase + t] += dz
                            .iter()
                            .zip(&inp[t..t + width])
                            .map(|(d, v)| d * v)
                            .sum::<f64>();
                        if need_prev {
                            let wt = p[wbase + t];
                            let dp = &mut s.dpad[i * pw + t..i * pw + t + width];
                            for (a, &d) in dp.iter_mut().zip(dz) {
                                *a += wt * d;
                            }
                        }
                    }
                }
            }
            if need_prev {
                // Fold the padded gradient back onto the unpadded grid.
                s.delta_prev.clear();
                s.delta_prev.resize(cin * width, 0.0);
                for i in 0..cin {
                    for j in 0..pw {
                        let x = j as isize - pad as isize;
                        let idx = if circular {
                            x.rem_euclid(width as isize) as usize
                        } else if x >= 0 && (x as usize) < width {
                            x as usize
                        } else {
                            continue;
                        };
                        s.delta_prev[i * width + idx] += s.dpad[i * pw + j];
                    }
                }
                let a = &s.acts[l - 1];
                for (d, &av) in s.delta_prev.iter_mut().zip(a) {
                    *d *= act.deriv_from_output(av);
                }
                std::mem::swap(&mut s.delta, &mut s.delta_prev);
            }
        }
        sq
    }
}

fn mlp_forward(sizes: &[usize], act: Activation, p: &[f64], x: &[f64], s: &mut Scratch) {
    let n_layers = sizes.len() - 1;
    s.acts.resize(n_layers, Vec::new());
    let mut off = 0;
    for l in 0..n_layers {
        let (din, dout) = (sizes[l], sizes[l + 1]);
        let (before, after) = s.acts.split_at_mut(l);
        let input: &[f64] = if l == 0 { x } else { &before[l - 1] };
        let out = &mut after[0];
        out.clear();
        let w = &p[off..off + din * dout];
        let b = &p[off + din * dout..off + din * dout + dout];
        for o in 0..dout {
            let z = b[o]
                + w[o * din..(o + 1) * din]
                    .iter()
                    .zip(input)
                    .map(|(a, b)| a * b)
                    .sum::<f64>();
            out.push(if l + 1 < n_layers { act.apply(z) } else { z });
        }
        off += din * dout + dout;
    }
}

fn mlp_backward(
    sizes: &[usize],
    act: Activation,
    p: &[f64],
    x: &[f64],
    y: &[f64],
    s: &mut Scratch,
    grad: &mut [f64],
) -> f64 {
    let n_layers = sizes.len() - 1;
    let mut offs = Vec::with_capacity(n_layers);
    let mut off = 0;
    for l in 0..n_layers {
        offs.push(off);
        off += sizes[l] * sizes[l + 1] + sizes[l + 1];
    }
    let out = &s.acts[n_layers - 1];
    let mut sq = 0.0;
    s.delta.clear();
    for (&o, &t) in out.iter().zip(y) {
        let e = o - t;
        sq += e * e;
        s.delta.push(2.0 * e);
    }
    for l in (0..n_layers).rev() {
        let (din, dout) = (sizes[l], sizes[l + 1]);
        let input: &[f64] = if l == 0 { x } else { &s.acts[l - 1] };
        let off = offs[l];
        for o in 0..dout {
            let d = s.delta[o];
            let g = &mut grad[off + o * din..off + (o + 1) * din];
            for (gv, &a) in g.iter_mut().zip(input) {
                *gv += d * a;
            }
            grad[off + din * dout + o] += d;
        }
        if l > 0 {
            s.delta_prev.clear();
            s.delta_prev.resize(din, 0.0);
            let w = &p[off..off + din * dout];
            for o in 0..dout {
                let d = s.delta[o];
                for (dp, &wv) in s.delta_prev.iter_mut().zip(&w[o * din..(o + 1) * din]) {
                    *dp += wv * d;
                }
            }
            for (dp, &a) in s.delta_prev.iter_mut().zip(&s.acts[l - 1]) {
                *dp *= act.deriv_from_output(a);
            }
            std::mem::swap(&mut s.delta, &mut s.delta_prev);
        }
    }
    sq
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn parameter_counts() {
        let mlp = Net::Mlp {
            sizes: vec![1, 5, 5, 1],
            act: Activation::Tanh,
        };
        assert_eq!(mlp.n_params(), 10 + 30 + 6);
        let conv = Net::Conv {
            c_in: 1,
            width: 32,
            channels: 5,
            kernel: 11,
            n_layers: 2,
            circular: true,
            act: Activation::Tanh,
        };
        assert_eq!(conv.n_params(), (55 + 5) + (275 + 5) + 6);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(conv.init(&mut rng).len(), conv.n_params());
    }

    #[test]
    fn identity_mlp_is_affine() {
        let net = Net::Mlp {
            sizes: vec![2, 1],
            act: Activation::Tanh,
        };
        let p = [2.0, -1.0, 0.5];
        let mut s = Scratch::default();
        assert_eq!(net.forward(&p, &[3.0, 4.0], &mut s), &[2.5]);
    }

    #[test]
    fn zero_padding_differs_from_circular() {
        let make = |circular| Net::Conv {
            c_in: 1,
            width: 8,
            channels: 2,
            kernel: 3,
            n_layers: 1,
            circular,
            act: Activation::Identity,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = make(true).init(&mut rng);
        let x: Vec<f64> = (0..8).map(|v| v as f64).collect();
        let mut s = Scratch::default();
        let a = make(true).forward(&p, &x, &mut s).to_vec();
        let b = make(false).forward(&p, &x, &mut s).to_vec();
        assert_eq!(a[3..5], b[3..5]);
        assert_ne!(a[0], b[0]);
    }
}
