//! Small fully connected scalar-output networks with hand-written backprop.
//!
//! Parameters live in one flat vector, layer by layer: the weight matrix
//! (row-major, `out x in`) followed by the bias vector. Hidden layers use
//! ReLU; the output layer is linear.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::seed::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    layer_dims: Vec<usize>,
    params: Vec<f64>,
    /// Per-input `(shift, scale)` applied before the first layer.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    input_affine: Option<(Vec<f64>, Vec<f64>)>,
}

impl Mlp {
    /// Three fully connected layers: `input -> hidden -> hidden -> 1`.
    pub fn three_layer(input: usize, hidden: usize, seed: u64) -> Self {
        Self::new(vec![input, hidden, hidden, 1], seed)
    }

    pub fn new(layer_dims: Vec<usize>, seed: u64) -> Self {
        assert!(layer_dims.len() >= 2, "need at least input and output dims");
        assert_eq!(*layer_dims.last().unwrap(), 1, "scalar output only");
        let mut r = rng(seed);
        let mut params = Vec::with_capacity(Self::count(&layer_dims));
        for w in layer_dims.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = (6.0 / fan_in.max(1) as f64).sqrt();
            for _ in 0..fan_in * fan_out {
                params.push(r.random_range(-bound..bound));
            }
            params.extend(std::iter::repeat_n(0.0, fan_out));
        }
        Self {
            layer_dims,
            params,
            input_affine: None,
        }
    }

    /// Rebuilds a network from stored dims and flat parameters.
    pub fn from_parts(layer_dims: Vec<usize>, params: Vec<f64>) -> Option<Self> {
        (layer_dims.len() >= 2
            && *layer_dims.last().unwrap() == 1
            && params.len() == Self::count(&layer_dims))
        .then_some(Self {
            layer_dims,
            params,
            input_affine: None,
        })
    }

    fn count(dims: &[usize]) -> usize {
        dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// Standardizes inputs to zero mean and unit variance over `xs`.
    /// Constant inputs are only centered.
    pub fn fit_input_scaling<'a>(&mut self, xs: impl IntoIterator<Item = &'a [f64]>) {
        let d = self.input_dim();
        let (mut n, mut sum, mut sq) = (0.0, vec![0.0; d], vec![0.0; d]);
        for x in xs {
            n += 1.0;
            for i in 0..d {
                sum[i] += x[i];
                sq[i] += x[i] * x[i];
            }
        }
        if n == 0.0 {
            return;
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let scale = (0..d)
            .map(|i| {
                let var = (sq[i] / n - mean[i] * mean[i]).max(0.0);
                if var > 1e-12 {
                    1.0 / var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        self.input_affine = Some((mean, scale));
    }

    fn prepare(&self, x: &[f64]) -> Vec<f64> {
        match &self.input_affine {
            Some((shift, scale)) => x
                .iter()
                .zip(shift.iter().zip(scale))
                .map(|(v, (m, s))| (v - m) * s)
                .collect(),
            None => x.to_vec(),
        }
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn forward(&self, x: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.input_dim());
        let mut act = self.prepare(x);
        let mut off = 0;
        let last = self.layer_dims.len() - 2;
        for (l, w) in self.layer_dims.windows(2).enumerate() {
            let (fin, fout) = (w[0], w[1]);
            let (wm, rest) = self.params[off..].split_at(fin * fout);
            let b = &rest[..fout];
            let mut next = vec![0.0; fout];
            for (o, z) in next.iter_mut().enumerate() {
                let row = &wm[o * fin..(o + 1) * fin];
                let mut s = b[o];
                for (wi, ai) in row.iter().zip(&act) {
                    s += wi * ai;
                }
                *z = if l < last { s.max(0.0) } else { s };
            }
            off += fin * fout + fout;
            act = next;
        }
        act[0]
    }

    /// Adds `scale * d(output)/d(params)` at input `x` into `grad`.
    pub fn accumulate_grad(&self, x: &[f64], scale: f64, grad: &mut [f64]) {
        debug_assert_eq!(grad.len(), self.params.len());
        let nl = self.layer_dims.len() - 1;
        // Forward pass keeping every layer's post-activation.
        let mut acts: Vec<Vec<f64>> = Vec::with_capacity(nl + 1);
        acts.push(self.prepare(x));
        let mut offsets = Vec::with_capacity(nl);
        let mut off = 0;
        for (l, w) in self.layer_dims.windows(2).enumerate() {
            let (fin, fout) = (w[0], w[1]);
            offsets.push(off);
            let wm = &self.params[off..off + fin * fout];
            let b = &self.params[off + fin * fout..off + fin * fout + fout];
            let prev = &acts[l];
            let next: Vec<f64> = (0..fout)
                .map(|o| {
                    let s = b[o]
                        + wm[o * fin..(o + 1) * fin]
                            .iter()
                            .zip(prev)
                            .map(|(a, b)| a * b)
                            .sum::<f64>();
                    if l + 1 < nl {
                        s.max(0.0)
                    } else {
                        s
                    }
                })
                .collect();
            off += fin * fout + fout;
            acts.push(next);
        }
        // Backward: delta holds dOut/dz for the current layer's pre-activation.
        let mut delta = vec![scale];
        for l in (0..nl).rev() {
            let (fin, fout) = (self.layer_dims[l], self.layer_dims[l + 1]);
            let off = offsets[l];
            let prev = &acts[l];
            for o in 0..fout {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                let gw = &mut grad[off + o * fin..off + (o + 1) * fin];
                for (g, a) in gw.iter_mut().zip(prev) {
                    *g += d * a;
                }
                grad[off + fin * fout + o] += d;
            }
            if l == 0 {
                break;
            }
            let wm = &self.params[off..off + fin * fout];
            let mut back = vec![0.0; fin];
            for o in 0..fout {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                for (bi, wi) in back.iter_mut().zip(&wm[o * fin..(o + 1) * fin]) {
                    *bi += d * wi;
                }
            }
            // ReLU derivative at the previous layer (0 at the kink).
            for (bi, a) in back.iter_mut().zip(prev) {
                if *a <= 0.0 {
                    *bi = 0.0;
                }
            }
            delta = back;
        }
    }
}

/// Adaptive-moment first-order optimizer over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln sum exp(xs)`, stable for large magnitudes. `-inf` for an empty slice.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Softmax of `xs / temperature`.
pub fn softmax(xs: &[f64], temperature: f64) -> Vec<f64> {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| ((x - m) / temperature).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}
