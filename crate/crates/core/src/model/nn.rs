//! Fully-connected layers over a flat parameter vector, with hand-written
//! reverse-mode gradients.

use rand::Rng;

/// A dense layer whose weights (row-major, `out x inp`) and biases live at
/// `offset` in the model's flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Dense {
    pub inp: usize,
    pub out: usize,
    pub offset: usize,
}

impl Dense {
    pub fn n_params(&self) -> usize {
        self.out * self.inp + self.out
    }

    fn weights<'a>(&self, theta: &'a [f64]) -> &'a [f64] {
        &theta[self.offset..self.offset + self.out * self.inp]
    }

    fn bias<'a>(&self, theta: &'a [f64]) -> &'a [f64] {
        let b = self.offset + self.out * self.inp;
        &theta[b..b + self.out]
    }

    pub fn forward(&self, theta: &[f64], x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.inp);
        let w = self.weights(theta);
        self.bias(theta)
            .iter()
            .enumerate()
            .map(|(o, b)| {
                let row = &w[o * self.inp..(o + 1) * self.inp];
                b + row.iter().zip(x).map(|(w, x)| w * x).sum::<f64>()
            })
            .collect()
    }

    /// Accumulates parameter gradients into `grad_theta` and returns the input gradient.
    pub fn backward(&self, theta: &[f64], x: &[f64], gy: &[f64], grad_theta: &mut [f64]) -> Vec<f64> {
        let w = self.weights(theta);
        let mut gx = vec![0.0; self.inp];
        let wb = self.offset;
        let bb = self.offset + self.out * self.inp;
        for (o, &g) in gy.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let row = &w[o * self.inp..(o + 1) * self.inp];
            let grow = &mut grad_theta[wb + o * self.inp..wb + (o + 1) * self.inp];
            for i in 0..self.inp {
                grow[i] += g * x[i];
                gx[i] += g * row[i];
            }
            grad_theta[bb + o] += g;
        }
        gx
    }

    /// Uniform initialization with bound `gain / sqrt(inp)`; biases start at zero.
    pub fn init<R: Rng>(&self, theta: &mut [f64], gain: f64, rng: &mut R) {
        let bound = gain / (self.inp as f64).sqrt();
        let n = self.out * self.inp;
        for w in &mut theta[self.offset..self.offset + n] {
            *w = rng.random_range(-bound..=bound);
        }
        for b in &mut theta[self.offset + n..self.offset + n + self.out] {
            *b = 0.0;
        }
    }
}

/// Hidden layers with ReLU and inverted dropout, followed by a linear head.
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct Mlp {
    pub layers: Vec<Dense>,
}

#[derive(Debug, Clone, Default)]
pub(crate) struct MlpTrace {
    /// Input to each layer.
    inputs: Vec<Vec<f64>>,
    /// Pre-activations of hidden layers.
    pre: Vec<Vec<f64>>,
    /// Per-unit dropout multipliers of hidden layers (empty when dropout is off).
    masks: Vec<Vec<f64>>,
}

impl Mlp {
    /// Lays out layers `sizes[0] -> sizes[1] -> ... -> sizes[n]` starting at `offset`.
    pub fn new(sizes: &[usize], offset: usize) -> Self {
        let mut layers = Vec::with_capacity(sizes.len() - 1);
        let mut off = offset;
        for w in sizes.windows(2) {
            let d = Dense {
                inp: w[0],
                out: w[1],
                offset: off,
            };
            off += d.n_params();
            layers.push(d);
        }
        Self { layers }
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(Dense::n_params).sum()
    }

    pub fn init<R: Rng>(&self, theta: &mut [f64], head_gain: f64, rng: &mut R) {
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            let gain = if i == last { head_gain } else { 6f64.sqrt() };
            l.init(theta, gain, rng);
        }
    }

    pub fn forward<R: Rng>(
        &self,
        theta: &[f64],
        x: Vec<f64>,
        dropout: Option<(f64, &mut R)>,
    ) -> (Vec<f64>, MlpTrace) {
        let last = self.layers.len() - 1;
        let mut trace = MlpTrace::default();
        let mut h = x;
        let mut dropout = dropout.filter(|(p, _)| *p > 0.0);
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(theta, &h);
            trace.inputs.push(h);
            if i == last {
                return (z, trace);
            }
            let mut a: Vec<f64> = z.iter().map(|v| v.max(0.0)).collect();
            if let Some((p, rng)) = dropout.as_mut() {
                let keep = 1.0 / (1.0 - *p);
                let mask: Vec<f64> = (0..a.len())
                    .map(|_| if rng.random::<f64>() < *p { 0.0 } else { keep })
                    .collect();
                for (v, m) in a.iter_mut().zip(&mask) {
                    *v *= m;
                }
                trace.masks.push(mask);
            }
            trace.pre.push(z);
            h = a;
        }
        unreachable!("an MLP has at least one layer")
    }

    /// Returns the gradient with respect to the MLP input.
    pub fn backward(&self, theta: &[f64], trace: &MlpTrace, gout: &[f64], grad_theta: &mut [f64]) -> Vec<f64> {
        let mut g = gout.to_vec();
        for i in (0..self.layers.len()).rev() {
            let gx = self.layers[i].backward(theta, &trace.inputs[i], &g, grad_theta);
            if i == 0 {
                return gx;
            }
            let pre = &trace.pre[i - 1];
            g = gx
                .iter()
                .zip(pre)
                .enumerate()
                .map(|(u, (gv, z))| {
                    let m = trace.masks.get(i - 1).map_or(1.0, |m| m[u]);
                    if *z > 0.0 {
                        gv * m
                    } else {
                        0.0
                    }
                })
                .collect();
        }
        unreachable!("an MLP has at least one layer")
    }
}

/// Non-overlapping max pooling; a trailing partial window is kept.
pub(crate) fn max_pool(x: &[f64], kernel: usize) -> (Vec<f64>, Vec<usize>) {
    x.chunks(kernel)
        .enumerate()
        .map(|(c, chunk)| {
            let mut best = 0;
            for (i, v) in chunk.iter().enumerate() {
                if *v > chunk[best] {
                    best = i;
                }
            }
            (chunk[best], c * kernel + best)
        })
        .unzip()
}

pub(crate) fn pooled_len(len: usize, kernel: usize) -> usize {
    len.div_ceil(kernel)
}

/// Linear interpolation of `m` knots onto `n` evenly spaced points with
/// matching endpoints.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Interp {
    m: usize,
    taps: Vec<(usize, usize, f64)>,
}

impl Interp {
    pub fn new(m: usize, n: usize) -> Self {
        let taps = (0..n)
            .map(|i| {
                if m == 1 || n == 1 {
                    return (0, 0, 0.0);
                }
                let pos = i as f64 * (m - 1) as f64 / (n - 1) as f64;
                let lo = (pos.floor() as usize).min(m - 1);
                let hi = (lo + 1).min(m - 1);
                (lo, hi, pos - lo as f64)
            })
            .collect();
        Self { m, taps }
    }

    pub fn apply(&self, knots: &[f64]) -> Vec<f64> {
        debug_assert_eq!(knots.len(), self.m);
        self.taps
            .iter()
            .map(|&(lo, hi, w)| {
                if w == 0.0 {
                    knots[lo]
                } else {
                    (1.0 - w) * knots[lo] + w * knots[hi]
                }
            })
            .collect()
    }

    pub fn out_len(&self) -> usize {
        self.taps.len()
    }

    pub fn transpose(&self, g: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.m];
        for (&(lo, hi, w), gi) in self.taps.iter().zip(g) {
            if w == 0.0 {
                out[lo] += gi;
            } else {
                out[lo] += (1.0 - w) * gi;
                out[hi] += w * gi;
            }
        }
        out
    }
}
