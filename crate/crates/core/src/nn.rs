//! Minimal dense networks with hand-written backpropagation.
//!
//! Parameters of an [`Mlp`] live in one flat `Vec<f64>` (per layer: weights
//! row-major `out × in`, then biases) so optimizers, checkpoints and
//! finite-difference checks can treat a network as a plain vector.

use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
    Silu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
            Activation::Silu => x / (1.0 + (-x).exp()),
            Activation::Identity => x,
        }
    }

    #[inline]
    fn derivative(self, pre: f64, post: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - post * post,
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-pre).exp());
                s * (1.0 + pre * (1.0 - s))
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Fully connected network; hidden layers use `activation`, the output layer is linear.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    sizes: Vec<usize>,
    activation: Activation,
    #[serde(skip)]
    params: Vec<f64>,
}

/// Per-sample activations kept for the backward pass.
#[derive(Debug, Clone, Default)]
pub struct MlpCache {
    /// `values[0]` is the input; `values[l + 1]` the output of layer `l`.
    values: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

impl MlpCache {
    pub fn output(&self) -> &[f64] {
        self.values.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

impl Mlp {
    /// Randomly initialised network (scaled uniform, zero biases).
    pub fn new<R: Rng>(sizes: &[usize], activation: Activation, rng: &mut R) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs input and output sizes");
        let mut params = Vec::with_capacity(Self::count(sizes));
        for w in sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let gain = if activation == Activation::Relu || activation == Activation::Silu { 2.0 } else { 1.0 };
            let limit = (3.0 * gain / fan_in as f64).sqrt();
            for _ in 0..fan_in * fan_out {
                params.push(rng.random_range(-limit..limit));
            }
            params.extend(std::iter::repeat_n(0.0, fan_out));
        }
        Mlp { sizes: sizes.to_vec(), activation, params }
    }

    pub fn zeros(sizes: &[usize], activation: Activation) -> Self {
        Mlp { sizes: sizes.to_vec(), activation, params: vec![0.0; Self::count(sizes)] }
    }

    pub fn from_params(sizes: &[usize], activation: Activation, params: Vec<f64>) -> Option<Self> {
        (sizes.len() >= 2 && params.len() == Self::count(sizes))
            .then(|| Mlp { sizes: sizes.to_vec(), activation, params })
    }

    pub fn count(sizes: &[usize]) -> usize {
        sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().expect("non-empty sizes")
    }

    pub fn num_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }

    fn layer_offset(&self, layer: usize) -> usize {
        self.sizes[..=layer].windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// `(weights, biases)` slices of one layer.
    pub fn layer(&self, layer: usize) -> (&[f64], &[f64]) {
        let off = self.layer_offset(layer);
        let (i, o) = (self.sizes[layer], self.sizes[layer + 1]);
        (&self.params[off..off + i * o], &self.params[off + i * o..off + i * o + o])
    }

    pub fn layer_mut(&mut self, layer: usize) -> (&mut [f64], &mut [f64]) {
        let off = self.layer_offset(layer);
        let (i, o) = (self.sizes[layer], self.sizes[layer + 1]);
        let (w, rest) = self.params[off..off + i * o + o].split_at_mut(i * o);
        (w, rest)
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.input_dim(), "input dimension mismatch");
        let mut cur = x.to_vec();
        let last = self.num_layers() - 1;
        for l in 0..self.num_layers() {
            let (w, b) = self.layer(l);
            let n_in = self.sizes[l];
            let mut next = b.to_vec();
            for (o, out) in next.iter_mut().enumerate() {
                let row = &w[o * n_in..(o + 1) * n_in];
                *out += row.iter().zip(&cur).map(|(a, b)| a * b).sum::<f64>();
            }
            if l != last {
                next.iter_mut().for_each(|v| *v = self.activation.apply(*v));
            }
            cur = next;
        }
        cur
    }

    pub fn forward_cached(&self, x: &[f64]) -> MlpCache {
        assert_eq!(x.len(), self.input_dim(), "input dimension mismatch");
        let mut values = Vec::with_capacity(self.num_layers() + 1);
        let mut pre = Vec::with_capacity(self.num_layers());
        values.push(x.to_vec());
        let last = self.num_layers() - 1;
        for l in 0..self.num_layers() {
            let (w, b) = self.layer(l);
            let n_in = self.sizes[l];
            let cur = &values[l];
            let mut z = b.to_vec();
            for (o, out) in z.iter_mut().enumerate() {
                let row = &w[o * n_in..(o + 1) * n_in];
                *out += row.iter().zip(cur).map(|(a, b)| a * b).sum::<f64>();
            }
            let a = if l == last { z.clone() } else { z.iter().map(|&v| self.activation.apply(v)).collect() };
            pre.push(z);
            values.push(a);
        }
        MlpCache { values, pre }
    }

    /// Accumulates `∂L/∂θ` into `grads` and returns `∂L/∂x`.
    pub fn backward(&self, cache: &MlpCache, grad_out: &[f64], grads: &mut [f64]) -> Vec<f64> {
        assert_eq!(grads.len(), self.params.len());
        let last = self.num_layers() - 1;
        let mut delta = grad_out.to_vec();
        for l in (0..self.num_layers()).rev() {
            if l != last {
                for (d, (&z, &a)) in delta.iter_mut().zip(cache.pre[l].iter().zip(&cache.values[l + 1])) {
                    *d *= self.activation.derivative(z, a);
                }
            }
            let n_in = self.sizes[l];
            let n_out = self.sizes[l + 1];
            let off = self.layer_offset(l);
            let input = &cache.values[l];
            let (gw, gb) = grads[off..off + n_in * n_out + n_out].split_at_mut(n_in * n_out);
            let (w, _) = self.layer(l);
            let mut grad_in = vec![0.0; n_in];
            for o in 0..n_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                gb[o] += d;
                let grow = &mut gw[o * n_in..(o + 1) * n_in];
                let wrow = &w[o * n_in..(o + 1) * n_in];
                for i in 0..n_in {
                    grow[i] += d * input[i];
                    grad_in[i] += d * wrow[i];
                }
            }
            delta = grad_in;
        }
        delta
    }
}

/// Decoupled-weight-decay Adam.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamW {
    pub fn new(n: usize, weight_decay: f64) -> Self {
        AdamW { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        assert_eq!(params.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * params[i]);
        }
    }
}

/// Cosine-annealed learning rate from `base` down to `floor` over `total` steps.
pub fn cosine_lr(base: f64, floor: f64, step: usize, total: usize) -> f64 {
    if total <= 1 {
        return base;
    }
    let frac = (step.min(total - 1)) as f64 / (total - 1) as f64;
    floor + 0.5 * (base - floor) * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// Sinusoidal embedding of a diffusion step index.
pub fn timestep_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for k in 0..half {
        let freq = (-(10_000f64).ln() * k as f64 / half.max(1) as f64).exp();
        out.push((t as f64 * freq).sin());
    }
    for k in 0..half {
        let freq = (-(10_000f64).ln() * k as f64 / half.max(1) as f64).exp();
        out.push((t as f64 * freq).cos());
    }
    out.resize(dim, 0.0);
    out
}

/// Central finite-difference check of an analytic gradient.
///
/// Returns the largest relative error `|g_a − g_fd| / max(|g_a| + |g_fd|, floor)`
/// over the inspected coordinates.
pub fn max_relative_gradient_error<F>(params: &mut [f64], analytic: &[f64], indices: &[usize], h: f64, floor: f64, mut loss: F) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    let mut worst: f64 = 0.0;
    for &i in indices {
        let orig = params[i];
        params[i] = orig + h;
        let up = loss(params);
        params[i] = orig - h;
        let down = loss(params);
        params[i] = orig;
        let fd = (up - down) / (2.0 * h);
        let denom = (analytic[i].abs() + fd.abs()).max(floor);
        worst = worst.max((analytic[i] - fd).abs() / denom);
    }
    worst
}
