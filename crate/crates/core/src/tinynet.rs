//! Small fully-connected networks with hand-written reverse mode and Adam.
//!
//! Parameters live in one flat buffer (per layer: row-major weight
//! `out x in`, then bias) so optimizers and checkpoints treat every network
//! uniformly. Batched passes go through a GEMM.

use std::hash::Hasher;

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "NetRecord", into = "NetRecord")]
pub struct DenseNet {
    widths: Vec<usize>,
    activations: Vec<Activation>,
    params: Vec<f64>,
}

/// Activations recorded by a forward pass; `acts[0]` is the input batch and
/// `acts[l + 1]` the (post-activation) output of layer `l`.
#[derive(Debug, Clone)]
pub struct Tape {
    batch: usize,
    acts: Vec<Vec<f64>>,
}

impl Tape {
    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn output(&self) -> &[f64] {
        self.acts.last().expect("tape has at least the input")
    }

    /// Feeds the on/off pattern of every ReLU into `hasher`.
    pub fn hash_relu_pattern(&self, net: &DenseNet, hasher: &mut impl Hasher) {
        for (l, act) in net.activations.iter().enumerate() {
            if *act == Activation::Relu {
                for chunk in self.acts[l + 1].chunks(64) {
                    let mut bits = 0u64;
                    for (i, v) in chunk.iter().enumerate() {
                        if *v > 0.0 {
                            bits |= 1 << i;
                        }
                    }
                    hasher.write_u64(bits);
                }
            }
        }
    }
}

impl DenseNet {
    /// Network with the given layer widths; hidden layers use ReLU, the last
    /// layer is linear. Weights and biases are drawn from
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn mlp<R: Rng + ?Sized>(widths: &[usize], rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(widths)?;
        for l in 0..net.num_layers() {
            let bound = 1.0 / (net.widths[l] as f64).sqrt();
            let range = net.layer_range(l);
            for p in &mut net.params[range] {
                *p = rng.random_range(-bound..bound);
            }
        }
        Ok(net)
    }

    pub fn zeros(widths: &[usize]) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::invalid(format!("bad layer widths {widths:?}")));
        }
        let layers = widths.len() - 1;
        let mut activations = vec![Activation::Relu; layers];
        activations[layers - 1] = Activation::None;
        let count = widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        Ok(Self {
            widths: widths.to_vec(),
            activations,
            params: vec![0.0; count],
        })
    }

    /// Zeroes the final layer so the network initially outputs exactly zero.
    pub fn with_zero_output_layer(mut self) -> Self {
        let range = self.layer_range(self.num_layers() - 1);
        self.params[range].fill(0.0);
        self
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn activations(&self) -> &[Activation] {
        &self.activations
    }

    pub fn num_layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn layer_offset(&self, layer: usize) -> usize {
        self.widths[..layer + 1]
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    fn layer_range(&self, layer: usize) -> std::ops::Range<usize> {
        let start = self.layer_offset(layer);
        let (i, o) = (self.widths[layer], self.widths[layer + 1]);
        start..start + i * o + o
    }

    pub fn forward(&self, input: &[f64]) -> Result<(Vec<f64>, Tape)> {
        let tape = self.forward_batch(input, 1)?;
        Ok((tape.output().to_vec(), tape))
    }

    /// Runs `batch` rows of `input` (row-major, `batch x input_width`).
    pub fn forward_batch(&self, input: &[f64], batch: usize) -> Result<Tape> {
        check_len("network input", batch * self.input_width(), input.len())?;
        let mut acts = Vec::with_capacity(self.widths.len());
        acts.push(input.to_vec());
        for l in 0..self.num_layers() {
            let (i, o) = (self.widths[l], self.widths[l + 1]);
            let off = self.layer_offset(l);
            let w = ArrayView2::from_shape((o, i), &self.params[off..off + i * o]).unwrap();
            let b = &self.params[off + i * o..off + i * o + o];
            let mut out = vec![0.0; batch * o];
            for row in out.chunks_exact_mut(o) {
                row.copy_from_slice(b);
            }
            {
                let x = ArrayView2::from_shape((batch, i), &acts[l]).unwrap();
                let mut y = ArrayViewMut2::from_shape((batch, o), &mut out).unwrap();
                general_mat_mul(1.0, &x, &w.t(), 1.0, &mut y);
            }
            if self.activations[l] == Activation::Relu {
                for v in &mut out {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
            acts.push(out);
        }
        Ok(Tape { batch, acts })
    }

    pub fn backward(&self, tape: &Tape, d_output: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut grads = vec![0.0; self.num_params()];
        let d_input = self.backward_batch(tape, d_output, &mut grads)?;
        Ok((grads, d_input))
    }

    /// Accumulates parameter gradients into `grads` and returns `dL/dinput`.
    pub fn backward_batch(&self, tape: &Tape, d_output: &[f64], grads: &mut [f64]) -> Result<Vec<f64>> {
        let batch = tape.batch;
        check_len("tape layers", self.widths.len(), tape.acts.len())?;
        check_len("tape input", batch * self.input_width(), tape.acts[0].len())?;
        check_len("output gradient", batch * self.output_width(), d_output.len())?;
        check_len("parameter gradient", self.num_params(), grads.len())?;

        let mut delta = d_output.to_vec();
        for l in (0..self.num_layers()).rev() {
            let (i, o) = (self.widths[l], self.widths[l + 1]);
            if self.activations[l] == Activation::Relu {
                for (d, a) in delta.iter_mut().zip(&tape.acts[l + 1]) {
                    if *a <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            let off = self.layer_offset(l);
            let dz = ArrayView2::from_shape((batch, o), &delta).unwrap();
            let x = ArrayView2::from_shape((batch, i), &tape.acts[l]).unwrap();
            {
                let (gw, gb) = grads[off..off + i * o + o].split_at_mut(i * o);
                let mut gw = ArrayViewMut2::from_shape((o, i), gw).unwrap();
                general_mat_mul(1.0, &dz.t(), &x, 1.0, &mut gw);
                for row in delta.chunks_exact(o) {
                    for (g, d) in gb.iter_mut().zip(row) {
                        *g += d;
                    }
                }
            }
            let w = ArrayView2::from_shape((o, i), &self.params[off..off + i * o]).unwrap();
            let mut d_in = vec![0.0; batch * i];
            {
                let mut dx = ArrayViewMut2::from_shape((batch, i), &mut d_in).unwrap();
                general_mat_mul(1.0, &dz, &w, 0.0, &mut dx);
            }
            delta = d_in;
        }
        Ok(delta)
    }
}

#[derive(Serialize, Deserialize)]
struct LayerRecord {
    name: String,
    weight_shape: [usize; 2],
    weight: Vec<f64>,
    bias: Vec<f64>,
    activation: Activation,
}

#[derive(Serialize, Deserialize)]
struct NetRecord {
    layers: Vec<LayerRecord>,
}

impl From<DenseNet> for NetRecord {
    fn from(net: DenseNet) -> Self {
        let layers = (0..net.num_layers())
            .map(|l| {
                let (i, o) = (net.widths[l], net.widths[l + 1]);
                let off = net.layer_offset(l);
                LayerRecord {
                    name: format!("layer{l}"),
                    weight_shape: [o, i],
                    weight: net.params[off..off + i * o].to_vec(),
                    bias: net.params[off + i * o..off + i * o + o].to_vec(),
                    activation: net.activations[l],
                }
            })
            .collect();
        NetRecord { layers }
    }
}

impl TryFrom<NetRecord> for DenseNet {
    type Error = String;

    fn try_from(rec: NetRecord) -> std::result::Result<Self, String> {
        let first = rec.layers.first().ok_or("network without layers")?;
        let mut widths = vec![first.weight_shape[1]];
        let mut activations = Vec::new();
        let mut params = Vec::new();
        for layer in rec.layers {
            let [o, i] = layer.weight_shape;
            if i != *widths.last().unwrap() {
                return Err(format!("{}: input width {i} does not chain", layer.name));
            }
            if layer.weight.len() != o * i || layer.bias.len() != o {
                return Err(format!("{}: tensor size does not match shape", layer.name));
            }
            widths.push(o);
            activations.push(layer.activation);
            params.extend(layer.weight);
            params.extend(layer.bias);
        }
        Ok(DenseNet {
            widths,
            activations,
            params,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam moments for one flat parameter group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl Adam {
    pub fn new(len: usize) -> Self {
        Self::with_config(len, AdamConfig::default())
    }

    pub fn with_config(len: usize, config: AdamConfig) -> Self {
        Self {
            config,
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
        check_len("adam params", self.m.len(), params.len())?;
        check_len("adam grads", self.m.len(), grads.len())?;
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }

    /// Rebuilds per-row moments after rows of width `width` were cloned,
    /// split or removed. `sources[i]` is the old row feeding new row `i`;
    /// `None` starts from zero moments.
    pub fn remap_rows(&mut self, sources: &[Option<usize>], width: usize) {
        let mut m = vec![0.0; sources.len() * width];
        let mut v = vec![0.0; sources.len() * width];
        for (new, src) in sources.iter().enumerate() {
            if let Some(old) = src {
                m[new * width..(new + 1) * width].copy_from_slice(&self.m[old * width..(old + 1) * width]);
                v[new * width..(new + 1) * width].copy_from_slice(&self.v[old * width..(old + 1) * width]);
            }
        }
        self.m = m;
        self.v = v;
    }
}

pub fn adam_step(state: &mut Adam, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
    state.step(params, grads, lr)
}
