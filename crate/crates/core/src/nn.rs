//! Minimal fully connected networks with reverse-mode gradients.
//!
//! Only the fixed MLP topology is differentiated: a [`DenseNet`] is a chain of
//! affine layers, each followed by an elementwise activation. Backpropagation
//! returns both the parameter gradient and the input gradient of
//! `upstreamᵀ net(x)` in a single pass.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, check_finite, Error, Result};

const NET_FORMAT: &str = "cfopt-dense-net";
const NET_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
    Sigmoid,
}

impl Activation {
    fn apply(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => pre.max(0.0),
            Activation::Identity => pre,
            Activation::Sigmoid => 1.0 / (1.0 + (-pre).exp()),
        }
    }

    /// Derivative expressed through the pre-activation and the output.
    /// The relu subgradient at exactly zero is taken to be 0.
    fn derivative(self, pre: f64, out: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
            Activation::Sigmoid => out * (1.0 - out),
        }
    }
}

/// One affine layer followed by an activation. Weights are row-major
/// `[out_dim × in_dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Dense {
    pub fn new(
        in_dim: usize,
        out_dim: usize,
        weights: Vec<f64>,
        bias: Vec<f64>,
        activation: Activation,
    ) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::Input("layer dimensions must be positive".into()));
        }
        check_dim("layer weights", in_dim * out_dim, weights.len())?;
        check_dim("layer bias", out_dim, bias.len())?;
        check_finite("layer weights", &weights)?;
        check_finite("layer bias", &bias)?;
        Ok(Self {
            in_dim,
            out_dim,
            weights,
            bias,
            activation,
        })
    }

    /// Glorot-uniform weights in `±sqrt(6 / (fan_in + fan_out))`, zero bias.
    pub fn glorot<R: Rng + ?Sized>(
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let weights = (0..in_dim * out_dim)
            .map(|_| rng.random_range(-limit..=limit))
            .collect();
        Self {
            in_dim,
            out_dim,
            weights,
            bias: vec![0.0; out_dim],
            activation,
        }
    }

    fn pre_activation(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .chunks_exact(self.in_dim)
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>() + b)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet {
    layers: Vec<Dense>,
}

/// Values recorded during a forward pass, reused by backpropagation.
struct Tape {
    /// `inputs[k]` is the input of layer k; the final entry is the network output.
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

impl DenseNet {
    pub fn new(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Input("a network needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            check_dim("layer chaining", pair[0].out_dim, pair[1].in_dim)?;
        }
        for layer in &layers {
            check_dim("layer weights", layer.in_dim * layer.out_dim, layer.weights.len())?;
            check_dim("layer bias", layer.out_dim, layer.bias.len())?;
            check_finite("layer parameters", &layer.weights)?;
            check_finite("layer parameters", &layer.bias)?;
        }
        Ok(Self { layers })
    }

    /// Glorot-initialised MLP through the given widths. Hidden layers use
    /// `hidden`, the last layer uses `output`.
    pub fn mlp<R: Rng + ?Sized>(
        widths: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::Input(format!("invalid MLP widths {widths:?}")));
        }
        let n = widths.len() - 1;
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(k, w)| {
                let act = if k + 1 == n { output } else { hidden };
                Dense::glorot(w[0], w[1], act, rng)
            })
            .collect();
        Self::new(layers)
    }

    /// Single affine layer with identity activation.
    pub fn linear(weights: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        let out = bias.len();
        if out == 0 || !weights.len().is_multiple_of(out) {
            return Err(Error::Input("linear weights must be [out × in]".into()));
        }
        let inp = weights.len() / out;
        Self::new(vec![Dense::new(inp, out, weights, bias, Activation::Identity)?])
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim("network input", self.input_dim(), x.len())?;
        let mut h = x.to_vec();
        for layer in &self.layers {
            h = layer
                .pre_activation(&h)
                .into_iter()
                .map(|p| layer.activation.apply(p))
                .collect();
        }
        Ok(h)
    }

    fn record(&self, x: &[f64]) -> Tape {
        let mut inputs = Vec::with_capacity(self.layers.len() + 1);
        let mut pre = Vec::with_capacity(self.layers.len());
        inputs.push(x.to_vec());
        for layer in &self.layers {
            let p = layer.pre_activation(inputs.last().expect("tape input"));
            inputs.push(p.iter().map(|&v| layer.activation.apply(v)).collect());
            pre.push(p);
        }
        Tape { inputs, pre }
    }

    /// Backpropagates `upstream` through the network at `x`, returning the
    /// gradient of `upstreamᵀ net(x)` with respect to the parameters and to `x`.
    pub fn backward(&self, x: &[f64], upstream: &[f64]) -> Result<(NetGrad, Vec<f64>)> {
        check_dim("network input", self.input_dim(), x.len())?;
        check_dim("upstream gradient", self.output_dim(), upstream.len())?;
        let tape = self.record(x);
        let mut grads: Vec<LayerGrad> = Vec::with_capacity(self.layers.len());
        let mut delta_out = upstream.to_vec();
        for (k, layer) in self.layers.iter().enumerate().rev() {
            let out = &tape.inputs[k + 1];
            let delta: Vec<f64> = delta_out
                .iter()
                .zip(&tape.pre[k])
                .zip(out)
                .map(|((d, &p), &o)| d * layer.activation.derivative(p, o))
                .collect();
            let input = &tape.inputs[k];
            let mut gw = vec![0.0; layer.weights.len()];
            for (row, d) in gw.chunks_exact_mut(layer.in_dim).zip(&delta) {
                for (g, xi) in row.iter_mut().zip(input) {
                    *g = d * xi;
                }
            }
            let mut back = vec![0.0; layer.in_dim];
            for (row, d) in layer.weights.chunks_exact(layer.in_dim).zip(&delta) {
                for (b, w) in back.iter_mut().zip(row) {
                    *b += w * d;
                }
            }
            grads.push(LayerGrad {
                weights: gw,
                bias: delta,
            });
            delta_out = back;
        }
        grads.reverse();
        Ok((NetGrad { layers: grads }, delta_out))
    }

    /// `∇ₓ (vᵀ net(x))`.
    pub fn vjp_input(&self, x: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        Ok(self.backward(x, v)?.1)
    }

    /// `∂(upstreamᵀ net(x)) / ∂params`.
    pub fn grad_params(&self, x: &[f64], upstream: &[f64]) -> Result<NetGrad> {
        Ok(self.backward(x, upstream)?.0)
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    /// Parameters flattened in declaration order: W₁, b₁, W₂, b₂, …
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_params_flat(&mut self, params: &[f64]) -> Result<()> {
        check_dim("flat parameters", self.param_count(), params.len())?;
        check_finite("flat parameters", params)?;
        let mut offset = 0;
        for l in &mut self.layers {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&params[offset..offset + nw]);
            offset += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&params[offset..offset + nb]);
            offset += nb;
        }
        Ok(())
    }

    pub fn to_file(&self) -> NetFile {
        NetFile {
            format: NET_FORMAT.to_string(),
            version: NET_VERSION,
            input_dim: self.input_dim(),
            output_dim: self.output_dim(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerHeader {
                    in_dim: l.in_dim,
                    out_dim: l.out_dim,
                    activation: l.activation,
                })
                .collect(),
            parameters: self.params_flat(),
        }
    }

    pub fn from_file(file: NetFile) -> Result<Self> {
        if file.format != NET_FORMAT || file.version != NET_VERSION {
            return Err(Error::Input(format!(
                "unsupported network format {} v{}",
                file.format, file.version
            )));
        }
        let mut offset = 0;
        let mut layers = Vec::with_capacity(file.layers.len());
        for h in &file.layers {
            let nw = h.in_dim * h.out_dim;
            if offset + nw + h.out_dim > file.parameters.len() {
                return Err(Error::Input("network parameter block too short".into()));
            }
            let w = file.parameters[offset..offset + nw].to_vec();
            offset += nw;
            let b = file.parameters[offset..offset + h.out_dim].to_vec();
            offset += h.out_dim;
            layers.push(Dense::new(h.in_dim, h.out_dim, w, b, h.activation)?);
        }
        check_dim("network parameter block", offset, file.parameters.len())?;
        let net = Self::new(layers)?;
        check_dim("declared input_dim", net.input_dim(), file.input_dim)?;
        check_dim("declared output_dim", net.output_dim(), file.output_dim)?;
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.to_file())
            .map_err(|e| Error::format(path, e))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: NetFile = serde_json::from_str(&text).map_err(|e| Error::format(path, e))?;
        Self::from_file(file)
    }
}

/// On-disk network: a header of layer shapes and activations, then all
/// parameters row-major in declaration order.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetFile {
    pub format: String,
    pub version: u32,
    pub input_dim: usize,
    pub output_dim: usize,
    pub layers: Vec<LayerHeader>,
    pub parameters: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerHeader {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Parameter gradient with the same shapes as the network it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct NetGrad {
    pub layers: Vec<LayerGrad>,
}

impl NetGrad {
    pub fn zeros_like(net: &DenseNet) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| LayerGrad {
                    weights: vec![0.0; l.weights.len()],
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
        }
    }

    fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.iter_mut().chain(l.bias.iter_mut()))
    }

    fn values(&self) -> impl Iterator<Item = &f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.bias.iter()))
    }

    /// `self += scale · other`.
    pub fn add_scaled(&mut self, other: &NetGrad, scale: f64) {
        for (a, b) in self.values_mut().zip(other.values()) {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for a in self.values_mut() {
            *a *= factor;
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        self.values().copied().collect()
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(|v| v.is_finite())
    }

    fn matches(&self, net: &DenseNet) -> bool {
        self.layers.len() == net.layers.len()
            && self
                .layers
                .iter()
                .zip(&net.layers)
                .all(|(g, l)| g.weights.len() == l.weights.len() && g.bias.len() == l.bias.len())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam moment accumulators for one network.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    first: NetGrad,
    second: NetGrad,
}

impl AdamState {
    pub fn new(net: &DenseNet, config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first: NetGrad::zeros_like(net),
            second: NetGrad::zeros_like(net),
        }
    }

    /// One bias-corrected Adam descent step on `net` along `grad`.
    pub fn step(&mut self, net: &mut DenseNet, grad: &NetGrad) -> Result<()> {
        if !grad.matches(net) || !self.first.matches(net) {
            return Err(Error::Input("gradient shape does not match network".into()));
        }
        if !grad.is_finite() {
            return Err(Error::NonFinite("adam gradient"));
        }
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (((layer, g), m), v) in net
            .layers
            .iter_mut()
            .zip(&grad.layers)
            .zip(&mut self.first.layers)
            .zip(&mut self.second.layers)
        {
            let params = layer.weights.iter_mut().chain(layer.bias.iter_mut());
            let gs = g.weights.iter().chain(g.bias.iter());
            let ms = m.weights.iter_mut().chain(m.bias.iter_mut());
            let vs = v.weights.iter_mut().chain(v.bias.iter_mut());
            for (((p, &gi), mi), vi) in params.zip(gs).zip(ms).zip(vs) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *p -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}
