//! Fully connected certificate network `B_θ : ℝⁿ → ℝ` with hand-written
//! backpropagation.
//!
//! Hidden layers use a smooth sigmoidal activation so that `x ↦ ∂B/∂x` is
//! Lipschitz on bounded sets; the output layer is affine.
//!
//! Parameter layout (see [`ParamVector`]): layers in order from input to output,
//! each contributing its weight matrix row by row (`outputs × inputs`) followed
//! by its bias vector.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{indexed_rng, SystemModel};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the activation value `a = σ(z)`.
    #[inline]
    fn derivative_from_value(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
        }
    }

    /// `sup |σ'|`.
    pub fn max_slope(self) -> f64 {
        match self {
            Activation::Tanh => 1.0,
        }
    }

    /// `sup |σ''|`; for tanh this is `4 / (3√3)`.
    pub fn max_curvature(self) -> f64 {
        match self {
            Activation::Tanh => 4.0 / (3.0 * 3f64.sqrt()),
        }
    }
}

/// Flat vector of all weights and biases in the documented layer order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(pub Vec<f64>);

impl ParamVector {
    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dot(&self, other: &ParamVector) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|v| *v == 0.0)
    }

    /// `self += scale * other`
    pub fn axpy(&mut self, scale: f64, other: &ParamVector) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += scale * b;
        }
    }

    pub fn scaled(mut self, scale: f64) -> Self {
        self.0.iter_mut().for_each(|v| *v *= scale);
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Layer {
    inputs: usize,
    outputs: usize,
    /// Row-major, `outputs × inputs`.
    weights: Vec<f64>,
    biases: Vec<f64>,
}

impl Layer {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            biases: vec![0.0; outputs],
        }
    }

    fn param_count(&self) -> usize {
        self.weights.len() + self.biases.len()
    }

    #[inline]
    fn affine(&self, input: &[f64], out: &mut [f64]) {
        for (o, (row, b)) in out
            .iter_mut()
            .zip(self.weights.chunks_exact(self.inputs).zip(&self.biases))
        {
            *o = row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>() + b;
        }
    }

    fn frobenius_norm(&self) -> f64 {
        self.weights.iter().map(|w| w * w).sum::<f64>().sqrt()
    }
}

/// The certificate network. Immutable once built; training works on copies.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuralCertificate {
    layers: Vec<Layer>,
    activation: Activation,
}

/// Per-point intermediate values kept for backpropagation.
struct Trace {
    /// Activations of every hidden layer, in order.
    hidden: Vec<Vec<f64>>,
    output: f64,
}

impl NeuralCertificate {
    /// All-zero network with the given `[n, h₁, …, h_L, 1]` sizes.
    pub fn zeros(layer_sizes: &[usize], activation: Activation) -> Result<Self> {
        validate_sizes(layer_sizes)?;
        Ok(Self {
            layers: layer_sizes.windows(2).map(|w| Layer::zeros(w[0], w[1])).collect(),
            activation,
        })
    }

    /// Weights and biases drawn from `U(−1/√fan_in, 1/√fan_in)`, one RNG stream per layer.
    pub fn random(layer_sizes: &[usize], activation: Activation, seed: u64) -> Result<Self> {
        let mut cert = Self::zeros(layer_sizes, activation)?;
        for (l, layer) in cert.layers.iter_mut().enumerate() {
            let mut rng = indexed_rng(seed, l as u64);
            let scale = 1.0 / (layer.inputs as f64).sqrt();
            for w in layer.weights.iter_mut().chain(layer.biases.iter_mut()) {
                *w = rng.gen_range(-scale..=scale);
            }
        }
        Ok(cert)
    }

    pub fn from_params(layer_sizes: &[usize], activation: Activation, params: &ParamVector) -> Result<Self> {
        let mut cert = Self::zeros(layer_sizes, activation)?;
        cert.set_params(params)?;
        Ok(cert)
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        std::iter::once(self.layers[0].inputs)
            .chain(self.layers.iter().map(|l| l.outputs))
            .collect()
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    pub fn params(&self) -> ParamVector {
        let mut out = Vec::with_capacity(self.param_count());
        for layer in &self.layers {
            out.extend_from_slice(&layer.weights);
            out.extend_from_slice(&layer.biases);
        }
        ParamVector(out)
    }

    pub fn set_params(&mut self, params: &ParamVector) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::DimensionMismatch {
                expected: self.param_count(),
                actual: params.len(),
            });
        }
        let mut offset = 0;
        for layer in &mut self.layers {
            let nw = layer.weights.len();
            layer.weights.copy_from_slice(&params.0[offset..offset + nw]);
            offset += nw;
            let nb = layer.biases.len();
            layer.biases.copy_from_slice(&params.0[offset..offset + nb]);
            offset += nb;
        }
        Ok(())
    }

    /// `θ ← θ + scale · direction`
    pub fn step(&mut self, scale: f64, direction: &ParamVector) {
        debug_assert_eq!(direction.len(), self.param_count());
        let mut offset = 0;
        for layer in &mut self.layers {
            for w in layer.weights.iter_mut().chain(layer.biases.iter_mut()) {
                *w += scale * direction.0[offset];
                offset += 1;
            }
        }
    }

    /// Rescales every weight matrix whose Frobenius norm exceeds `radius` back onto
    /// the ball of that radius. Biases are left alone; they do not enter the
    /// gradient bounds.
    pub fn project_weights(&mut self, radius: f64) {
        for layer in &mut self.layers {
            let norm = layer.frobenius_norm();
            if norm > radius {
                let s = radius / norm;
                layer.weights.iter_mut().for_each(|w| *w *= s);
            }
        }
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                actual: x.len(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<f64> {
        self.check_dim(x)?;
        Ok(self.eval(x))
    }

    /// Forward pass without the dimension check.
    pub fn eval(&self, x: &[f64]) -> f64 {
        let width = self.layers.iter().map(|l| l.outputs).max().unwrap_or(1);
        let mut a = vec![0.0; width.max(x.len())];
        let mut b = vec![0.0; width];
        self.eval_with(x, &mut a, &mut b)
    }

    fn eval_with(&self, x: &[f64], a: &mut [f64], b: &mut [f64]) -> f64 {
        let (last, hidden) = self.layers.split_last().expect("at least one layer");
        a[..x.len()].copy_from_slice(x);
        let mut width = x.len();
        for layer in hidden {
            layer.affine(&a[..width], &mut b[..layer.outputs]);
            for v in &mut b[..layer.outputs] {
                *v = self.activation.apply(*v);
            }
            width = layer.outputs;
            a[..width].copy_from_slice(&b[..width]);
        }
        let mut out = [0.0];
        last.affine(&a[..width], &mut out);
        out[0]
    }

    /// Evaluates the network at every point of a flat `len × n` buffer.
    pub fn eval_many(&self, points: &[f64]) -> Vec<f64> {
        let n = self.input_dim();
        debug_assert_eq!(points.len() % n, 0);
        let width = self.layers.iter().map(|l| l.outputs).max().unwrap_or(1);
        let mut a = vec![0.0; width.max(n)];
        let mut b = vec![0.0; width];
        points
            .chunks_exact(n)
            .map(|x| self.eval_with(x, &mut a, &mut b))
            .collect()
    }

    fn trace(&self, x: &[f64]) -> Trace {
        let (last, hidden_layers) = self.layers.split_last().expect("at least one layer");
        let mut hidden: Vec<Vec<f64>> = Vec::with_capacity(hidden_layers.len());
        for layer in hidden_layers {
            let input = hidden.last().map_or(x, Vec::as_slice);
            let mut out = vec![0.0; layer.outputs];
            layer.affine(input, &mut out);
            out.iter_mut().for_each(|v| *v = self.activation.apply(*v));
            hidden.push(out);
        }
        let input = hidden.last().map_or(x, Vec::as_slice);
        let mut out = [0.0];
        last.affine(input, &mut out);
        Trace { hidden, output: out[0] }
    }

    /// Backpropagates `∂B/∂(pre-activation)` through the hidden layers. Calls
    /// `on_layer(l, delta, input)` for every layer from last to first, where `delta`
    /// is the sensitivity of `B` to that layer's pre-activation and `input` is the
    /// layer input. Returns `∂B/∂x`.
    fn backprop<F>(&self, x: &[f64], trace: &Trace, mut on_layer: F) -> Vec<f64>
    where
        F: FnMut(usize, &[f64], &[f64]),
    {
        let mut delta = vec![1.0];
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let input = if l == 0 { x } else { &trace.hidden[l - 1] };
            on_layer(l, &delta, input);
            let mut next = vec![0.0; layer.inputs];
            for (row, d) in layer.weights.chunks_exact(layer.inputs).zip(&delta) {
                for (n, w) in next.iter_mut().zip(row) {
                    *n += w * d;
                }
            }
            if l > 0 {
                for (n, a) in next.iter_mut().zip(&trace.hidden[l - 1]) {
                    *n *= self.activation.derivative_from_value(*a);
                }
            }
            delta = next;
        }
        delta
    }

    /// `∂B/∂x` at `x`.
    pub fn grad_input(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        let trace = self.trace(x);
        Ok(self.backprop(x, &trace, |_, _, _| {}))
    }

    /// `∂B/∂θ` at `x`, in [`ParamVector`] layout.
    pub fn grad_params(&self, x: &[f64]) -> Result<ParamVector> {
        self.check_dim(x)?;
        let mut out = ParamVector::zeros(self.param_count());
        self.accumulate_grad_params(x, 1.0, &mut out);
        Ok(out)
    }

    /// `acc += scale · ∂B/∂θ(x)`; returns `B(x)`.
    pub fn accumulate_grad_params(&self, x: &[f64], scale: f64, acc: &mut ParamVector) -> f64 {
        debug_assert_eq!(acc.len(), self.param_count());
        let offsets = self.layer_offsets();
        let trace = self.trace(x);
        self.backprop(x, &trace, |l, delta, input| {
            let layer = &self.layers[l];
            let base = offsets[l];
            for (j, d) in delta.iter().enumerate() {
                let sd = scale * d;
                if sd == 0.0 {
                    continue;
                }
                let row = &mut acc.0[base + j * layer.inputs..base + (j + 1) * layer.inputs];
                for (g, xi) in row.iter_mut().zip(input) {
                    *g += sd * xi;
                }
                acc.0[base + layer.weights.len() + j] += sd;
            }
        });
        trace.output
    }

    fn layer_offsets(&self) -> Vec<usize> {
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut acc = 0;
        for layer in &self.layers {
            offsets.push(acc);
            acc += layer.param_count();
        }
        offsets
    }

    /// `dB/dt = ∂B/∂x · f(x)` along the flow of `system`.
    pub fn time_derivative(&self, x: &[f64], system: &SystemModel) -> Result<f64> {
        if system.dim() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                actual: system.dim(),
            });
        }
        let grad = self.grad_input(x)?;
        let f = system.eval(x)?;
        Ok(grad.iter().zip(&f).map(|(a, b)| a * b).sum())
    }

    /// Upper bounds `(𝓛_B, 𝓜_B)` on the Lipschitz constant and the norm of `x ↦ ∂B/∂x`
    /// that hold on all of `ℝⁿ`, from Frobenius norms of the weight matrices.
    pub fn structural_gradient_bounds(&self) -> (f64, f64) {
        structural_bounds(self.layers.iter().map(Layer::frobenius_norm), self.activation)
    }

    pub fn to_document(&self) -> CertificateDocument {
        CertificateDocument {
            layer_sizes: self.layer_sizes(),
            activation: self.activation,
            weights: self
                .layers
                .iter()
                .map(|l| l.weights.chunks_exact(l.inputs).map(<[f64]>::to_vec).collect())
                .collect(),
            biases: self.layers.iter().map(|l| l.biases.clone()).collect(),
        }
    }

    pub fn from_document(doc: &CertificateDocument) -> Result<Self> {
        let mut cert = Self::zeros(&doc.layer_sizes, doc.activation)?;
        if doc.weights.len() != cert.layers.len() || doc.biases.len() != cert.layers.len() {
            return Err(Error::Config(format!(
                "certificate document lists {} weight and {} bias layers, expected {}",
                doc.weights.len(),
                doc.biases.len(),
                cert.layers.len()
            )));
        }
        for (l, layer) in cert.layers.iter_mut().enumerate() {
            let rows = &doc.weights[l];
            if rows.len() != layer.outputs || rows.iter().any(|r| r.len() != layer.inputs) {
                return Err(Error::Config(format!("layer {l} weight matrix has the wrong shape")));
            }
            if doc.biases[l].len() != layer.outputs {
                return Err(Error::Config(format!("layer {l} bias vector has the wrong length")));
            }
            layer.weights = rows.iter().flatten().copied().collect();
            layer.biases = doc.biases[l].clone();
        }
        Ok(cert)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.to_document())?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let doc: CertificateDocument = serde_json::from_str(&text)?;
        Self::from_document(&doc)
    }
}

/// Recursive bound for `x ↦ ∂B/∂x` given per-layer operator-norm upper bounds.
///
/// With `J_l` the Jacobian of the `l`-th hidden representation,
/// `‖J_l‖ ≤ ‖W_l‖‖J_{l-1}‖` and
/// `Lip(J_l) ≤ ‖W_l‖ Lip(J_{l-1}) + c ‖W_l‖² ‖J_{l-1}‖²` with `c = sup|σ''|`.
pub fn structural_bounds(norms: impl IntoIterator<Item = f64>, activation: Activation) -> (f64, f64) {
    let norms: Vec<f64> = norms.into_iter().collect();
    let (out_norm, hidden) = norms.split_last().expect("at least one layer");
    let c = activation.max_curvature();
    let s = activation.max_slope();
    let mut jac = 1.0;
    let mut jac_lip = 0.0;
    for w in hidden {
        jac_lip = s * w * jac_lip + c * w * w * jac * jac;
        jac *= s * w;
    }
    (out_norm * jac_lip, out_norm * jac)
}

fn validate_sizes(sizes: &[usize]) -> Result<()> {
    if sizes.len() < 2 || sizes.contains(&0) || *sizes.last().unwrap() != 1 {
        return Err(Error::InvalidArgument(format!(
            "layer sizes must look like [n, h1, ..., 1] with positive entries, got {sizes:?}"
        )));
    }
    Ok(())
}

/// On-disk form of a certificate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificateDocument {
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
    /// One row-major matrix per layer, `outputs` rows of `inputs` entries.
    pub weights: Vec<Vec<Vec<f64>>>,
    pub biases: Vec<Vec<f64>>,
}
