//! Minimal dense feed-forward network with a scalar output.
//!
//! Hidden layers apply `relu` or `tanh`; the output layer is affine, so every
//! model has the form `bias + f(x)`. Weights are stored row-major with shape
//! `(out_dim, in_dim)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PARAMS_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative given the pre-activation `z` and the activation `a`.
    /// The relu subgradient at zero is 0.
    #[inline]
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(Error::InvalidArgument(format!("unknown activation `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkShape {
    pub input_dim: usize,
    pub hidden_layers: Vec<usize>,
    pub activation: Activation,
}

impl NetworkShape {
    pub fn new(input_dim: usize, hidden_layers: Vec<usize>, activation: Activation) -> Result<Self> {
        let shape = Self {
            input_dim,
            hidden_layers,
            activation,
        };
        shape.validate()?;
        Ok(shape)
    }

    /// An affine model `bias + w . x`.
    pub fn linear(input_dim: usize) -> Result<Self> {
        Self::new(input_dim, Vec::new(), Activation::Relu)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::InvalidShape("input_dim must be at least 1".into()));
        }
        if let Some(i) = self.hidden_layers.iter().position(|&w| w == 0) {
            return Err(Error::InvalidShape(format!("hidden layer {i} has width 0")));
        }
        Ok(())
    }

    /// `(in_dim, out_dim)` of each layer, output layer last.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_layers.len() + 1);
        let mut prev = self.input_dim;
        for &w in &self.hidden_layers {
            dims.push((prev, w));
            prev = w;
        }
        dims.push((prev, 1));
        dims
    }

    pub fn num_params(&self) -> usize {
        self.layer_dims().iter().map(|&(i, o)| i * o + o).sum()
    }

    /// Same hidden structure with a different input width.
    pub fn with_input_dim(&self, input_dim: usize) -> Self {
        Self {
            input_dim,
            ..self.clone()
        }
    }
}

/// One affine layer. `weights[r * in_dim + c]` connects input `c` to output `r`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl Dense {
    fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weights: vec![0.0; in_dim * out_dim],
            biases: vec![0.0; out_dim],
        }
    }
}

fn zero_layers(shape: &NetworkShape) -> Vec<Dense> {
    shape
        .layer_dims()
        .into_iter()
        .map(|(i, o)| Dense::zeros(i, o))
        .collect()
}

fn flat_values(layers: &[Dense]) -> impl Iterator<Item = &f64> {
    layers.iter().flat_map(|l| l.weights.iter().chain(l.biases.iter()))
}

fn flat_values_mut(layers: &mut [Dense]) -> impl Iterator<Item = &mut f64> {
    layers
        .iter_mut()
        .flat_map(|l| l.weights.iter_mut().chain(l.biases.iter_mut()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ParamsDoc", into = "ParamsDoc")]
pub struct NetworkParams {
    shape: NetworkShape,
    layers: Vec<Dense>,
}

impl NetworkParams {
    /// Uniform fan-in scaled weights in `±sqrt(6 / fan_in)`, zero biases.
    pub fn init(shape: &NetworkShape, seed: u64) -> Result<Self> {
        shape.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = zero_layers(shape);
        for layer in &mut layers {
            let limit = (6.0 / layer.in_dim as f64).sqrt();
            for w in &mut layer.weights {
                *w = rng.gen_range(-limit..limit);
            }
        }
        Ok(Self {
            shape: shape.clone(),
            layers,
        })
    }

    pub fn zeros(shape: &NetworkShape) -> Result<Self> {
        shape.validate()?;
        Ok(Self {
            shape: shape.clone(),
            layers: zero_layers(shape),
        })
    }

    /// Build from explicit per-layer row-major weights and biases.
    pub fn from_parts(
        shape: NetworkShape,
        weights: Vec<Vec<f64>>,
        biases: Vec<Vec<f64>>,
    ) -> Result<Self> {
        shape.validate()?;
        let dims = shape.layer_dims();
        if weights.len() != dims.len() || biases.len() != dims.len() {
            return Err(Error::Schema(format!(
                "expected {} layers, got {} weight and {} bias entries",
                dims.len(),
                weights.len(),
                biases.len()
            )));
        }
        let mut layers = Vec::with_capacity(dims.len());
        for (k, ((w, b), (i, o))) in weights.into_iter().zip(biases).zip(dims).enumerate() {
            if w.len() != i * o || b.len() != o {
                return Err(Error::Schema(format!(
                    "layer {k}: expected {o}x{i} weights and {o} biases, got {} and {}",
                    w.len(),
                    b.len()
                )));
            }
            layers.push(Dense {
                in_dim: i,
                out_dim: o,
                weights: w,
                biases: b,
            });
        }
        let params = Self { shape, layers };
        if let Some(i) = params.values().position(|v| !v.is_finite()) {
            return Err(Error::Schema(format!("non-finite parameter at flat index {i}")));
        }
        Ok(params)
    }

    pub fn shape(&self) -> &NetworkShape {
        &self.shape
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    /// The bias of the output unit.
    pub fn output_bias(&self) -> f64 {
        self.layers.last().expect("at least one layer").biases[0]
    }

    /// All parameters in layer order, each layer's weights before its biases.
    pub fn values(&self) -> impl Iterator<Item = &f64> {
        flat_values(&self.layers)
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        flat_values_mut(&mut self.layers)
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.shape.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.shape.input_dim,
                actual: x.len(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<f64> {
        self.check_input(x)?;
        let mut trace = Trace::default();
        Ok(self.forward_trace(x, &mut trace))
    }

    /// Forward pass recording pre-activations and activations in `trace`.
    /// `x` must already have been length-checked.
    pub(crate) fn forward_trace(&self, x: &[f64], trace: &mut Trace) -> f64 {
        let n = self.layers.len();
        trace.pre.resize(n, Vec::new());
        trace.act.resize(n, Vec::new());
        for (k, layer) in self.layers.iter().enumerate() {
            let (done, rest) = trace.act.split_at_mut(k);
            let input: &[f64] = if k == 0 { x } else { &done[k - 1] };
            let pre = &mut trace.pre[k];
            pre.clear();
            for r in 0..layer.out_dim {
                let row = &layer.weights[r * layer.in_dim..(r + 1) * layer.in_dim];
                let z = layer.biases[r] + row.iter().zip(input).map(|(w, v)| w * v).sum::<f64>();
                pre.push(z);
            }
            let act = &mut rest[0];
            act.clear();
            if k + 1 == n {
                act.extend_from_slice(pre);
            } else {
                let f = self.shape.activation;
                act.extend(pre.iter().map(|&z| f.apply(z)));
            }
        }
        trace.act[n - 1][0]
    }

    /// `upstream * d forward(x) / d params`.
    pub fn backward(&self, x: &[f64], upstream: f64) -> Result<Gradient> {
        self.check_input(x)?;
        let mut grad = Gradient::zeros_like(self);
        let mut trace = Trace::default();
        self.forward_trace(x, &mut trace);
        self.accumulate_gradient(x, upstream, &trace, &mut grad);
        Ok(grad)
    }

    /// Adds `upstream * d output / d params` into `grad`, using a trace from
    /// [`Self::forward_trace`] on the same `x`.
    pub(crate) fn accumulate_gradient(&self, x: &[f64], upstream: f64, trace: &Trace, grad: &mut Gradient) {
        let n = self.layers.len();
        let mut delta = vec![upstream];
        let mut next_delta = Vec::new();
        for k in (0..n).rev() {
            let layer = &self.layers[k];
            let input: &[f64] = if k == 0 { x } else { &trace.act[k - 1] };
            let g = &mut grad.layers[k];
            for r in 0..layer.out_dim {
                let d = delta[r];
                if d == 0.0 {
                    continue;
                }
                g.biases[r] += d;
                let grow = &mut g.weights[r * layer.in_dim..(r + 1) * layer.in_dim];
                for (gw, v) in grow.iter_mut().zip(input) {
                    *gw += d * v;
                }
            }
            if k == 0 {
                break;
            }
            next_delta.clear();
            next_delta.resize(layer.in_dim, 0.0);
            for r in 0..layer.out_dim {
                let d = delta[r];
                if d == 0.0 {
                    continue;
                }
                let row = &layer.weights[r * layer.in_dim..(r + 1) * layer.in_dim];
                for (nd, w) in next_delta.iter_mut().zip(row) {
                    *nd += d * w;
                }
            }
            let f = self.shape.activation;
            for ((nd, &z), &a) in next_delta.iter_mut().zip(&trace.pre[k - 1]).zip(&trace.act[k - 1]) {
                *nd *= f.derivative(z, a);
            }
            std::mem::swap(&mut delta, &mut next_delta);
        }
    }
}

/// Per-layer buffers from a forward pass.
#[derive(Debug, Default, Clone)]
pub(crate) struct Trace {
    pub(crate) pre: Vec<Vec<f64>>,
    pub(crate) act: Vec<Vec<f64>>,
}

/// Same layout as [`NetworkParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    layers: Vec<Dense>,
}

impl Gradient {
    pub fn zeros_like(params: &NetworkParams) -> Self {
        Self {
            layers: zero_layers(params.shape()),
        }
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn values(&self) -> impl Iterator<Item = &f64> {
        flat_values(&self.layers)
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        flat_values_mut(&mut self.layers)
    }

    pub fn fill_zero(&mut self) {
        self.values_mut().for_each(|v| *v = 0.0);
    }

    pub fn scale(&mut self, c: f64) {
        self.values_mut().for_each(|v| *v *= c);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    first_moment: Gradient,
    second_moment: Gradient,
    step_count: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(params: &NetworkParams) -> Self {
        Self {
            first_moment: Gradient::zeros_like(params),
            second_moment: Gradient::zeros_like(params),
            step_count: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// One bias-corrected Adam update of `params` in place.
    ///
    /// Non-finite gradients are rejected before anything is modified.
    pub fn step(&mut self, params: &mut NetworkParams, grad: &Gradient, lr: f64) -> Result<()> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning rate must be positive, got {lr}")));
        }
        if grad.layers.len() != params.layers.len()
            || grad
                .layers
                .iter()
                .zip(&params.layers)
                .any(|(g, p)| g.weights.len() != p.weights.len() || g.biases.len() != p.biases.len())
        {
            return Err(Error::Schema("gradient layout does not match parameters".into()));
        }
        if let Some(i) = grad.values().position(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient(i));
        }

        self.step_count += 1;
        let t = self.step_count as i32;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.epsilon);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for (((p, &g), m), v) in params
            .values_mut()
            .zip(grad.values())
            .zip(self.first_moment.values_mut())
            .zip(self.second_moment.values_mut())
        {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}

/// On-disk JSON form of [`NetworkParams`].
#[derive(Serialize, Deserialize)]
struct ParamsDoc {
    version: u32,
    shape: NetworkShape,
    /// Per layer, a list of rows (one per output unit).
    weights: Vec<Vec<Vec<f64>>>,
    biases: Vec<Vec<f64>>,
}

impl From<NetworkParams> for ParamsDoc {
    fn from(p: NetworkParams) -> Self {
        let weights = p
            .layers
            .iter()
            .map(|l| l.weights.chunks(l.in_dim).map(<[f64]>::to_vec).collect())
            .collect();
        let biases = p.layers.iter().map(|l| l.biases.clone()).collect();
        Self {
            version: PARAMS_FORMAT_VERSION,
            shape: p.shape,
            weights,
            biases,
        }
    }
}

impl TryFrom<ParamsDoc> for NetworkParams {
    type Error = Error;

    fn try_from(doc: ParamsDoc) -> Result<Self> {
        if doc.version != PARAMS_FORMAT_VERSION {
            return Err(Error::Schema(format!(
                "unsupported network format version {}",
                doc.version
            )));
        }
        let dims = doc.shape.layer_dims();
        let mut flat = Vec::with_capacity(doc.weights.len());
        for (k, rows) in doc.weights.into_iter().enumerate() {
            let in_dim = dims.get(k).map_or(0, |d| d.0);
            if rows.iter().any(|r| r.len() != in_dim) {
                return Err(Error::Schema(format!("layer {k}: ragged weight rows")));
            }
            flat.push(rows.concat());
        }
        NetworkParams::from_parts(doc.shape, flat, doc.biases)
    }
}
