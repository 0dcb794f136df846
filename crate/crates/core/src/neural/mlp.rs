use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FlicError, Result};

pub const LEAKY_RELU_SLOPE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    LeakyRelu,
    Sigmoid,
    Identity,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::LeakyRelu => {
                if z > 0.0 {
                    z
                } else {
                    LEAKY_RELU_SLOPE * z
                }
            }
            Activation::Sigmoid => 1.0 / (1.0 + (-z).exp()),
            Activation::Identity => z,
        }
    }

    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu => {
                if z > 0.0 {
                    1.0
                } else {
                    LEAKY_RELU_SLOPE
                }
            }
            Activation::Sigmoid => {
                let s = 1.0 / (1.0 + (-z).exp());
                s * (1.0 - s)
            }
            Activation::Identity => 1.0,
        }
    }

    /// Stable integer code used by the checkpoint container.
    pub fn code(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::LeakyRelu => 1,
            Activation::Sigmoid => 2,
            Activation::Identity => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => Activation::Relu,
            1 => Activation::LeakyRelu,
            2 => Activation::Sigmoid,
            3 => Activation::Identity,
            _ => return None,
        })
    }
}

/// One affine layer followed by an elementwise activation.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `out x in`
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
    pub activation: Activation,
}

impl Dense {
    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }
}

/// Parameters of a fully connected network.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub layers: Vec<Dense>,
}

/// Per-layer values kept by `forward` for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    inputs: Vec<DMatrix<f64>>,
    pre_activations: Vec<DMatrix<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

/// Gradients with the same shapes as an `MlpParams`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub layers: Vec<LayerGrad>,
}

impl MlpGrads {
    pub fn add_scaled(&mut self, other: &MlpGrads, scale: f64) -> Result<()> {
        if self.layers.len() != other.layers.len() {
            return Err(FlicError::dims("MlpGrads::add_scaled", self.layers.len(), other.layers.len()));
        }
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            if a.weight.shape() != b.weight.shape() || a.bias.len() != b.bias.len() {
                return Err(FlicError::dims(
                    "MlpGrads::add_scaled",
                    format!("{:?}", a.weight.shape()),
                    format!("{:?}", b.weight.shape()),
                ));
            }
            a.weight.zip_apply(&b.weight, |x, y| *x += scale * y);
            a.bias.axpy(scale, &b.bias, 1.0);
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        for l in &mut self.layers {
            l.weight *= s;
            l.bias *= s;
        }
    }

    pub fn iter_values(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(l.bias.iter()).copied())
    }

    pub fn is_finite(&self) -> bool {
        self.iter_values().all(f64::is_finite)
    }
}

impl MlpParams {
    pub fn new(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(FlicError::Empty("MlpParams: no layers"));
        }
        for (idx, layer) in layers.iter().enumerate() {
            if layer.bias.len() != layer.out_dim() {
                return Err(FlicError::dims("MlpParams bias", layer.out_dim(), layer.bias.len()));
            }
            if let Some(next) = layers.get(idx + 1) {
                if next.in_dim() != layer.out_dim() {
                    return Err(FlicError::dims("MlpParams layer chain", layer.out_dim(), next.in_dim()));
                }
            }
        }
        let params = Self { layers };
        if !params.iter_values().all(f64::is_finite) {
            return Err(FlicError::NonFinite("MlpParams::new"));
        }
        Ok(params)
    }

    /// Glorot-uniform weights in `±sqrt(6 / (fan_in + fan_out))`, zero biases.
    ///
    /// `dims` lists the widths from input to output; `activations` has one
    /// entry per layer (`dims.len() - 1`).
    pub fn init<R: Rng + ?Sized>(dims: &[usize], activations: &[Activation], rng: &mut R) -> Result<Self> {
        if dims.len() < 2 || activations.len() != dims.len() - 1 {
            return Err(FlicError::InvalidArgument(format!(
                "need n+1 widths for n activations, got {} widths and {} activations",
                dims.len(),
                activations.len()
            )));
        }
        if dims.contains(&0) {
            return Err(FlicError::InvalidArgument("layer widths must be positive".into()));
        }
        let layers = dims
            .windows(2)
            .zip(activations)
            .map(|(w, &activation)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                Dense {
                    weight: DMatrix::from_fn(fan_out, fan_in, |_, _| rng.random_range(-bound..bound)),
                    bias: DVector::zeros(fan_out),
                    activation,
                }
            })
            .collect();
        Self::new(layers)
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn iter_values(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(l.bias.iter()).copied())
    }

    /// Flattened parameters: per layer, the weight in column-major order then the bias.
    pub fn to_flat(&self) -> Vec<f64> {
        self.iter_values().collect()
    }

    pub fn set_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_params() {
            return Err(FlicError::dims("MlpParams::set_flat", self.num_params(), values.len()));
        }
        let mut it = values.iter().copied();
        for l in &mut self.layers {
            for w in l.weight.iter_mut() {
                *w = it.next().unwrap_or_default();
            }
            for b in l.bias.iter_mut() {
                *b = it.next().unwrap_or_default();
            }
        }
        Ok(())
    }

    pub fn zero_grads(&self) -> MlpGrads {
        MlpGrads {
            layers: self
                .layers
                .iter()
                .map(|l| LayerGrad {
                    weight: DMatrix::zeros(l.out_dim(), l.in_dim()),
                    bias: DVector::zeros(l.out_dim()),
                })
                .collect(),
        }
    }

    /// Gradient-descent update `θ ← θ - lr * g`.
    pub fn sgd_step(&mut self, grads: &MlpGrads, lr: f64) -> Result<()> {
        self.check_grads(grads)?;
        for (l, g) in self.layers.iter_mut().zip(&grads.layers) {
            l.weight.zip_apply(&g.weight, |x, y| *x -= lr * y);
            l.bias.axpy(-lr, &g.bias, 1.0);
        }
        Ok(())
    }

    pub(crate) fn check_grads(&self, grads: &MlpGrads) -> Result<()> {
        let ok = self.layers.len() == grads.layers.len()
            && self
                .layers
                .iter()
                .zip(&grads.layers)
                .all(|(l, g)| l.weight.shape() == g.weight.shape() && l.bias.len() == g.bias.len());
        if ok {
            Ok(())
        } else {
            Err(FlicError::dims("gradient shape", self.num_params(), grads.iter_values().count()))
        }
    }

    fn layer_forward(layer: &Dense, input: &DMatrix<f64>) -> DMatrix<f64> {
        let mut z = input * layer.weight.transpose();
        for mut row in z.row_iter_mut() {
            row += layer.bias.transpose();
        }
        z
    }

    /// Batched forward pass; rows of `batch` are samples.
    pub fn forward(&self, batch: &DMatrix<f64>) -> Result<(DMatrix<f64>, ForwardCache)> {
        if batch.ncols() != self.input_dim() {
            return Err(FlicError::dims("forward input", self.input_dim(), batch.ncols()));
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        let mut current = batch.clone();
        for layer in &self.layers {
            let z = Self::layer_forward(layer, &current);
            let act = layer.activation;
            let a = z.map(|v| act.apply(v));
            inputs.push(current);
            pre_activations.push(z);
            current = a;
        }
        if current.iter().any(|v| !v.is_finite()) {
            return Err(FlicError::NonFinite("forward output"));
        }
        Ok((
            current,
            ForwardCache {
                inputs,
                pre_activations,
            },
        ))
    }

    /// Forward pass without keeping a cache.
    pub fn predict(&self, batch: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if batch.ncols() != self.input_dim() {
            return Err(FlicError::dims("predict input", self.input_dim(), batch.ncols()));
        }
        let mut current = batch.clone();
        for layer in &self.layers {
            let act = layer.activation;
            current = Self::layer_forward(layer, &current).map(|v| act.apply(v));
        }
        if current.iter().any(|v| !v.is_finite()) {
            return Err(FlicError::NonFinite("predict output"));
        }
        Ok(current)
    }

    /// Reverse-mode pass. Returns parameter gradients and the gradient with
    /// respect to the batch input.
    pub fn backward(&self, cache: &ForwardCache, output_grad: &DMatrix<f64>) -> Result<(MlpGrads, DMatrix<f64>)> {
        if cache.inputs.len() != self.layers.len() {
            return Err(FlicError::dims("backward cache depth", self.layers.len(), cache.inputs.len()));
        }
        let n = cache.inputs[0].nrows();
        if output_grad.shape() != (n, self.output_dim()) {
            return Err(FlicError::dims(
                "backward output_grad",
                format!("{n}x{}", self.output_dim()),
                format!("{}x{}", output_grad.nrows(), output_grad.ncols()),
            ));
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut upstream = output_grad.clone();
        for (idx, layer) in self.layers.iter().enumerate().rev() {
            let z = &cache.pre_activations[idx];
            if z.shape() != (n, layer.out_dim()) {
                return Err(FlicError::dims("backward cache", layer.out_dim(), z.ncols()));
            }
            let act = layer.activation;
            let dz = upstream.zip_map(z, |g, zv| g * act.derivative(zv));
            let weight = dz.transpose() * &cache.inputs[idx];
            let bias = dz.row_sum().transpose();
            upstream = &dz * &layer.weight;
            grads.push(LayerGrad { weight, bias });
        }
        grads.reverse();
        Ok((MlpGrads { layers: grads }, upstream))
    }
}
