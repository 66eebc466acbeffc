//! Dense feed-forward network with exact reverse-mode gradients.
//!
//! Weights are stored row-major with shape `(output_dim, input_dim)`, so the
//! pre-activation of a batch is `Z = H_prev · Wᵀ + b`. Hidden layers use ReLU,
//! the output layer is linear.
//!
//! Optional per-layer weight masks (entries exactly `0.0` or `1.0`) implement
//! unstructured pruning. A masked weight is stored as zero, receives a zero
//! gradient and is never moved by an optimizer.

mod optim;
mod train;

pub use optim::{adam_step, sgd_step, AdamState};
pub use train::{
    epoch_windows, evaluate_loss, fine_tune, segment_windows, train, EpochRecord, Optimizer, TrainConfig, TrainingLog,
};

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::par;

/// Default architecture: 10 inputs, three hidden layers of 30, 7 outputs.
pub const DEFAULT_ARCHITECTURE: [usize; 5] = [10, 30, 30, 30, 7];

/// Rows per chunk when inference is split across threads.
const PREDICT_CHUNK: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    z
                } else {
                    0.0
                }
            }
            Activation::Identity => z,
        }
    }

    /// Derivative; ReLU uses 0 at the origin.
    #[inline]
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub input_dim: usize,
    pub output_dim: usize,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<LayerSpec>,
    weights: Vec<Matrix>,
    biases: Vec<Vec<f64>>,
    masks: Option<Vec<Matrix>>,
}

/// Per-layer pre- and post-activations of a batch.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub input: Matrix,
    pub pre: Vec<Matrix>,
    pub post: Vec<Matrix>,
}

impl ForwardTrace {
    pub fn outputs(&self) -> &Matrix {
        self.post.last().expect("at least one layer")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
    /// `∂L/∂h` for every hidden post-activation, one `batch × width` matrix
    /// per hidden layer.
    pub hidden_outputs: Vec<Matrix>,
}

impl Mlp {
    /// He-uniform initialized network with ReLU hidden layers and a linear
    /// output layer. Biases start at zero.
    pub fn new<R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Result<Self> {
        let layers = Self::specs_for(dims)?;
        let mut weights = Vec::with_capacity(layers.len());
        let mut biases = Vec::with_capacity(layers.len());
        for spec in &layers {
            let limit = (6.0 / spec.input_dim as f64).sqrt();
            let dist = Uniform::new(-limit, limit).expect("finite bounds");
            let data = (0..spec.input_dim * spec.output_dim)
                .map(|_| dist.sample(rng))
                .collect();
            weights.push(Matrix::from_vec(spec.output_dim, spec.input_dim, data)?);
            biases.push(vec![0.0; spec.output_dim]);
        }
        Ok(Self {
            layers,
            weights,
            biases,
            masks: None,
        })
    }

    /// All-zero network with the given dimensions.
    pub fn zeros(dims: &[usize]) -> Result<Self> {
        let layers = Self::specs_for(dims)?;
        let weights = layers
            .iter()
            .map(|s| Matrix::zeros(s.output_dim, s.input_dim))
            .collect();
        let biases = layers.iter().map(|s| vec![0.0; s.output_dim]).collect();
        Ok(Self {
            layers,
            weights,
            biases,
            masks: None,
        })
    }

    fn specs_for(dims: &[usize]) -> Result<Vec<LayerSpec>> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::Config(format!(
                "architecture needs at least two nonzero dims, got {dims:?}"
            )));
        }
        let n = dims.len() - 1;
        Ok((0..n)
            .map(|i| LayerSpec {
                input_dim: dims[i],
                output_dim: dims[i + 1],
                activation: if i + 1 == n {
                    Activation::Identity
                } else {
                    Activation::Relu
                },
            })
            .collect())
    }

    /// Assembles a network from explicit parameters, validating every shape.
    pub fn from_parts(
        layers: Vec<LayerSpec>,
        weights: Vec<Matrix>,
        biases: Vec<Vec<f64>>,
        masks: Option<Vec<Matrix>>,
    ) -> Result<Self> {
        if layers.is_empty() || weights.len() != layers.len() || biases.len() != layers.len() {
            return Err(Error::shape("Mlp::from_parts", layers.len(), weights.len()));
        }
        for (i, spec) in layers.iter().enumerate() {
            if spec.input_dim == 0 || spec.output_dim == 0 {
                return Err(Error::Config(format!("layer {i} has a zero dimension")));
            }
            if i > 0 && layers[i - 1].output_dim != spec.input_dim {
                return Err(Error::shape(
                    "Mlp::from_parts chain",
                    layers[i - 1].output_dim,
                    spec.input_dim,
                ));
            }
            weights[i].check_shape("Mlp::from_parts weights", spec.output_dim, spec.input_dim)?;
            if biases[i].len() != spec.output_dim {
                return Err(Error::shape("Mlp::from_parts biases", spec.output_dim, biases[i].len()));
            }
        }
        let mut model = Self {
            layers,
            weights,
            biases,
            masks: None,
        };
        if let Some(m) = masks {
            model.set_masks(m)?;
        }
        Ok(model)
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn weights(&self) -> &[Matrix] {
        &self.weights
    }

    pub fn biases(&self) -> &[Vec<f64>] {
        &self.biases
    }

    pub fn masks(&self) -> Option<&[Matrix]> {
        self.masks.as_deref()
    }

    pub fn weight_mut(&mut self, layer: usize) -> &mut Matrix {
        &mut self.weights[layer]
    }

    pub fn bias_mut(&mut self, layer: usize) -> &mut [f64] {
        &mut self.biases[layer]
    }

    /// Layer widths including input and output, e.g. `[10, 30, 30, 30, 7]`.
    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.layers[0].input_dim];
        d.extend(self.layers.iter().map(|l| l.output_dim));
        d
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.output_dim)
    }

    /// Stored weights plus biases (masked weights still count as stored).
    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.input_dim * l.output_dim + l.output_dim)
            .sum()
    }

    pub fn weight_count(&self) -> usize {
        self.layers.iter().map(|l| l.input_dim * l.output_dim).sum()
    }

    /// Weights not removed by a mask.
    pub fn active_weight_count(&self) -> usize {
        match &self.masks {
            None => self.weight_count(),
            Some(ms) => ms
                .iter()
                .map(|m| m.as_slice().iter().filter(|&&v| v != 0.0).count())
                .sum(),
        }
    }

    pub fn hidden_neuron_count(&self) -> usize {
        self.layers[..self.layers.len() - 1]
            .iter()
            .map(|l| l.output_dim)
            .sum()
    }

    /// Installs weight masks and zeroes the masked weights.
    pub fn set_masks(&mut self, masks: Vec<Matrix>) -> Result<()> {
        if masks.len() != self.layers.len() {
            return Err(Error::shape("Mlp::set_masks", self.layers.len(), masks.len()));
        }
        for (i, (m, spec)) in masks.iter().zip(&self.layers).enumerate() {
            m.check_shape("Mlp::set_masks", spec.output_dim, spec.input_dim)?;
            if m.as_slice().iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::Config(format!("mask for layer {i} is not binary")));
            }
        }
        self.masks = Some(masks);
        self.apply_masks();
        Ok(())
    }

    /// Masks all ones, creating them if absent.
    pub fn ensure_masks(&mut self) -> &mut [Matrix] {
        if self.masks.is_none() {
            self.masks = Some(
                self.layers
                    .iter()
                    .map(|s| Matrix::from_vec(s.output_dim, s.input_dim, vec![1.0; s.output_dim * s.input_dim]).expect("shape"))
                    .collect(),
            );
        }
        self.masks.as_mut().expect("just set")
    }

    pub(crate) fn apply_masks(&mut self) {
        if let Some(ms) = &self.masks {
            for (w, m) in self.weights.iter_mut().zip(ms) {
                for (wv, &mv) in w.as_mut_slice().iter_mut().zip(m.as_slice()) {
                    if mv == 0.0 {
                        *wv = 0.0;
                    }
                }
            }
        }
    }

    pub(crate) fn parts_mut(&mut self) -> (&mut Vec<LayerSpec>, &mut Vec<Matrix>, &mut Vec<Vec<f64>>, &mut Option<Vec<Matrix>>) {
        (&mut self.layers, &mut self.weights, &mut self.biases, &mut self.masks)
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(Matrix::is_finite)
            && self.biases.iter().flatten().all(|v| v.is_finite())
    }

    /// Forward pass that keeps every intermediate needed by [`Mlp::backward`].
    pub fn forward(&self, batch: &Matrix) -> Result<ForwardTrace> {
        if batch.cols() != self.input_dim() {
            return Err(Error::shape("Mlp::forward input", self.input_dim(), batch.cols()));
        }
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut post: Vec<Matrix> = Vec::with_capacity(self.layers.len());
        for (i, spec) in self.layers.iter().enumerate() {
            let input = if i == 0 { batch } else { &post[i - 1] };
            let z = affine(input, &self.weights[i], &self.biases[i]);
            let h = z.map(|v| spec.activation.apply(v));
            pre.push(z);
            post.push(h);
        }
        Ok(ForwardTrace {
            input: batch.clone(),
            pre,
            post,
        })
    }

    /// Network outputs for a batch. Large batches are split into fixed-size
    /// row chunks evaluated in parallel; results are bit-identical to a
    /// single sequential pass.
    pub fn predict(&self, batch: &Matrix) -> Result<Matrix> {
        if batch.cols() != self.input_dim() {
            return Err(Error::shape("Mlp::predict input", self.input_dim(), batch.cols()));
        }
        if batch.rows() <= PREDICT_CHUNK {
            return Ok(self.predict_block(batch));
        }
        let chunks = batch.rows().div_ceil(PREDICT_CHUNK);
        let parts = par::map_range(chunks, |c| {
            let start = c * PREDICT_CHUNK;
            let end = (start + PREDICT_CHUNK).min(batch.rows());
            self.predict_block(&batch.slice_rows(start..end))
        });
        let refs: Vec<&Matrix> = parts.iter().collect();
        Matrix::vstack(&refs)
    }

    fn predict_block(&self, batch: &Matrix) -> Matrix {
        let mut h = batch.clone();
        for (i, spec) in self.layers.iter().enumerate() {
            let mut z = affine(&h, &self.weights[i], &self.biases[i]);
            if spec.activation == Activation::Relu {
                for v in z.as_mut_slice() {
                    *v = spec.activation.apply(*v);
                }
            }
            h = z;
        }
        h
    }

    /// Reverse-mode gradients given `∂L/∂Ŷ` for the traced batch.
    pub fn backward(&self, trace: &ForwardTrace, output_grad: &Matrix) -> Result<Gradients> {
        let batch = trace.input.rows();
        output_grad.check_shape("Mlp::backward output gradient", batch, self.output_dim())?;
        let n = self.layers.len();
        let mut weight_grads = vec![Matrix::zeros(0, 0); n];
        let mut bias_grads = vec![Vec::new(); n];
        let mut hidden = vec![Matrix::zeros(0, 0); n - 1];

        // dL/dH for the current layer's output.
        let mut d_post = output_grad.clone();
        for i in (0..n).rev() {
            let spec = self.layers[i];
            let z = &trace.pre[i];
            let mut d_pre = d_post.clone();
            for (d, &zv) in d_pre.as_mut_slice().iter_mut().zip(z.as_slice()) {
                *d *= spec.activation.derivative(zv);
            }
            let input = if i == 0 { &trace.input } else { &trace.post[i - 1] };

            // dW = dZᵀ · H_prev
            let mut dw = Matrix::zeros(spec.output_dim, spec.input_dim);
            for b in 0..batch {
                let dz = d_pre.row(b);
                let x = input.row(b);
                for (o, &g) in dz.iter().enumerate() {
                    if g == 0.0 {
                        continue;
                    }
                    for (acc, &xv) in dw.row_mut(o).iter_mut().zip(x) {
                        *acc += g * xv;
                    }
                }
            }
            if let Some(ms) = &self.masks {
                for (g, &m) in dw.as_mut_slice().iter_mut().zip(ms[i].as_slice()) {
                    if m == 0.0 {
                        *g = 0.0;
                    }
                }
            }
            let mut db = vec![0.0; spec.output_dim];
            for b in 0..batch {
                for (acc, &g) in db.iter_mut().zip(d_pre.row(b)) {
                    *acc += g;
                }
            }

            if i > 0 {
                // dH_prev = dZ · W
                let w = &self.weights[i];
                let mut dh = Matrix::zeros(batch, spec.input_dim);
                for b in 0..batch {
                    let dz = d_pre.row(b);
                    let out = dh.row_mut(b);
                    for (o, &g) in dz.iter().enumerate() {
                        if g == 0.0 {
                            continue;
                        }
                        for (acc, &wv) in out.iter_mut().zip(w.row(o)) {
                            *acc += g * wv;
                        }
                    }
                }
                hidden[i - 1] = dh.clone();
                d_post = dh;
            }
            weight_grads[i] = dw;
            bias_grads[i] = db;
        }
        Ok(Gradients {
            weights: weight_grads,
            biases: bias_grads,
            hidden_outputs: hidden,
        })
    }
}

/// `Z = X · Wᵀ + b` for row-major `X (batch × in)` and `W (out × in)`.
fn affine(x: &Matrix, w: &Matrix, b: &[f64]) -> Matrix {
    let (batch, out) = (x.rows(), w.rows());
    let mut z = Matrix::zeros(batch, out);
    for r in 0..batch {
        let xr = x.row(r);
        let zr = z.row_mut(r);
        for (o, zv) in zr.iter_mut().enumerate() {
            let dot: f64 = xr.iter().zip(w.row(o)).map(|(a, c)| a * c).sum();
            *zv = dot + b[o];
        }
    }
    z
}
