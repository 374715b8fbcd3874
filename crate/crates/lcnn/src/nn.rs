//! Affine layers with ReLU or identity activations, stable softmax
//! cross-entropy, and explicit closed-form backpropagation.
//!
//! Activations are stored with samples as columns, so a batch of `B`
//! samples through a layer of width `d` is a `d x B` matrix. `backward`
//! optionally accepts one extra gradient term injected at a chosen hidden
//! layer; that hook is how the label-consistency loss reaches the layers
//! below its attachment point.

use rand::Rng;

use crate::tensor::DenseMatrix;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    /// Pass-through; used for the output layer feeding the softmax loss.
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

    /// Derivative with respect to the pre-activation. The ReLU subgradient
    /// at exactly zero is defined as 0.
    #[inline]
    pub fn grad_from_pre(self, z: f64) -> f64 {
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

/// One affine layer `x -> F(Wx + b)`; weight is `out_dim x in_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    weight: DenseMatrix,
    bias: Vec<f64>,
    activation: Activation,
}

impl Layer {
    pub fn new(weight: DenseMatrix, bias: Vec<f64>, activation: Activation) -> Result<Self> {
        if bias.len() != weight.rows() {
            return Err(Error::InvalidArgument(format!(
                "bias length {} does not match weight rows {}",
                bias.len(),
                weight.rows()
            )));
        }
        Ok(Self {
            weight,
            bias,
            activation,
        })
    }

    /// Seeded uniform init on `(-s, s)` with `s = sqrt(6 / (in + out))`,
    /// biases zero.
    pub fn init<R: Rng>(
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::InvalidArgument(
                "layer dimensions must be positive".to_string(),
            ));
        }
        let s = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let weight = DenseMatrix::from_fn(out_dim, in_dim, |_, _| rng.random_range(-s..s));
        Ok(Self {
            weight,
            bias: vec![0.0; out_dim],
            activation,
        })
    }

    #[inline]
    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    #[inline]
    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    #[inline]
    pub fn weight(&self) -> &DenseMatrix {
        &self.weight
    }

    #[inline]
    pub fn weight_mut(&mut self) -> &mut DenseMatrix {
        &mut self.weight
    }

    #[inline]
    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    #[inline]
    pub fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.bias
    }

    #[inline]
    pub fn activation(&self) -> Activation {
        self.activation
    }

    /// `Wx + b` with the bias broadcast over batch columns.
    fn affine(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        let mut z = self.weight.matmul(x)?;
        for i in 0..z.rows() {
            for j in 0..z.cols() {
                z.set(i, j, z.get(i, j) + self.bias[i]);
            }
        }
        Ok(z)
    }
}

/// Ordered layers with a validated dimension chain; at least one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    layers: Vec<Layer>,
    input_dim: usize,
}

impl Network {
    pub fn new(input_dim: usize, layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument(
                "network needs at least one layer".to_string(),
            ));
        }
        let mut prev = input_dim;
        for (i, layer) in layers.iter().enumerate() {
            if layer.in_dim() != prev {
                return Err(Error::InvalidArgument(format!(
                    "layer {i} expects input dim {}, previous width is {prev}",
                    layer.in_dim()
                )));
            }
            prev = layer.out_dim();
        }
        Ok(Self { layers, input_dim })
    }

    /// Builds a seeded random network from `(width, activation)` pairs.
    pub fn init<R: Rng>(
        input_dim: usize,
        layer_spec: &[(usize, Activation)],
        rng: &mut R,
    ) -> Result<Self> {
        let mut layers = Vec::with_capacity(layer_spec.len());
        let mut prev = input_dim;
        for &(width, activation) in layer_spec {
            layers.push(Layer::init(prev, width, activation, rng)?);
            prev = width;
        }
        Network::new(input_dim, layers)
    }

    #[inline]
    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    #[inline]
    pub fn output_dim(&self) -> usize {
        self.layers.last().map(Layer::out_dim).unwrap_or(0)
    }

    #[inline]
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    #[inline]
    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    #[inline]
    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    /// Runs the batch through every layer, keeping all activations and
    /// pre-activations for the backward pass.
    pub fn forward(&self, x: &DenseMatrix) -> Result<ForwardTrace> {
        if x.rows() != self.input_dim {
            return Err(Error::InvalidArgument(format!(
                "input has {} rows, network expects {}",
                x.rows(),
                self.input_dim
            )));
        }
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        activations.push(x.clone());
        for layer in &self.layers {
            let z = layer.affine(activations.last().expect("nonempty"))?;
            let a = z.map(|v| layer.activation().apply(v));
            pre_activations.push(z);
            activations.push(a);
        }
        Ok(ForwardTrace {
            activations,
            pre_activations,
        })
    }

    /// Backpropagates `out_grad` (the loss gradient at the network output)
    /// through every layer.
    pub fn backward(&self, trace: &ForwardTrace, out_grad: &DenseMatrix) -> Result<Backprop> {
        self.backward_injected(trace, out_grad, None)
    }

    /// Like [`Network::backward`], with one extra gradient term added to the
    /// activation gradient at index `at` (1-based activation index, as in
    /// the trace) before it is chained through that layer.
    pub fn backward_injected(
        &self,
        trace: &ForwardTrace,
        out_grad: &DenseMatrix,
        injection: Option<(usize, &DenseMatrix)>,
    ) -> Result<Backprop> {
        let n = self.layers.len();
        if trace.activations.len() != n + 1 || trace.pre_activations.len() != n {
            return Err(Error::InvalidArgument(
                "trace does not match network depth".to_string(),
            ));
        }
        if out_grad.shape() != trace.activations[n].shape() {
            return Err(Error::Shape {
                op: "backward",
                left: out_grad.shape(),
                right: trace.activations[n].shape(),
            });
        }
        if let Some((at, _)) = injection {
            if at == 0 || at > n {
                return Err(Error::InvalidArgument(format!(
                    "injection layer {at} outside 1..={n}"
                )));
            }
        }

        let mut weight_grads = vec![DenseMatrix::zeros(0, 0); n];
        let mut bias_grads = vec![Vec::new(); n];
        let mut input_grads = vec![DenseMatrix::zeros(0, 0); n + 1];

        let mut grad = out_grad.clone();
        for i in (1..=n).rev() {
            if let Some((at, extra)) = injection {
                if at == i {
                    grad = extra.axpy(1.0, &grad)?;
                }
            }
            input_grads[i] = grad.clone();
            let layer = &self.layers[i - 1];
            let delta = grad.zip_map(&trace.pre_activations[i - 1], |g, z| {
                g * layer.activation().grad_from_pre(z)
            })?;
            weight_grads[i - 1] = delta.matmul(&trace.activations[i - 1].transpose())?;
            bias_grads[i - 1] = delta.row_sums();
            grad = layer.weight().transpose().matmul(&delta)?;
        }
        input_grads[0] = grad;

        Ok(Backprop {
            weight_grads,
            bias_grads,
            input_grads,
        })
    }
}

/// All activations `x^(0)..x^(n)` and pre-activations from one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    activations: Vec<DenseMatrix>,
    pre_activations: Vec<DenseMatrix>,
}

impl ForwardTrace {
    /// Activation at index `i`; `0` is the input, `num_layers()` the output.
    #[inline]
    pub fn activation(&self, i: usize) -> &DenseMatrix {
        &self.activations[i]
    }

    #[inline]
    pub fn output(&self) -> &DenseMatrix {
        self.activations.last().expect("trace has activations")
    }

    #[inline]
    pub fn pre_activation(&self, layer: usize) -> &DenseMatrix {
        &self.pre_activations[layer]
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.activations.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.activations.is_empty()
    }
}

/// Parameter and activation gradients from one backward pass.
/// `input_grads[i]` is the loss gradient with respect to activation `i`,
/// including any injected term.
#[derive(Debug, Clone)]
pub struct Backprop {
    pub weight_grads: Vec<DenseMatrix>,
    pub bias_grads: Vec<Vec<f64>>,
    pub input_grads: Vec<DenseMatrix>,
}

/// Mean softmax cross-entropy over batch columns and its gradient with
/// respect to the logits (already scaled by `1/batch`).
///
/// Per column the loss is computed as `logsumexp(z) - z[label]` with the
/// max subtracted inside the exponentials, so uniform logits give exactly
/// `ln(num_classes)` and huge logits do not overflow.
pub fn softmax_xent(logits: &DenseMatrix, labels: &[usize]) -> Result<(f64, DenseMatrix)> {
    let classes = logits.rows();
    let batch = logits.cols();
    if labels.len() != batch {
        return Err(Error::InvalidArgument(format!(
            "{} labels for a batch of {batch} columns",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::LabelOutOfRange {
            label: bad,
            num_classes: classes,
        });
    }

    let mut grad = DenseMatrix::zeros(classes, batch);
    let mut loss = 0.0;
    let inv_batch = 1.0 / batch as f64;
    for (b, &y) in labels.iter().enumerate() {
        let col: Vec<f64> = logits.column(b).collect();
        let max = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = col.iter().map(|&z| (z - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        loss += sum.ln() + max - col[y];
        for (j, &e) in exps.iter().enumerate() {
            let p = e / sum;
            let indicator = if j == y { 1.0 } else { 0.0 };
            grad.set(j, b, (p - indicator) * inv_batch);
        }
    }
    Ok((loss * inv_batch, grad))
}
