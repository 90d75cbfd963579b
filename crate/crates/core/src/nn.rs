//! Activations, dense layers and exact forward/backward passes under the
//! squared-error loss `0.5 * sum((y - t)^2)`.

use thiserror::Error;

use crate::rng::{uniform_init, Rng};
use crate::tensor::{self, matmul, Matrix, ParallelPolicy, TensorError};

/// Output amplitude of the scaled tanh.
pub const TANH_AMPLITUDE: f64 = 1.71;
/// Input slope of the scaled tanh.
pub const TANH_SLOPE: f64 = 0.66;
pub const N_CLASSES: usize = 10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("layer {layer}: expected {expected} inputs, got {actual}")]
    ShapeMismatch {
        layer: usize,
        expected: usize,
        actual: usize,
    },
    #[error("trace does not belong to these parameters")]
    StaleTrace,
    #[error("label {0} is not a digit")]
    LabelOutOfRange(usize),
    #[error("invalid network: {0}")]
    InvalidNetwork(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    /// `a * tanh(b * x)`.
    ScaledTanh { a: f64, b: f64 },
    Rectified,
    Identity,
}

impl Activation {
    pub const fn scaled_tanh() -> Self {
        Activation::ScaledTanh {
            a: TANH_AMPLITUDE,
            b: TANH_SLOPE,
        }
    }

    #[inline]
    pub fn apply(&self, x: f64) -> f64 {
        match *self {
            Activation::ScaledTanh { a, b } => a * (b * x).tanh(),
            Activation::Rectified => rectified(x),
            Activation::Identity => x,
        }
    }

    #[inline]
    pub fn derivative(&self, x: f64) -> f64 {
        match *self {
            Activation::ScaledTanh { a, b } => {
                // sech^2 form stays positive where tanh has already rounded to 1
                let c = (b * x).cosh();
                a * b / (c * c)
            }
            Activation::Rectified => rectified_deriv(x),
            Activation::Identity => 1.0,
        }
    }
}

#[inline]
pub fn scaled_tanh(a: f64) -> f64 {
    Activation::scaled_tanh().apply(a)
}

#[inline]
pub fn scaled_tanh_deriv(a: f64) -> f64 {
    Activation::scaled_tanh().derivative(a)
}

#[inline]
pub fn rectified(a: f64) -> f64 {
    if a > 0.0 {
        a
    } else {
        0.0
    }
}

/// Subgradient 0 at the kink.
#[inline]
pub fn rectified_deriv(a: f64) -> f64 {
    if a > 0.0 {
        1.0
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `fan_out x fan_in`.
    pub weights: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn new(weights: Matrix, bias: Vec<f64>, activation: Activation) -> Result<Self, NnError> {
        if bias.len() != weights.rows() {
            return Err(NnError::InvalidNetwork(format!(
                "bias length {} != fan_out {}",
                bias.len(),
                weights.rows()
            )));
        }
        if let Activation::ScaledTanh { a, b } = activation {
            if !(a > 0.0 && b > 0.0) {
                return Err(NnError::InvalidNetwork(format!(
                    "scaled tanh needs positive constants, got a={a} b={b}"
                )));
            }
        }
        Ok(Self {
            weights,
            bias,
            activation,
        })
    }

    /// Weights drawn from `[lo, hi)`, zero bias.
    pub fn uniform(
        rng: &mut Rng,
        fan_in: usize,
        fan_out: usize,
        lo: f64,
        hi: f64,
        activation: Activation,
    ) -> Result<Self, NnError> {
        let weights = uniform_init(rng, fan_out, fan_in, lo, hi)?;
        Self::new(weights, vec![0.0; fan_out], activation)
    }

    pub fn fan_in(&self) -> usize {
        self.weights.cols()
    }

    pub fn fan_out(&self) -> usize {
        self.weights.rows()
    }

    fn bitwise_eq(&self, other: &DenseLayer) -> bool {
        self.activation == other.activation
            && self.weights.bitwise_eq(&other.weights)
            && self.bias.len() == other.bias.len()
            && self
                .bias
                .iter()
                .zip(&other.bias)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// An ordered stack of dense layers.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    layers: Vec<DenseLayer>,
}

impl NetworkParams {
    pub fn new(layers: Vec<DenseLayer>) -> Result<Self, NnError> {
        if layers.is_empty() {
            return Err(NnError::InvalidNetwork("no layers".into()));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].fan_out() != pair[1].fan_in() {
                return Err(NnError::InvalidNetwork(format!(
                    "layer {i} has fan_out {} but layer {} has fan_in {}",
                    pair[0].fan_out(),
                    i + 1,
                    pair[1].fan_in()
                )));
            }
        }
        Ok(Self { layers })
    }

    /// Fully connected net over `sizes = [input, hidden..., output]`, every
    /// weight drawn from `[lo, hi)` in layer order, all biases zero.
    pub fn uniform(
        rng: &mut Rng,
        sizes: &[usize],
        lo: f64,
        hi: f64,
        activation: Activation,
    ) -> Result<Self, NnError> {
        if sizes.len() < 2 {
            return Err(NnError::InvalidNetwork(
                "need at least input and output sizes".into(),
            ));
        }
        let layers = sizes
            .windows(2)
            .map(|w| DenseLayer::uniform(rng, w[0], w[1], lo, hi, activation))
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(layers)
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].fan_out()
    }

    /// `[input, hidden..., output]`.
    pub fn sizes(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(DenseLayer::fan_out))
            .collect()
    }

    pub fn bitwise_eq(&self, other: &NetworkParams) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.bitwise_eq(b))
    }

    fn check_input(&self, len: usize) -> Result<(), NnError> {
        if len != self.input_dim() {
            return Err(NnError::ShapeMismatch {
                layer: 0,
                expected: self.input_dim(),
                actual: len,
            });
        }
        Ok(())
    }
}

/// Per-layer pre-activations and activations of one forward pass.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ForwardTrace {
    pub pre_activations: Vec<Vec<f64>>,
    /// `post_activations[0]` is the input.
    pub post_activations: Vec<Vec<f64>>,
}

impl ForwardTrace {
    pub fn output(&self) -> &[f64] {
        self.post_activations.last().map_or(&[], Vec::as_slice)
    }

    /// Buffers sized for `params`, for reuse with [`forward_into`].
    pub fn for_network(params: &NetworkParams) -> Self {
        let sizes = params.sizes();
        Self {
            pre_activations: sizes[1..].iter().map(|&n| vec![0.0; n]).collect(),
            post_activations: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }
}

pub fn network_forward(params: &NetworkParams, x: &[f64]) -> Result<ForwardTrace, NnError> {
    params.check_input(x.len())?;
    let mut trace = ForwardTrace::for_network(params);
    forward_into(params, x, &mut trace);
    Ok(trace)
}

/// Forward pass into preallocated buffers. Shapes are assumed checked.
pub(crate) fn forward_into(params: &NetworkParams, x: &[f64], trace: &mut ForwardTrace) {
    trace.post_activations[0].copy_from_slice(x);
    for (l, layer) in params.layers.iter().enumerate() {
        let (inputs, outputs) = trace.post_activations.split_at_mut(l + 1);
        let pre = &mut trace.pre_activations[l];
        tensor::matvec_into(&layer.weights, &inputs[l], pre);
        for ((p, &b), y) in pre.iter_mut().zip(&layer.bias).zip(outputs[0].iter_mut()) {
            *p += b;
            *y = layer.activation.apply(*p);
        }
    }
}

/// Network outputs for every row of `x`, parallel over rows. Each row is
/// bitwise identical to the output of [`network_forward`].
pub fn forward_batch(
    params: &NetworkParams,
    x: &Matrix,
    policy: &ParallelPolicy,
) -> Result<Matrix, NnError> {
    params.check_input(x.cols())?;
    let mut act = x.clone();
    for layer in &params.layers {
        let mut pre = matmul(&act, &layer.weights.transpose(), policy)?;
        for i in 0..pre.rows() {
            for (p, &b) in pre.row_mut(i).iter_mut().zip(&layer.bias) {
                *p = layer.activation.apply(*p + b);
            }
        }
        act = pre;
    }
    Ok(act)
}

pub fn loss_mse(output: &[f64], target: &[f64]) -> Result<f64, NnError> {
    if output.len() != target.len() {
        return Err(NnError::ShapeMismatch {
            layer: 0,
            expected: output.len(),
            actual: target.len(),
        });
    }
    Ok(0.5
        * output
            .iter()
            .zip(target)
            .map(|(y, t)| (y - t) * (y - t))
            .sum::<f64>())
}

/// Gradients of the loss for every layer, same shapes as the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn is_zero(&self) -> bool {
        self.weights
            .iter()
            .all(|w| w.data().iter().all(|&g| g == 0.0))
            && self.biases.iter().flatten().all(|&g| g == 0.0)
    }
}

fn check_trace(params: &NetworkParams, trace: &ForwardTrace) -> Result<(), NnError> {
    let sizes = params.sizes();
    let consistent = trace.post_activations.len() == sizes.len()
        && trace.pre_activations.len() == params.layers.len()
        && trace
            .post_activations
            .iter()
            .zip(&sizes)
            .all(|(v, &n)| v.len() == n)
        && trace
            .pre_activations
            .iter()
            .zip(&sizes[1..])
            .all(|(v, &n)| v.len() == n);
    if consistent {
        Ok(())
    } else {
        Err(NnError::StaleTrace)
    }
}

/// Error signals `delta_l = dLoss/dpre_l` for every layer, written into
/// `deltas` (one buffer per layer, sized like the pre-activations).
pub(crate) fn backward_deltas(
    params: &NetworkParams,
    trace: &ForwardTrace,
    target: &[f64],
    deltas: &mut [Vec<f64>],
) {
    let last = params.layers.len() - 1;
    let out_act = params.layers[last].activation;
    for (((d, &y), &t), &a) in deltas[last]
        .iter_mut()
        .zip(trace.output())
        .zip(target)
        .zip(&trace.pre_activations[last])
    {
        *d = (y - t) * out_act.derivative(a);
    }
    for l in (0..last).rev() {
        let (lower, upper) = deltas.split_at_mut(l + 1);
        let d = &mut lower[l];
        tensor::matvec_transposed_into(&params.layers[l + 1].weights, &upper[0], d);
        let act = params.layers[l].activation;
        for (di, &a) in d.iter_mut().zip(&trace.pre_activations[l]) {
            *di *= act.derivative(a);
        }
    }
}

pub fn network_backward(
    params: &NetworkParams,
    trace: &ForwardTrace,
    target: &[f64],
) -> Result<Gradients, NnError> {
    check_trace(params, trace)?;
    if target.len() != params.output_dim() {
        return Err(NnError::ShapeMismatch {
            layer: params.layers.len() - 1,
            expected: params.output_dim(),
            actual: target.len(),
        });
    }
    let mut deltas: Vec<Vec<f64>> = trace.pre_activations.iter().map(|p| vec![0.0; p.len()]).collect();
    backward_deltas(params, trace, target, &mut deltas);
    let weights = deltas
        .iter()
        .zip(&trace.post_activations)
        .map(|(d, input)| tensor::outer(d, input))
        .collect();
    Ok(Gradients {
        weights,
        biases: deltas,
    })
}

/// +1 at the label's index, -1 elsewhere.
pub fn encode_target(label: usize) -> Result<Vec<f64>, NnError> {
    if label >= N_CLASSES {
        return Err(NnError::LabelOutOfRange(label));
    }
    let mut t = vec![-1.0; N_CLASSES];
    t[label] = 1.0;
    Ok(t)
}

/// Index of the largest output; ties go to the lowest index.
pub fn argmax(output: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in output.iter().enumerate().skip(1) {
        if v > output[best] {
            best = i;
        }
    }
    best
}
