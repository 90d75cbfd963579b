//! Gaussian-visible / noisy-rectified-hidden RBMs trained with one-step
//! contrastive divergence, stacked greedily and unrolled into a
//! feed-forward network.
//!
//! Unit rules, with `x = W v + c` the hidden pre-activation:
//!
//! - hidden mean: `max(0, x)`
//! - hidden sample: `max(0, x + sqrt(logistic(x)) * z)`, `z ~ N(0, 1)`
//! - visible mean: `W^T h + b`; a visible sample adds unit-variance noise.

use std::time::Instant;

use thiserror::Error;

use crate::nn::{Activation, DenseLayer, NetworkParams, NnError};
use crate::rng::{split_seed, uniform_init, Rng};
use crate::tensor::{self, matmul, Matrix, ParallelPolicy, TensorError};

pub const INIT_RANGE: (f64, f64) = (-0.05, 0.05);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RbmError {
    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: usize, actual: usize },
    #[error("no training data")]
    EmptyData,
    #[error("need at least two layer sizes, got {0:?}")]
    BadSizes(Vec<usize>),
    #[error("empty RBM stack")]
    EmptyStack,
    #[error("invalid CD configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

pub type Result<T> = std::result::Result<T, RbmError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VisibleUnits {
    /// Independent Gaussian units with unit variance.
    Gaussian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HiddenUnits {
    NoisyRectified,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rbm {
    /// `n_hidden x n_visible`.
    pub weights: Matrix,
    pub vis_bias: Vec<f64>,
    pub hid_bias: Vec<f64>,
    pub vis_kind: VisibleUnits,
    pub hid_kind: HiddenUnits,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CdConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub weight_decay: f64,
    /// Noisy-rectified hidden samples in the positive phase instead of
    /// hidden means. Reconstructions are always visible means.
    pub sample_hidden: bool,
    pub seed: u64,
}

impl Default for CdConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            epochs: 10,
            weight_decay: 0.01,
            sample_hidden: true,
            seed: 0,
        }
    }
}

impl CdConfig {
    fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(RbmError::InvalidConfig(format!(
                "learning rate {} must be finite and non-negative",
                self.learning_rate
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(RbmError::InvalidConfig(format!(
                "weight decay {} must be finite and non-negative",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// Parameter changes from one CD step; add them to the RBM to apply.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterDelta {
    pub weights: Matrix,
    pub vis_bias: Vec<f64>,
    pub hid_bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PretrainReport {
    /// Mean over samples of the mean-field squared reconstruction error per
    /// visible unit, measured before each sample's update; one per epoch.
    pub reconstruction_error: Vec<f64>,
    pub epoch_seconds: Vec<f64>,
    pub wall_seconds: f64,
}

#[inline]
fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Rbm {
    pub fn new(weights: Matrix, vis_bias: Vec<f64>, hid_bias: Vec<f64>) -> Result<Self> {
        if vis_bias.len() != weights.cols() {
            return Err(RbmError::ShapeMismatch {
                expected: weights.cols(),
                actual: vis_bias.len(),
            });
        }
        if hid_bias.len() != weights.rows() {
            return Err(RbmError::ShapeMismatch {
                expected: weights.rows(),
                actual: hid_bias.len(),
            });
        }
        Ok(Self {
            weights,
            vis_bias,
            hid_bias,
            vis_kind: VisibleUnits::Gaussian,
            hid_kind: HiddenUnits::NoisyRectified,
        })
    }

    /// Weights uniform on [-0.05, 0.05), zero biases.
    pub fn initialized(rng: &mut Rng, n_visible: usize, n_hidden: usize) -> Result<Self> {
        let weights = uniform_init(rng, n_hidden, n_visible, INIT_RANGE.0, INIT_RANGE.1)?;
        Self::new(weights, vec![0.0; n_visible], vec![0.0; n_hidden])
    }

    pub fn n_visible(&self) -> usize {
        self.weights.cols()
    }

    pub fn n_hidden(&self) -> usize {
        self.weights.rows()
    }

    fn check_visible(&self, v: &[f64]) -> Result<()> {
        if v.len() != self.n_visible() {
            return Err(RbmError::ShapeMismatch {
                expected: self.n_visible(),
                actual: v.len(),
            });
        }
        Ok(())
    }

    fn check_hidden(&self, h: &[f64]) -> Result<()> {
        if h.len() != self.n_hidden() {
            return Err(RbmError::ShapeMismatch {
                expected: self.n_hidden(),
                actual: h.len(),
            });
        }
        Ok(())
    }

    fn hidden_pre_into(&self, v: &[f64], out: &mut [f64]) {
        tensor::matvec_into(&self.weights, v, out);
        for (x, &c) in out.iter_mut().zip(&self.hid_bias) {
            *x += c;
        }
    }

    fn hidden_mean_into(&self, v: &[f64], out: &mut [f64]) {
        self.hidden_pre_into(v, out);
        for x in out.iter_mut() {
            *x = x.max(0.0);
        }
    }

    fn hidden_sample_into(&self, v: &[f64], rng: &mut Rng, out: &mut [f64]) {
        self.hidden_pre_into(v, out);
        for x in out.iter_mut() {
            let noisy = *x + logistic(*x).sqrt() * rng.standard_normal();
            *x = noisy.max(0.0);
        }
    }

    fn visible_mean_into(&self, h: &[f64], out: &mut [f64]) {
        tensor::matvec_transposed_into(&self.weights, h, out);
        for (x, &b) in out.iter_mut().zip(&self.vis_bias) {
            *x += b;
        }
    }

    pub fn hidden_mean(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.check_visible(v)?;
        let mut h = vec![0.0; self.n_hidden()];
        self.hidden_mean_into(v, &mut h);
        Ok(h)
    }

    pub fn hidden_sample(&self, v: &[f64], rng: &mut Rng) -> Result<Vec<f64>> {
        self.check_visible(v)?;
        let mut h = vec![0.0; self.n_hidden()];
        self.hidden_sample_into(v, rng, &mut h);
        Ok(h)
    }

    /// Visible mean `W^T h + b`, plus unit Gaussian noise when `sample`.
    pub fn visible_reconstruct(&self, h: &[f64], rng: &mut Rng, sample: bool) -> Result<Vec<f64>> {
        self.check_hidden(h)?;
        let mut v = vec![0.0; self.n_visible()];
        self.visible_mean_into(h, &mut v);
        if sample {
            for x in v.iter_mut() {
                *x += rng.standard_normal();
            }
        }
        Ok(v)
    }

    /// Hidden means for every row of `data`, parallel over rows. Row `i`
    /// is bitwise equal to `hidden_mean(data.row(i))`.
    pub fn hidden_means(&self, data: &Matrix, policy: &ParallelPolicy) -> Result<Matrix> {
        if data.cols() != self.n_visible() {
            return Err(RbmError::ShapeMismatch {
                expected: self.n_visible(),
                actual: data.cols(),
            });
        }
        let mut h = matmul(data, &self.weights.transpose(), policy)?;
        for i in 0..h.rows() {
            for (x, &c) in h.row_mut(i).iter_mut().zip(&self.hid_bias) {
                *x = (*x + c).max(0.0);
            }
        }
        Ok(h)
    }

    pub fn apply(&mut self, delta: &ParameterDelta) {
        for (w, d) in self.weights.data_mut().iter_mut().zip(delta.weights.data()) {
            *w += d;
        }
        for (b, d) in self.vis_bias.iter_mut().zip(&delta.vis_bias) {
            *b += d;
        }
        for (c, d) in self.hid_bias.iter_mut().zip(&delta.hid_bias) {
            *c += d;
        }
    }

    pub fn bitwise_eq(&self, other: &Rbm) -> bool {
        let same = |a: &[f64], b: &[f64]| {
            a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
        };
        self.weights.bitwise_eq(&other.weights)
            && same(&self.vis_bias, &other.vis_bias)
            && same(&self.hid_bias, &other.hid_bias)
    }
}

/// Positive and negative statistics of one CD-1 step.
struct Phases {
    h0: Vec<f64>,
    v1: Vec<f64>,
    h1: Vec<f64>,
    h_mean: Vec<f64>,
    v_mean: Vec<f64>,
}

impl Phases {
    fn new(rbm: &Rbm) -> Self {
        Self {
            h0: vec![0.0; rbm.n_hidden()],
            v1: vec![0.0; rbm.n_visible()],
            h1: vec![0.0; rbm.n_hidden()],
            h_mean: vec![0.0; rbm.n_hidden()],
            v_mean: vec![0.0; rbm.n_visible()],
        }
    }

    // Reconstructions are always the noise-free visible mean.
    fn run(&mut self, rbm: &Rbm, v0: &[f64], sample: bool, rng: &mut Rng) {
        if sample {
            rbm.hidden_sample_into(v0, rng, &mut self.h0);
        } else {
            rbm.hidden_mean_into(v0, &mut self.h0);
        }
        rbm.visible_mean_into(&self.h0, &mut self.v1);
        rbm.hidden_mean_into(&self.v1, &mut self.h1);
    }

    /// `|v0 - v_mean|^2 / n_visible` for the deterministic mean-field
    /// reconstruction, so sampling noise does not enter the measurement.
    fn reconstruction_error(&mut self, rbm: &Rbm, v0: &[f64], sampled: bool) -> f64 {
        let recon = if sampled {
            rbm.hidden_mean_into(v0, &mut self.h_mean);
            rbm.visible_mean_into(&self.h_mean, &mut self.v_mean);
            &self.v_mean
        } else {
            &self.v1
        };
        let sq: f64 = v0.iter().zip(recon).map(|(a, b)| (a - b) * (a - b)).sum();
        sq / v0.len().max(1) as f64
    }
}

#[inline]
fn weight_delta(lr: f64, decay: f64, w: f64, h0: f64, v0: f64, h1: f64, v1: f64) -> f64 {
    lr * (h0 * v0 - h1 * v1) - lr * decay * w
}

/// One CD-1 step on `v0`, returned without being applied:
///
/// ```text
/// dW = lr * (h0 v0^T - h1 v1^T) - lr * decay * W
/// db = lr * (v0 - v1)
/// dc = lr * (h0 - h1)
/// ```
pub fn cd1_update(rbm: &Rbm, v0: &[f64], cfg: &CdConfig, rng: &mut Rng) -> Result<ParameterDelta> {
    cfg.validate()?;
    rbm.check_visible(v0)?;
    let mut ph = Phases::new(rbm);
    ph.run(rbm, v0, cfg.sample_hidden, rng);
    Ok(delta_from_phases(rbm, v0, &ph, cfg))
}

fn delta_from_phases(rbm: &Rbm, v0: &[f64], ph: &Phases, cfg: &CdConfig) -> ParameterDelta {
    let (lr, decay) = (cfg.learning_rate, cfg.weight_decay);
    let mut weights = Matrix::zeros(rbm.n_hidden(), rbm.n_visible());
    for i in 0..rbm.n_hidden() {
        let (h0, h1) = (ph.h0[i], ph.h1[i]);
        let w_row = rbm.weights.row(i);
        for (j, d) in weights.row_mut(i).iter_mut().enumerate() {
            *d = weight_delta(lr, decay, w_row[j], h0, v0[j], h1, ph.v1[j]);
        }
    }
    ParameterDelta {
        weights,
        vis_bias: v0.iter().zip(&ph.v1).map(|(a, b)| lr * (a - b)).collect(),
        hid_bias: ph.h0.iter().zip(&ph.h1).map(|(a, b)| lr * (a - b)).collect(),
    }
}

// Same arithmetic as `cd1_update` followed by `Rbm::apply`, without
// materializing the delta matrix.
fn cd1_apply_in_place(rbm: &mut Rbm, v0: &[f64], ph: &Phases, cfg: &CdConfig) {
    let (lr, decay) = (cfg.learning_rate, cfg.weight_decay);
    for i in 0..rbm.n_hidden() {
        let (h0, h1) = (ph.h0[i], ph.h1[i]);
        for (j, w) in rbm.weights.row_mut(i).iter_mut().enumerate() {
            *w += weight_delta(lr, decay, *w, h0, v0[j], h1, ph.v1[j]);
        }
    }
    for ((b, &a), &r) in rbm.vis_bias.iter_mut().zip(v0).zip(&ph.v1) {
        *b += lr * (a - r);
    }
    for ((c, &a), &r) in rbm.hid_bias.iter_mut().zip(&ph.h0).zip(&ph.h1) {
        *c += lr * (a - r);
    }
}

/// Trains one RBM with online CD-1.
///
/// The RBM is initialized from `Rng::new(cfg.seed)`, which then drives all
/// unit sampling. Epoch `e` visits samples in the permutation drawn from
/// `Rng::new(split_seed(cfg.seed, e + 1))`.
pub fn train_rbm(data: &Matrix, n_hidden: usize, cfg: &CdConfig) -> Result<(Rbm, PretrainReport)> {
    cfg.validate()?;
    if data.rows() == 0 {
        return Err(RbmError::EmptyData);
    }
    let start = Instant::now();
    let mut rng = Rng::new(cfg.seed);
    let mut rbm = Rbm::initialized(&mut rng, data.cols(), n_hidden)?;
    let mut report = PretrainReport::default();
    let mut ph = Phases::new(&rbm);

    for epoch in 0..cfg.epochs {
        let epoch_start = Instant::now();
        let order = Rng::new(split_seed(cfg.seed, epoch as u64 + 1)).permutation(data.rows());
        let mut err_sum = 0.0;
        for &i in &order {
            let v0 = data.row(i);
            ph.run(&rbm, v0, cfg.sample_hidden, &mut rng);
            err_sum += ph.reconstruction_error(&rbm, v0, cfg.sample_hidden);
            cd1_apply_in_place(&mut rbm, v0, &ph, cfg);
        }
        report.reconstruction_error.push(err_sum / data.rows() as f64);
        report.epoch_seconds.push(epoch_start.elapsed().as_secs_f64());
    }
    report.wall_seconds = start.elapsed().as_secs_f64();
    Ok((rbm, report))
}

/// Greedy layer-wise pretraining over `layer_sizes = [d, h1, h2, ...]`.
///
/// RBM `k` trains on the hidden means of RBM `k - 1`. Layer 0 uses
/// `cfg.seed`, layer `k > 0` uses `split_seed(cfg.seed, k)`.
pub fn greedy_stack(
    layer_sizes: &[usize],
    data: &Matrix,
    cfg: &CdConfig,
    policy: &ParallelPolicy,
) -> Result<(Vec<Rbm>, Vec<PretrainReport>)> {
    if layer_sizes.len() < 2 {
        return Err(RbmError::BadSizes(layer_sizes.to_vec()));
    }
    if data.rows() == 0 {
        return Err(RbmError::EmptyData);
    }
    if data.cols() != layer_sizes[0] {
        return Err(RbmError::ShapeMismatch {
            expected: layer_sizes[0],
            actual: data.cols(),
        });
    }
    let mut stack = Vec::with_capacity(layer_sizes.len() - 1);
    let mut reports = Vec::with_capacity(layer_sizes.len() - 1);
    let mut input: Option<Matrix> = None;
    for (k, &n_hidden) in layer_sizes[1..].iter().enumerate() {
        let layer_cfg = CdConfig {
            seed: if k == 0 { cfg.seed } else { split_seed(cfg.seed, k as u64) },
            ..*cfg
        };
        let layer_data = input.as_ref().unwrap_or(data);
        let (rbm, report) = train_rbm(layer_data, n_hidden, &layer_cfg)?;
        if k + 2 < layer_sizes.len() {
            input = Some(rbm.hidden_means(layer_data, policy)?);
        }
        stack.push(rbm);
        reports.push(report);
    }
    Ok((stack, reports))
}

/// Unrolls a pretrained stack into a network: every RBM becomes a
/// scaled-tanh hidden layer with the RBM's weights and hidden biases, and a
/// fresh scaled-tanh output layer with weights uniform on
/// `[init_lo, init_hi)` is appended.
pub fn to_network(
    stack: &[Rbm],
    n_outputs: usize,
    rng: &mut Rng,
    init_lo: f64,
    init_hi: f64,
) -> Result<NetworkParams> {
    let last = stack.last().ok_or(RbmError::EmptyStack)?;
    if n_outputs == 0 {
        return Err(RbmError::BadSizes(vec![last.n_hidden(), 0]));
    }
    let mut layers = stack
        .iter()
        .map(|r| DenseLayer::new(r.weights.clone(), r.hid_bias.clone(), Activation::scaled_tanh()))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    layers.push(DenseLayer::uniform(
        rng,
        last.n_hidden(),
        n_outputs,
        init_lo,
        init_hi,
        Activation::scaled_tanh(),
    )?);
    Ok(NetworkParams::new(layers)?)
}

/// Two Gaussian blobs in the plane, centered at `(0.5, 0.5)` and
/// `(-0.5, -0.5)` with per-coordinate standard deviation 0.1; samples
/// alternate between the clusters.
pub fn two_cluster_data(n: usize, seed: u64) -> Matrix {
    let mut rng = Rng::new(seed);
    let mut data = Vec::with_capacity(2 * n);
    for i in 0..n {
        let center = if i % 2 == 0 { 0.5 } else { -0.5 };
        for _ in 0..2 {
            data.push(center + 0.1 * rng.standard_normal());
        }
    }
    Matrix::from_vec(n, 2, data).expect("two columns per sample")
}
