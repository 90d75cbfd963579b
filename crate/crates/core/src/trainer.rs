//! Online (batch size 1) SGD fine-tuning with a geometric learning-rate
//! schedule, L2 weight decay, per-epoch validation and best-snapshot model
//! selection.

use std::time::Instant;

use thiserror::Error;

use crate::idx::Dataset;
use crate::nn::{self, encode_target, ForwardTrace, Gradients, NetworkParams, NnError};
use crate::rng::{split_seed, Rng};
use crate::tensor::ParallelPolicy;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error("dataset is empty")]
    EmptyData,
    #[error("epoch {epoch} is outside 0..{epochs}")]
    EpochOutOfRange { epoch: usize, epochs: usize },
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("gradient shapes do not match the network")]
    ShapeMismatch,
    #[error("dataset has {actual} features, network expects {expected}")]
    FeatureMismatch { expected: usize, actual: usize },
    #[error(transparent)]
    Nn(#[from] NnError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub weight_decay: f64,
    pub shuffle_seed: u64,
    pub init_lo: f64,
    pub init_hi: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr_start: 1e-3,
            lr_end: 1e-6,
            weight_decay: 0.01,
            shuffle_seed: 0,
            init_lo: -0.05,
            init_hi: 0.05,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(TrainError::InvalidConfig("epochs must be positive".into()));
        }
        if !(self.lr_end > 0.0 && self.lr_end <= self.lr_start && self.lr_start.is_finite()) {
            return Err(TrainError::InvalidConfig(format!(
                "need 0 < lr_end <= lr_start, got {} and {}",
                self.lr_end, self.lr_start
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(TrainError::InvalidConfig(format!(
                "weight decay {} must be non-negative",
                self.weight_decay
            )));
        }
        if !(self.init_lo <= self.init_hi) {
            return Err(TrainError::InvalidConfig(format!(
                "init range [{}, {}) is inverted",
                self.init_lo, self.init_hi
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub learning_rate: f64,
    pub train_loss: f64,
    pub train_error: f64,
    pub valid_error: f64,
    pub seconds: f64,
}

/// Best parameters seen so far, by validation error.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionState {
    pub best_params: NetworkParams,
    pub best_validation_error: f64,
    pub best_epoch: usize,
}

impl SelectionState {
    pub fn new(params: NetworkParams, validation_error: f64, epoch: usize) -> Self {
        Self {
            best_params: params,
            best_validation_error: validation_error,
            best_epoch: epoch,
        }
    }

    /// Keeps a snapshot of `params` only on a strict improvement, so ties
    /// stay with the earlier epoch. Returns whether the snapshot changed.
    pub fn observe(&mut self, epoch: usize, validation_error: f64, params: &NetworkParams) -> bool {
        if validation_error < self.best_validation_error {
            self.best_params = params.clone();
            self.best_validation_error = validation_error;
            self.best_epoch = epoch;
            true
        } else {
            false
        }
    }
}

/// Learning rate of epoch `e`: `lr_start * (lr_end / lr_start)^(e / (epochs - 1))`,
/// or `lr_start` when there is a single epoch.
pub fn lr_at_epoch(cfg: &TrainConfig, e: usize) -> Result<f64> {
    if e >= cfg.epochs {
        return Err(TrainError::EpochOutOfRange {
            epoch: e,
            epochs: cfg.epochs,
        });
    }
    if cfg.epochs == 1 || e == 0 {
        return Ok(cfg.lr_start);
    }
    let frac = e as f64 / (cfg.epochs - 1) as f64;
    Ok(cfg.lr_start * (cfg.lr_end / cfg.lr_start).powf(frac))
}

#[inline]
fn decayed(w: f64, g: f64, lr: f64, weight_decay: f64) -> f64 {
    w - lr * (g + weight_decay * w)
}

/// `w <- w - lr * (g + weight_decay * w)` for weights, `b <- b - lr * g_b`
/// for biases.
pub fn sgd_step(
    params: &NetworkParams,
    grads: &Gradients,
    lr: f64,
    weight_decay: f64,
) -> Result<NetworkParams> {
    let layers = params.layers();
    let conforms = grads.weights.len() == layers.len()
        && grads.biases.len() == layers.len()
        && layers.iter().zip(&grads.weights).zip(&grads.biases).all(|((l, gw), gb)| {
            l.weights.shape() == gw.shape() && l.bias.len() == gb.len()
        });
    if !conforms {
        return Err(TrainError::ShapeMismatch);
    }
    let mut next = params.clone();
    for ((layer, gw), gb) in next.layers_mut().iter_mut().zip(&grads.weights).zip(&grads.biases) {
        for (w, &g) in layer.weights.data_mut().iter_mut().zip(gw.data()) {
            *w = decayed(*w, g, lr, weight_decay);
        }
        for (b, &g) in layer.bias.iter_mut().zip(gb) {
            *b -= lr * g;
        }
    }
    Ok(next)
}

/// Reusable buffers for the per-sample training step.
struct StepScratch {
    trace: ForwardTrace,
    deltas: Vec<Vec<f64>>,
}

impl StepScratch {
    fn new(params: &NetworkParams) -> Self {
        let trace = ForwardTrace::for_network(params);
        let deltas = trace.pre_activations.iter().map(|p| vec![0.0; p.len()]).collect();
        Self { trace, deltas }
    }
}

/// Forward, backward and update for one sample, in place. Bitwise equal to
/// `network_forward` + `network_backward` + `sgd_step`. Returns the
/// pre-update loss and predicted class.
fn online_step(
    params: &mut NetworkParams,
    x: &[f64],
    target: &[f64],
    lr: f64,
    weight_decay: f64,
    scratch: &mut StepScratch,
) -> (f64, usize) {
    nn::forward_into(params, x, &mut scratch.trace);
    let output = scratch.trace.output();
    let loss = 0.5
        * output
            .iter()
            .zip(target)
            .map(|(y, t)| (y - t) * (y - t))
            .sum::<f64>();
    let predicted = nn::argmax(output);
    nn::backward_deltas(params, &scratch.trace, target, &mut scratch.deltas);

    for (l, layer) in params.layers_mut().iter_mut().enumerate() {
        let input = &scratch.trace.post_activations[l];
        let delta = &scratch.deltas[l];
        let cols = input.len();
        for (i, &d) in delta.iter().enumerate() {
            let row = &mut layer.weights.data_mut()[i * cols..(i + 1) * cols];
            for (w, &xj) in row.iter_mut().zip(input) {
                *w = decayed(*w, d * xj, lr, weight_decay);
            }
        }
        for (b, &d) in layer.bias.iter_mut().zip(delta) {
            *b -= lr * d;
        }
    }
    (loss, predicted)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochOutcome {
    pub params: NetworkParams,
    pub learning_rate: f64,
    pub mean_loss: f64,
    /// Online training error, from each sample's output before its update.
    pub train_error: f64,
}

fn check_features(params: &NetworkParams, data: &Dataset) -> Result<()> {
    if data.is_empty() {
        return Err(TrainError::EmptyData);
    }
    if data.dim() != params.input_dim() {
        return Err(TrainError::FeatureMismatch {
            expected: params.input_dim(),
            actual: data.dim(),
        });
    }
    Ok(())
}

/// One epoch of online backpropagation. Samples are visited in the
/// permutation drawn from `Rng::new(split_seed(cfg.shuffle_seed, e))`.
pub fn train_epoch(
    mut params: NetworkParams,
    train: &Dataset,
    cfg: &TrainConfig,
    e: usize,
) -> Result<EpochOutcome> {
    check_features(&params, train)?;
    let lr = lr_at_epoch(cfg, e)?;
    let targets = (0..nn::N_CLASSES)
        .map(encode_target)
        .collect::<std::result::Result<Vec<_>, _>>()?;
    if params.output_dim() != nn::N_CLASSES {
        return Err(NnError::ShapeMismatch {
            layer: params.layers().len() - 1,
            expected: nn::N_CLASSES,
            actual: params.output_dim(),
        }
        .into());
    }

    let order = Rng::new(split_seed(cfg.shuffle_seed, e as u64)).permutation(train.len());
    let mut scratch = StepScratch::new(&params);
    let mut loss_sum = 0.0;
    let mut wrong = 0usize;
    for &i in &order {
        let label = train.labels()[i] as usize;
        let (loss, predicted) = online_step(
            &mut params,
            train.sample(i),
            &targets[label],
            lr,
            cfg.weight_decay,
            &mut scratch,
        );
        loss_sum += loss;
        wrong += usize::from(predicted != label);
    }
    let n = train.len() as f64;
    Ok(EpochOutcome {
        params,
        learning_rate: lr,
        mean_loss: loss_sum / n,
        train_error: wrong as f64 / n,
    })
}

const EVAL_CHUNK: usize = 256;

/// Misclassified samples, counted in parallel over row blocks.
pub fn count_errors(params: &NetworkParams, data: &Dataset, policy: &ParallelPolicy) -> Result<usize> {
    check_features(params, data)?;
    let serial = ParallelPolicy::serial();
    let counts = policy.map_blocks(data.len(), |range| -> Result<usize> {
        let mut wrong = 0;
        let mut start = range.start;
        while start < range.end {
            let end = (start + EVAL_CHUNK).min(range.end);
            let out = nn::forward_batch(params, &data.samples().slice_rows(start..end), &serial)?;
            for (r, &label) in data.labels()[start..end].iter().enumerate() {
                wrong += usize::from(nn::argmax(out.row(r)) != label as usize);
            }
            start = end;
        }
        Ok(wrong)
    });
    counts.into_iter().sum()
}

/// Fraction of samples whose argmax output differs from the label.
pub fn evaluate(params: &NetworkParams, data: &Dataset, policy: &ParallelPolicy) -> Result<f64> {
    Ok(count_errors(params, data, policy)? as f64 / data.len() as f64)
}

/// Trains for `cfg.epochs` epochs, evaluating on `valid` after each one and
/// keeping the snapshot with the lowest validation error.
pub fn fit(
    initial: NetworkParams,
    train: &Dataset,
    valid: &Dataset,
    cfg: &TrainConfig,
    policy: &ParallelPolicy,
) -> Result<(SelectionState, Vec<EpochMetrics>)> {
    fit_with(initial, train, valid, cfg, policy, |_, _| {})
}

/// [`fit`] with a callback invoked after every epoch.
pub fn fit_with<F>(
    initial: NetworkParams,
    train: &Dataset,
    valid: &Dataset,
    cfg: &TrainConfig,
    policy: &ParallelPolicy,
    mut on_epoch: F,
) -> Result<(SelectionState, Vec<EpochMetrics>)>
where
    F: FnMut(&EpochMetrics, &NetworkParams),
{
    cfg.validate()?;
    check_features(&initial, train)?;
    check_features(&initial, valid)?;

    let mut params = initial;
    let mut selection: Option<SelectionState> = None;
    let mut history = Vec::with_capacity(cfg.epochs);
    for e in 0..cfg.epochs {
        let start = Instant::now();
        let outcome = train_epoch(params, train, cfg, e)?;
        params = outcome.params;
        let valid_error = evaluate(&params, valid, policy)?;
        let metrics = EpochMetrics {
            epoch: e,
            learning_rate: outcome.learning_rate,
            train_loss: outcome.mean_loss,
            train_error: outcome.train_error,
            valid_error,
            seconds: start.elapsed().as_secs_f64(),
        };
        match selection.as_mut() {
            None => selection = Some(SelectionState::new(params.clone(), valid_error, e)),
            Some(s) => {
                s.observe(e, valid_error, &params);
            }
        }
        on_epoch(&metrics, &params);
        history.push(metrics);
    }
    let selection = selection.expect("at least one epoch");
    Ok((selection, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{network_backward, network_forward, Activation, DenseLayer};
    use crate::tensor::Matrix;

    fn cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn schedule_endpoints() {
        for epochs in [1, 2, 30, 45] {
            let c = cfg(epochs);
            assert_eq!(lr_at_epoch(&c, 0).unwrap(), 1e-3);
            let last = lr_at_epoch(&c, epochs - 1).unwrap();
            if epochs > 1 {
                assert!((last - 1e-6).abs() <= 1e-12 * 1e-6, "{epochs}: {last}");
            }
        }
        let four = lr_at_epoch(&cfg(4), 1).unwrap();
        assert!((four - 1e-4).abs() <= 1e-12 * 1e-4);
        assert_eq!(
            lr_at_epoch(&cfg(4), 4),
            Err(TrainError::EpochOutOfRange { epoch: 4, epochs: 4 })
        );
    }

    #[test]
    fn schedule_is_monotone() {
        let c = cfg(45);
        let lrs: Vec<f64> = (0..45).map(|e| lr_at_epoch(&c, e).unwrap()).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    fn scalar_net(w: f64, b: f64) -> NetworkParams {
        NetworkParams::new(vec![DenseLayer::new(
            Matrix::from_rows(&[[w]]).unwrap(),
            vec![b],
            Activation::Identity,
        )
        .unwrap()])
        .unwrap()
    }

    fn grads(gw: f64, gb: f64) -> Gradients {
        Gradients {
            weights: vec![Matrix::from_rows(&[[gw]]).unwrap()],
            biases: vec![vec![gb]],
        }
    }

    #[test]
    fn sgd_step_by_hand() {
        let decayed = sgd_step(&scalar_net(1.0, 0.5), &grads(0.0, 0.0), 0.1, 0.01).unwrap();
        assert_eq!(decayed.layers()[0].weights.get(0, 0), 1.0 - 0.1 * 0.01);
        assert_eq!(decayed.layers()[0].bias[0], 0.5);

        let pushed = sgd_step(&scalar_net(0.0, 0.0), &grads(1.0, 2.0), 0.1, 0.0).unwrap();
        assert_eq!(pushed.layers()[0].weights.get(0, 0), -0.1);
        assert_eq!(pushed.layers()[0].bias[0], -0.2);

        let net = scalar_net(0.3, -0.7);
        assert!(sgd_step(&net, &grads(0.0, 0.0), 0.1, 0.0).unwrap().bitwise_eq(&net));
        assert!(sgd_step(&net, &grads(5.0, -3.0), 0.0, 0.01).unwrap().bitwise_eq(&net));
        assert_eq!(
            sgd_step(&net, &Gradients { weights: vec![], biases: vec![] }, 0.1, 0.0),
            Err(TrainError::ShapeMismatch)
        );
    }

    #[test]
    fn quadratic_surrogate_converges_monotonically() {
        // y = w x + b with x = 1, target t: gradient steps keep w - b fixed
        // and drive w + b to t, so w* = (t + w0 - b0) / 2.
        let (w0, b0, t) = (2.0, 0.5, -1.0);
        let w_star = (t + w0 - b0) / 2.0;
        let mut net = scalar_net(w0, b0);
        let mut dist = (w0 - w_star).abs();
        for _ in 0..50 {
            let trace = network_forward(&net, &[1.0]).unwrap();
            let g = network_backward(&net, &trace, &[t]).unwrap();
            net = sgd_step(&net, &g, 0.2, 0.0).unwrap();
            let next = (net.layers()[0].weights.get(0, 0) - w_star).abs();
            assert!(next < dist);
            dist = next;
        }
        assert!(dist < 1e-6);
    }

    fn random_dataset(rng: &mut Rng, n: usize, d: usize) -> Dataset {
        let x = crate::rng::uniform_init(rng, n, d, -1.0, 1.0).unwrap();
        let labels = (0..n).map(|_| rng.below(10) as u8).collect();
        Dataset::new(x, labels).unwrap()
    }

    #[test]
    fn fused_step_matches_reference_path() {
        let mut rng = Rng::new(31);
        let net = NetworkParams::uniform(&mut rng, &[6, 5, 10], -0.3, 0.3, Activation::scaled_tanh())
            .unwrap();
        let x: Vec<f64> = (0..6).map(|_| rng.next_f64() * 2.0 - 1.0).collect();
        let target = encode_target(4).unwrap();

        let trace = network_forward(&net, &x).unwrap();
        let g = network_backward(&net, &trace, &target).unwrap();
        let reference = sgd_step(&net, &g, 0.01, 0.01).unwrap();

        let mut fused = net.clone();
        let mut scratch = StepScratch::new(&net);
        let (loss, predicted) = online_step(&mut fused, &x, &target, 0.01, 0.01, &mut scratch);
        assert!(fused.bitwise_eq(&reference));
        assert_eq!(loss, nn::loss_mse(trace.output(), &target).unwrap());
        assert_eq!(predicted, nn::argmax(trace.output()));
    }

    #[test]
    fn one_sample_epoch_by_hand() {
        // Zero 2->10 scaled-tanh layer: output 0, so delta_k = -t_k * 1.71 * 0.66
        // and w_kj <- -lr * delta_k * x_j.
        let net = NetworkParams::new(vec![DenseLayer::new(
            Matrix::zeros(10, 2),
            vec![0.0; 10],
            Activation::scaled_tanh(),
        )
        .unwrap()])
        .unwrap();
        let x = [0.5, -1.0];
        let data = Dataset::new(Matrix::from_rows(&[x]).unwrap(), vec![3]).unwrap();
        let out = train_epoch(net, &data, &cfg(1), 0).unwrap();
        let lr = 1e-3;
        let ab = 1.71 * 0.66;
        let w = &out.params.layers()[0].weights;
        for k in 0..10 {
            let t = if k == 3 { 1.0 } else { -1.0 };
            let delta = -t * ab;
            for j in 0..2 {
                assert!((w.get(k, j) - (-lr * delta * x[j])).abs() < 1e-15);
            }
            assert!((out.params.layers()[0].bias[k] + lr * delta).abs() < 1e-15);
        }
        assert_eq!(out.mean_loss, 5.0);
        assert_eq!(out.train_error, 1.0);
    }

    #[test]
    fn zero_gradient_data_leaves_params_unchanged() {
        // Identity output layer that already emits the target code.
        let mut w = Matrix::zeros(10, 10);
        for k in 0..10 {
            w.set(k, k, 1.0);
        }
        let net = NetworkParams::new(vec![DenseLayer::new(w, vec![0.0; 10], Activation::Identity).unwrap()])
            .unwrap();
        let rows: Vec<Vec<f64>> = (0..10).map(|k| encode_target(k).unwrap()).collect();
        let data = Dataset::new(Matrix::from_rows(&rows).unwrap(), (0..10).collect()).unwrap();
        let c = TrainConfig {
            weight_decay: 0.0,
            ..cfg(2)
        };
        let out = train_epoch(net.clone(), &data, &c, 0).unwrap();
        assert!(out.params.bitwise_eq(&net));
        assert_eq!(out.mean_loss, 0.0);
        assert_eq!(evaluate(&net, &data, &ParallelPolicy::serial()).unwrap(), 0.0);
    }

    #[test]
    fn epochs_are_reproducible() {
        let mut rng = Rng::new(8);
        let data = random_dataset(&mut rng, 40, 5);
        let net = NetworkParams::uniform(&mut rng, &[5, 7, 10], -0.05, 0.05, Activation::scaled_tanh())
            .unwrap();
        let a = train_epoch(net.clone(), &data, &cfg(3), 1).unwrap();
        let b = train_epoch(net.clone(), &data, &cfg(3), 1).unwrap();
        assert!(a.params.bitwise_eq(&b.params));
        let other = train_epoch(net, &data, &cfg(3), 2).unwrap();
        assert!(!a.params.bitwise_eq(&other.params));
    }

    #[test]
    fn evaluation_counts_errors() {
        // Identity net over the target codes, with one label flipped.
        let mut w = Matrix::zeros(10, 10);
        for k in 0..10 {
            w.set(k, k, 1.0);
        }
        let net = NetworkParams::new(vec![DenseLayer::new(w, vec![0.0; 10], Activation::Identity).unwrap()])
            .unwrap();
        let rows: Vec<Vec<f64>> = (0..4).map(|k| encode_target(k).unwrap()).collect();
        let data = Dataset::new(Matrix::from_rows(&rows).unwrap(), vec![0, 1, 2, 7]).unwrap();
        for threads in [1, 2, 4] {
            let err = evaluate(&net, &data, &ParallelPolicy::with_threads(threads)).unwrap();
            assert_eq!(err, 0.25);
        }
        assert_eq!(72.0 / 10_000.0, 0.0072);
        let empty = Dataset::new(Matrix::zeros(0, 10), vec![]).unwrap();
        assert_eq!(evaluate(&net, &empty, &ParallelPolicy::serial()), Err(TrainError::EmptyData));
    }

    #[test]
    fn selection_keeps_strict_minimum() {
        let net = scalar_net(0.0, 0.0);
        let mut s = SelectionState::new(net.clone(), 0.5, 0);
        assert!(s.observe(1, 0.2, &scalar_net(1.0, 0.0)));
        assert!(!s.observe(2, 0.3, &scalar_net(2.0, 0.0)));
        assert_eq!((s.best_epoch, s.best_validation_error), (1, 0.2));
        assert_eq!(s.best_params.layers()[0].weights.get(0, 0), 1.0);

        let mut tie = SelectionState::new(net, 0.3, 0);
        assert!(!tie.observe(1, 0.3, &scalar_net(5.0, 0.0)));
        assert_eq!(tie.best_epoch, 0);
    }

    #[test]
    fn fit_reports_consistent_selection() {
        let mut rng = Rng::new(10);
        let train = random_dataset(&mut rng, 60, 4);
        let valid = random_dataset(&mut rng, 30, 4);
        let net = NetworkParams::uniform(&mut rng, &[4, 6, 10], -0.05, 0.05, Activation::scaled_tanh())
            .unwrap();
        let c = TrainConfig {
            lr_start: 0.05,
            lr_end: 0.01,
            ..cfg(5)
        };
        let (sel, history) = fit(net.clone(), &train, &valid, &c, &ParallelPolicy::serial()).unwrap();
        assert_eq!(history.len(), 5);
        let min = history.iter().map(|m| m.valid_error).fold(f64::INFINITY, f64::min);
        assert_eq!(sel.best_validation_error, min);
        let first_min = history.iter().position(|m| m.valid_error == min).unwrap();
        assert_eq!(sel.best_epoch, first_min);
        assert_eq!(evaluate(&sel.best_params, &valid, &ParallelPolicy::serial()).unwrap(), min);

        let (one, h1) = fit(net, &train, &valid, &cfg(1), &ParallelPolicy::serial()).unwrap();
        assert_eq!(one.best_epoch, 0);
        assert_eq!(h1.len(), 1);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(cfg(0).validate().is_err());
        let bad = TrainConfig {
            lr_end: 1e-2,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let neg = TrainConfig {
            weight_decay: -1.0,
            ..TrainConfig::default()
        };
        assert!(neg.validate().is_err());
    }
}
