//! End-to-end MNIST run: load, normalize, split, optionally pretrain, fine-tune
//! with validation-based selection, test, and write results to `out_dir`.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::time::Instant;

use thiserror::Error;

use super::checkpoint::{save_checkpoint, CheckpointError};
use super::metrics::{emit_metrics, MetricsRow};
use crate::idx::{self, Dataset, IdxError, SplitSpec};
use crate::nn::{Activation, NetworkParams, N_CLASSES};
use crate::rbm::{self, CdConfig, RbmError};
use crate::rng::{split_seed, Rng};
use crate::tensor::ParallelPolicy;
use crate::trainer::{self, EpochMetrics, TrainConfig, TrainError};

pub const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

pub const MODEL_FILE: &str = "model.dbnm";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.txt";

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("missing data file {}", .0.display())]
    MissingDataFile(PathBuf),
    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error("{}: {source}", path.display())]
    Idx {
        path: PathBuf,
        #[source]
        source: IdxError,
    },
    #[error(transparent)]
    Split(#[from] IdxError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Rbm(#[from] RbmError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("writing metrics: {0}")]
    Metrics(#[from] csv::Error),
}

type Result<T> = std::result::Result<T, ExperimentError>;

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    /// Hidden layer sizes; the 784 inputs and 10 outputs are implied.
    pub arch: Vec<usize>,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub epochs: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub pretrain: bool,
    pub pretrain_epochs: usize,
    pub threads: usize,
    pub limit_train: Option<usize>,
    pub limit_valid: Option<usize>,
    pub validation_count: usize,
    /// Also evaluate on the test set after every epoch and report the best
    /// of those alongside the selected model's test error.
    pub track_test: bool,
    /// Per-epoch progress on stderr.
    pub verbose: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            arch: vec![500, 300],
            data_dir: PathBuf::from("data/mnist"),
            out_dir: PathBuf::from("out"),
            epochs: t.epochs,
            lr_start: t.lr_start,
            lr_end: t.lr_end,
            weight_decay: t.weight_decay,
            seed: 0,
            pretrain: true,
            pretrain_epochs: CdConfig::default().epochs,
            threads: 1,
            limit_train: None,
            limit_valid: None,
            validation_count: 10_000,
            track_test: false,
            verbose: false,
        }
    }
}

impl ExperimentConfig {
    fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            lr_start: self.lr_start,
            lr_end: self.lr_end,
            weight_decay: self.weight_decay,
            shuffle_seed: split_seed(self.seed, 2),
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.arch.is_empty() {
            return Err(ExperimentError::ConfigInvalid("architecture is empty".into()));
        }
        if self.arch.contains(&0) {
            return Err(ExperimentError::ConfigInvalid("layer sizes must be positive".into()));
        }
        if self.threads == 0 {
            return Err(ExperimentError::ConfigInvalid("threads must be positive".into()));
        }
        if self.limit_train == Some(0) || self.limit_valid == Some(0) {
            return Err(ExperimentError::ConfigInvalid("sample limits must be positive".into()));
        }
        if self.pretrain && self.pretrain_epochs == 0 {
            return Err(ExperimentError::ConfigInvalid("pretraining needs at least one epoch".into()));
        }
        self.train_config()
            .validate()
            .map_err(|e| ExperimentError::ConfigInvalid(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSummary {
    pub selected_epoch: usize,
    pub valid_err: f64,
    pub test_err: f64,
    /// Lowest per-epoch test error, when `track_test` is set.
    pub best_epoch_test_err: Option<f64>,
    pub wall_seconds: f64,
    pub train_samples: usize,
    pub valid_samples: usize,
    pub test_samples: usize,
    pub history: Vec<EpochMetrics>,
}

impl ExperimentSummary {
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "selected_epoch={}\nvalid_err={}\ntest_err={}\n",
            self.selected_epoch, self.valid_err, self.test_err
        );
        if let Some(best) = self.best_epoch_test_err {
            s += &format!("best_epoch_test_err={best}\n");
        }
        s += &format!(
            "wall_seconds={:.3}\nwall_hours={:.1}\ntrain_samples={}\nvalid_samples={}\ntest_samples={}\n",
            self.wall_seconds,
            self.wall_seconds / 3600.0,
            self.train_samples,
            self.valid_samples,
            self.test_samples
        );
        s
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| match source.kind() {
        io::ErrorKind::NotFound => ExperimentError::MissingDataFile(path.to_path_buf()),
        _ => ExperimentError::Io {
            path: path.to_path_buf(),
            source,
        },
    })
}

fn load_pair(dir: &Path, images: &str, labels: &str) -> Result<Dataset> {
    let image_path = dir.join(images);
    let label_path = dir.join(labels);
    let raw = idx::parse_idx_images(&read_file(&image_path)?).map_err(|source| ExperimentError::Idx {
        path: image_path.clone(),
        source,
    })?;
    let raw_labels = idx::parse_idx_labels(&read_file(&label_path)?).map_err(|source| ExperimentError::Idx {
        path: label_path.clone(),
        source,
    })?;
    idx::normalize(&raw, &raw_labels).map_err(|source| ExperimentError::Idx {
        path: image_path,
        source,
    })
}

/// The MNIST training and test sets from `dir`, under their canonical names.
pub fn load_mnist(dir: &Path) -> Result<(Dataset, Dataset)> {
    for name in [TRAIN_IMAGES, TRAIN_LABELS, TEST_IMAGES, TEST_LABELS] {
        let p = dir.join(name);
        if !p.is_file() {
            return Err(ExperimentError::MissingDataFile(p));
        }
    }
    let train = load_pair(dir, TRAIN_IMAGES, TRAIN_LABELS)?;
    let test = load_pair(dir, TEST_IMAGES, TEST_LABELS)?;
    Ok((train, test))
}

fn initial_network(cfg: &ExperimentConfig, train: &Dataset, policy: &ParallelPolicy) -> Result<(NetworkParams, Vec<MetricsRow>)> {
    let t = cfg.train_config();
    let mut sizes = Vec::with_capacity(cfg.arch.len() + 2);
    sizes.push(train.dim());
    sizes.extend_from_slice(&cfg.arch);
    if !cfg.pretrain {
        sizes.push(N_CLASSES);
        let mut rng = Rng::new(split_seed(cfg.seed, 1));
        let params = NetworkParams::uniform(&mut rng, &sizes, t.init_lo, t.init_hi, Activation::scaled_tanh())
            .map_err(TrainError::from)?;
        return Ok((params, Vec::new()));
    }
    let cd = CdConfig {
        learning_rate: cfg.lr_start,
        epochs: cfg.pretrain_epochs,
        weight_decay: cfg.weight_decay,
        sample_hidden: true,
        seed: split_seed(cfg.seed, 3),
    };
    let (stack, reports) = rbm::greedy_stack(&sizes, train.samples(), &cd, policy)?;
    if cfg.verbose {
        for (k, r) in reports.iter().enumerate() {
            eprintln!(
                "pretrain layer {k}: reconstruction {:.6} -> {:.6} in {:.1}s",
                r.reconstruction_error.first().copied().unwrap_or(f64::NAN),
                r.reconstruction_error.last().copied().unwrap_or(f64::NAN),
                r.wall_seconds
            );
        }
    }
    let mut rng = Rng::new(split_seed(cfg.seed, 4));
    let params = rbm::to_network(&stack, N_CLASSES, &mut rng, t.init_lo, t.init_hi)?;
    Ok((params, MetricsRow::from_pretrain(&reports, cd.learning_rate)))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Runs the full pipeline and writes `model.dbnm`, `metrics.csv` and
/// `summary.txt` into `cfg.out_dir`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentSummary> {
    let start = Instant::now();
    cfg.validate()?;
    let policy = ParallelPolicy::with_threads(cfg.threads);

    let (full, test) = load_mnist(&cfg.data_dir)?;
    let (mut train, mut valid) = idx::split_train_validation(
        &full,
        SplitSpec {
            validation_count: cfg.validation_count,
            shuffle_seed: None,
        },
    )?;
    drop(full);
    if let Some(n) = cfg.limit_train {
        train = train.head(n);
    }
    if let Some(n) = cfg.limit_valid {
        valid = valid.head(n);
    }
    if train.is_empty() || valid.is_empty() || test.is_empty() {
        return Err(ExperimentError::ConfigInvalid(format!(
            "empty split: {} train, {} validation, {} test samples",
            train.len(),
            valid.len(),
            test.len()
        )));
    }
    create_dir(&cfg.out_dir)?;

    let (initial, mut rows) = initial_network(cfg, &train, &policy)?;

    let mut test_errors = Vec::new();
    let mut callback_err = None;
    let (selection, history) = trainer::fit_with(initial, &train, &valid, &cfg.train_config(), &policy, |m, params| {
        let mut line = format!(
            "epoch {:>3}  lr {:.3e}  loss {:.6}  train {:.4}  valid {:.4}",
            m.epoch, m.learning_rate, m.train_loss, m.train_error, m.valid_error
        );
        if cfg.track_test {
            match trainer::evaluate(params, &test, &policy) {
                Ok(e) => {
                    line += &format!("  test {e:.4}");
                    test_errors.push(e);
                }
                Err(e) => callback_err = callback_err.take().or(Some(e)),
            }
        }
        if cfg.verbose {
            eprintln!("{line}  ({:.1}s)", m.seconds);
        }
    })?;
    if let Some(e) = callback_err {
        return Err(e.into());
    }

    let test_err = trainer::evaluate(&selection.best_params, &test, &policy)?;
    rows.extend(history.iter().map(MetricsRow::from));

    save_checkpoint(&selection.best_params, &cfg.out_dir.join(MODEL_FILE))?;
    emit_metrics(&rows, &cfg.out_dir.join(METRICS_FILE))?;

    let summary = ExperimentSummary {
        selected_epoch: selection.best_epoch,
        valid_err: selection.best_validation_error,
        test_err,
        best_epoch_test_err: test_errors.iter().copied().reduce(f64::min),
        wall_seconds: start.elapsed().as_secs_f64(),
        train_samples: train.len(),
        valid_samples: valid.len(),
        test_samples: test.len(),
        history,
    };
    let summary_path = cfg.out_dir.join(SUMMARY_FILE);
    fs::write(&summary_path, summary.to_text()).map_err(|source| ExperimentError::Io {
        path: summary_path,
        source,
    })?;
    Ok(summary)
}
