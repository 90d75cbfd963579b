//! Deep belief network toolkit: MNIST IDX ingestion, Gaussian-visible /
//! rectified-hidden RBM pretraining with CD-1, and online backpropagation
//! fine-tuning of scaled-tanh networks with validation-based model
//! selection.

pub mod bench;
pub mod harness;
pub mod idx;
pub mod nn;
pub mod rbm;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use idx::{Dataset, RawIdxImages, RawIdxLabels, SplitSpec};
pub use nn::{Activation, DenseLayer, ForwardTrace, Gradients, NetworkParams};
pub use rbm::{CdConfig, Rbm};
pub use rng::Rng;
pub use tensor::{Matrix, ParallelPolicy};
pub use trainer::{EpochMetrics, SelectionState, TrainConfig};
