//! Graph consistency regularization for supervised classifiers.
//!
//! Each training batch yields a masked prediction graph built from the
//! network's own softmax outputs; tapped hidden layers are pulled toward it
//! through an alignment loss on their feature similarity graphs. Everything
//! here runs on a small reverse-mode engine over `f64` tensors.

pub mod autodiff;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod gradcheck;
pub mod graphs;
pub mod loss;
pub mod model;
pub mod tensor;
pub mod train;

pub use autodiff::{OpKind, Padding, Tape, Var};
pub use data::{gaussian_blobs, LabeledDataset};
pub use error::{GcrError, Result};
pub use graphs::{SimilarityKernel, SimilarityMatrix};
pub use loss::{GcrConfig, WeightingScheme};
pub use model::{LayerSpec, Network, NetworkSpec, TapPlacement};
pub use tensor::Tensor;
pub use train::{train, RunRecord, TrainConfig};
