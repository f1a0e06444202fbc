//! Building blocks for training and explaining ResNet classifiers on MRI
//! slices: a reverse-mode tape, layers, losses, optimizers, a NIfTI slicing
//! pipeline, checkpoints and Grad-CAM.

pub mod data;
pub mod error;
pub mod experiment;
pub mod gradcam;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use loss::{class_weights, cross_entropy, weighted_cross_entropy, ClassWeights};
pub use metrics::{confusion, report, ConfusionMatrix, MetricsReport};
pub use model::{ActivationPolicy, Checkpoint, LoadReport, ResNet, ResNetSpec, TransferPolicy};
pub use nn::{ActivationKind, Mode};
pub use optim::{Hyper, Optimizer, OptimizerKind, Preset};
pub use tensor::{DType, Element, Tape, Tensor, Var};
