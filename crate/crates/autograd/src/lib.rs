//! Minimal reverse-mode automatic differentiation with exactly the operator
//! set a DenseNet classifier needs: convolution, batch normalisation, relu,
//! pooling, channel concatenation, a linear layer and softmax cross-entropy.
//!
//! Tensors are generic over [`Scalar`]: `f32` for training and `f64` for
//! gradient checking. Operators parallelise over independent slices only
//! and reduce partial results in a fixed order, so outputs are bit-identical
//! regardless of thread count.

mod batchnorm;
mod checkpoint;
mod conv;
mod error;
mod gradcheck;
mod ops;
mod optim;
mod param;
mod scalar;
mod tensor;

pub use batchnorm::{batchnorm2d, Mode, RunningStats};
pub use checkpoint::{read_checkpoint, write_checkpoint, CheckpointEntry, CHECKPOINT_VERSION};
pub use conv::conv2d;
pub use error::{AutogradError, Result};
pub use gradcheck::{gradient_check, run_gradient_suite, OpCheck};
pub use ops::{
    avg_pool_2x2, concat_channels, global_avg_pool, linear, log_softmax_rows, mul, relu, softmax_cross_entropy, sum,
};
pub use optim::{adam_step, sgd_step, AdamConfig, SgdConfig};
pub use param::{OptimizerState, Parameter};
pub use scalar::Scalar;
pub use tensor::{BackwardOp, Tensor};
