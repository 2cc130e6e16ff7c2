//! Trainable encoder-decoder, soft-label loss, optimizer and training loop.

mod adam;
mod data;
mod loss;
mod net;
mod ops;
mod train;
mod weights;

pub use adam::{Adam, AdamConfig};
pub use data::{inference_slices, train_samples, val_samples, DatasetError, Preprocess};
pub use loss::{kl_loss, LossOutput, LossTarget, Reduction};
pub use net::{NetConfig, SegNet};
pub use train::{
    select_best, train, train_observed, validation_opacity_iou, EpochRecord, TrainConfig,
    TrainData, TrainError, TrainOutcome, TrainSample, ValSample,
};
pub use weights::{class_weights_from_soft, compute_class_weights, ClassWeights, WeightWarning};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NetError {
    #[error("invalid network configuration")]
    InvalidConfig,
    #[error("expected {expected} parameters, got {got}")]
    ParamCount { expected: usize, got: usize },
    #[error("input {height}x{width} is not divisible by {multiple}")]
    IndivisibleInput {
        height: usize,
        width: usize,
        multiple: usize,
    },
    #[error("empty batch")]
    EmptyBatch,
    #[error("slices in a batch must share one shape")]
    BatchShapeMismatch,
    #[error("backward called before a recorded forward pass")]
    BackwardBeforeForward,
    #[error("logit gradient has {got} values, expected {expected}")]
    GradientShape { expected: usize, got: usize },
    #[error("non-finite gradient at parameter {index}")]
    NonFiniteGradient { index: usize },
    #[error("parameter and gradient lengths differ ({params} vs {grads})")]
    LengthMismatch { params: usize, grads: usize },
    #[error("epsilon must be > 0")]
    NonPositiveEpsilon,
    #[error("{what} is not normalized at pixel {pixel}: sums to {sum}")]
    NotNormalized {
        what: &'static str,
        pixel: usize,
        sum: f64,
    },
    #[error("loss inputs have inconsistent sizes")]
    LossShape,
}
