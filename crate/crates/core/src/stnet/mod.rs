//! The spatio-temporal estimator: layers with hand-written backward passes,
//! the two-branch model, Adadelta training and weight files.

pub mod layers;
pub mod model;
pub mod tensor;
pub mod train;
pub mod weights;

pub use layers::{attention_mask, temporal_shift};
pub use model::{
    backprop, backward, backward_with_integral, branch_shape_trace, forward, group_ranges, record,
    segment_frames, window_loss, BranchMode, ModelOptions, NetInput, Tape, GROUPS,
};
pub use tensor::Tensor4;
pub use train::{
    band_weight, dataset_loss, spectral_loss, stretches, train, Adadelta, EpochLog, Sample,
    TrainConfig, TrainReport, Trainer,
};
pub use weights::{load_weights, save_weights, ArchConfig, NetworkWeights, Param};

#[cfg(test)]
mod tests;
