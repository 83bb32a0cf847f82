//! Small dense/convolutional network core with SGD training.

mod checkpoint;
mod gradcheck;
mod layer;
mod network;
mod tensor;
mod train;


pub use checkpoint::{Checkpoint, TrainMeta, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use gradcheck::{grad_check, relative_error, GradCheckReport, GRAD_CHECK_FLOOR};
pub use layer::{Activation, LayerSpec};
pub use network::{argmax_1based, ForwardPass, Gradients, Loss, Network, Targets};
pub use tensor::Tensor;
pub use train::{evaluate, train, DataSource, EpochRecord, Evaluation, History, MemoryData, TrainConfig};
