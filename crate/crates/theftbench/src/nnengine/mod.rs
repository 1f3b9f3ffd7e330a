//! Minimal 64-bit neural-network engine: the Dense/LSTM/Conv model families
//! used for theft detection, with training, inference, and exact gradients
//! of the loss with respect to the 48 input readings.

mod gradcheck;
mod layer;
mod model;
mod presets;
mod tensor;
mod train;

pub use gradcheck::{finite_difference_check, finite_difference_check_params, relative_error};
pub use layer::{Activation, Batch, DataShape, ForwardMode, LayerParams, LayerSpec};
pub use model::{
    readings_matrix, softmax_rows, InputShape, ModelArchitecture, TrainMeta, TrainedModel,
    MODEL_FILE_VERSION,
};
pub use presets::{architecture, PRESET_NAMES, SMALL_PRESET_NAMES};
pub use tensor::Tensor;
pub use train::{confusion, evaluate_model, train_model, Metrics, TrainConfig};
