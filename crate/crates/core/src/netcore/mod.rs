//! Dense arrays, the tiny convolutional extractor with its detection head, exact
//! reverse-mode gradients, SGD, and parameter checkpoints.

mod checkpoint;
mod layers;
mod model;
mod optim;
mod tensor;

pub(crate) use layers::gemm_bt;
pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
pub use model::{backward, forward, ExtractorParams, FeatureMap, ForwardPass, FEATURE_CHANNELS, STRIDE};
pub use optim::Sgd;
pub use tensor::Tensor;
