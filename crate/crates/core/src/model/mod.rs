//! Miniature mask-classification network with hand-derived gradients.

mod forward;
mod infer;
mod params;

pub use forward::{backward, forward, positional_encoding, predict, ForwardCache, PredictionSet};
pub use infer::{infer_panoptic, infer_semantic, query_classes};
pub use params::{MaskActivation, ModelConfig, ModelParams, Weights, NO_OBJECT};
