//! Continual mask-classification segmentation at desk scale.
//!
//! A small query-based segmentation network is trained over a sequence of
//! class-incremental steps on synthetic scenes. Forgetting of earlier
//! classes is countered by adaptive distillation of the class
//! probabilities and by mask-based pseudo-labels from the frozen previous
//! model. Evaluation reports panoptic quality and mean IoU.

pub mod distill;
pub mod error;
pub mod formats;
pub mod mask;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod optim;
pub mod protocol;
pub mod runner;
pub mod synthdata;

pub use error::{Error, Result};
