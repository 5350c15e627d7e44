//! Cross-modal token distillation for event-camera vision transformers.

pub mod distill;
pub mod dump;
pub mod encoder;
pub mod error;
pub mod events;
pub mod metrics;
pub mod numeric;
pub mod significance;
pub mod trainer;
pub mod synth;

pub use error::{Error, Result};
pub use numeric::{Graph, Tensor, Var};
