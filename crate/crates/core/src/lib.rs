//! Reference-back working-memory task, a minimal attention-only decoder
//! transformer trained on it, and the patching machinery used to locate
//! input and output gating inside the attention heads.

pub mod error;
pub mod experiments;
pub mod heuristics;
pub mod model;
pub mod patching;
pub mod seed;
pub mod task;
pub mod trainer;
pub mod viz;

pub use error::{Error, Result};
pub use model::{ActivationCache, ModelConfig, Parameters};
pub use task::{Answer, Dataset, Sequence, TaskConfig, Tuple, Vocabulary};
