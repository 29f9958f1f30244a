//! Distilling a large sentence encoder into a small BiLSTM student and
//! fine-tuning the student on downstream classification tasks.
//!
//! All numeric work runs in `f64`; checkpoints and teacher files store `f32`.
//! Batch reductions go through [`parallel`], so results are identical with
//! and without the `parallel` feature.

pub mod bench;
pub mod checkpoint;
pub mod data;
pub mod distill;
pub mod error;
pub mod finetune;
pub mod gradcheck;
pub mod metrics;
pub mod nn;
pub mod parallel;
pub mod rng;
pub mod sweep;
pub mod synthetic;
pub mod teacher;
pub mod tensor;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::Tensor;
