//! Knowledge-guided cross-modal traffic demand forecasting.
//!
//! Structured demand features are fused with textual prior knowledge
//! through prompt-guided cross attention, refined by a learned feature
//! graph, gated with a global text prompt, and forecast by an encoder whose
//! feature-axis attention is biased by the learned relation matrix.

pub mod autodiff;
pub mod benchmark;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod rng;
pub mod serialize;
pub mod tensor;
pub mod text;

pub use error::{KgcmError, Result};
pub use tensor::Tensor;
pub use config::{ComponentSet, Config, TrainConfig};
pub use data::{DemandDataset, GeneratorConfig, TextMode};
pub use pipeline::{fit, TrainedModel};
