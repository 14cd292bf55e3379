//! Polyp segmentation workbench.
//!
//! Five encoder-decoder architectures (plain U-Net, Leaky-ReLU U-Net, residual
//! U-Net with a dilated bottleneck, Inception U-Net and a reverse-attention
//! network), the Kvasir-SEG style data pipeline, training with Dice/BCE
//! losses, and six-metric evaluation with leaderboard-style reporting.

pub mod autograd;
pub mod checkpoint;
pub mod datapipe;
pub mod cli;
pub mod error;
pub mod evaluator;
pub mod kernels;
pub mod metrics;
pub mod models;
pub mod tensor;
pub mod trainer;

pub use error::{Result, SegError};
pub use tensor::Tensor;
