//! Disentangled two-modality fusion with missing-modality handling and
//! per-class attention, plus a synthetic benchmark harness.
//!
//! The crate is organized bottom-up:
//!
//! - [`kernels`]: pure numeric operators and their analytic gradients.
//! - [`autograd`]: a small reverse-mode tape over [`tensor::Matrix`].
//! - [`encoders`]: the EHR transformer and the image convolution stack.
//! - [`fusion`]: logit pooling, masked per-class attention, auxiliary heads.
//! - [`model`]: DrFuse and the internal baselines.
//! - [`training`]: the objective, modality dropout, Adam and early stopping.
//! - [`data`]: records, the synthetic generator, manifests and splits.
//! - [`eval`]: PRAUC, bootstrap intervals, probes, ablations, baselines.
//! - [`cli`]: the experiment commands behind the `drfuse` binary.

pub mod autograd;
pub mod cli;
pub mod data;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod kernels;
pub mod model;
pub mod params;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use model::{Model, ModelConfig, ModelKind};
pub use tensor::Matrix;
pub use training::{LossBreakdown, TrainConfig};
