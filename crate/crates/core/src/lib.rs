//! Video-based person re-identification with a spatio-temporal attentive ConvLSTM.
//!
//! The crate is organized around the data path of the system:
//!
//! * [`tensor`] / [`autograd`] — dense `f64` feature maps and a reverse-mode
//!   differentiation tape covering every operation the network needs.
//! * [`params`] — named learnable parameters, SGD with momentum, and the
//!   binary checkpoint container.
//! * [`preprocess`] — YUV conversion, channel standardization, dense
//!   Lucas-Kanade optical flow, and sequence-consistent augmentation.
//! * [`model`] — one Siamese branch: convolutional frontend, the attentive
//!   ConvLSTM filter bank, and the descriptor head.
//! * [`train`] — pair sampling, contrastive + classification loss, the
//!   epoch loop.
//! * [`eval`] — train/test splits, probe/gallery frame selection, CMC
//!   curves, and the ablation sweeps.
//! * [`data`] — dataset ingestion, the synthetic video generator, and run
//!   configuration.
//! * [`cli`] — the command-line surface.

// Tape nodes allocate and drop feature-map buffers at a rate the system
// allocator handles poorly (large blocks bounce through mmap); a pooling
// allocator keeps the training loop compute-bound.
#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

pub mod autograd;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod params;
pub mod preprocess;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use rng::RngStream;
pub use tensor::FeatureMap;
