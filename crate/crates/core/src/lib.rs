//! Certified robust training with interval bound propagation (IBP).
//!
//! The crate covers the whole pipeline at desk scale:
//!
//! - [`tensor`]: dense tensors, deterministic kernels, seeded sampling.
//! - [`autograd`]: a tape-based reverse-mode differentiator over those kernels.
//! - [`net`]: layer graphs, weight initialization schemes and the
//!   difference-gain audit.
//! - [`ibp`]: interval propagation through every layer kind, margin bounds and
//!   tightness / ReLU-state statistics.
//! - [`objective`]: robust cross-entropy, warmup regularizers and schedules.
//! - [`train`]: Adam, clipping, learning-rate milestones, evaluation and
//!   checkpoints.
//! - [`data`]: MNIST IDX ingestion, synthetic blobs, batch iteration.

// Validation deliberately writes `!(x > 0.0)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autograd;
pub mod data;
pub mod error;
pub mod ibp;
pub mod io;
pub mod net;
pub mod objective;
pub mod par;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{DType, Real, SeededRng, Tensor};
