//! Differentiable channel-dimension search for convolutional networks.
//!
//! The crate trains an over-parameterized supernet in which every
//! searchable stage simulates a whole grid of channel widths through
//! prefix masks on its output activations. Two selector families score
//! the candidate widths: independent per-option weights pushed through a
//! tempered (Gumbel) softmax, and a single trainable Gaussian mean whose
//! bump is sampled on the option grid. The Gaussian form makes the search
//! range itself movable; a dynamic allocation pass grows or shrinks the
//! stage kernels at epoch boundaries to follow it, transferring trained
//! weights so the search never restarts.
//!
//! Top-level layout:
//! - [`tensor`]: dense f64 tensors, reverse-mode autodiff, optimizers.
//! - [`masking`]: option grids, prefix masks, both selector families.
//! - [`supernet`]: the searchable network and architecture export.
//! - [`dynalloc`]: epoch-boundary kernel resizing with weight transfer.
//! - [`cost`]: FLOPS/latency cost model and the combined search loss.
//! - [`driver`]: the alternating weight/architecture training loop.
//! - [`data`], [`config`], [`checkpoint`], [`report`]: ingestion, run
//!   configuration, bit-exact resume, and metrics emission.

pub mod checkpoint;
pub mod config;
pub mod cost;
pub mod data;
pub mod driver;
pub mod dynalloc;
pub mod error;
pub mod masking;
pub mod report;
pub mod rng;
pub mod supernet;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{Graph, Tensor};
