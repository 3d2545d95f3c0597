//! Patch-aware batch normalization (PBN) and friends.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: a rank-4 dense tensor, a recorded operation tape with
//!   reverse-mode differentiation, and the handful of layers a tiny CNN needs.
//! - [`scheme`]: spatial patch partitions, per-channel patch-count draws and
//!   the pixel-group ablation partitioner.
//! - [`norm`]: BN, IN, LN, GN and the patch-aware layer, all differentiable.
//! - [`stats`]: per-patch statistics of images or feature maps.
//! - [`harness`]: synthetic data, corruption suite, training and evaluation.
//! - [`cli`]: the `patchnorm` command-line entry points.

pub mod cli;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod norm;
pub mod record;
pub mod scheme;
pub mod stats;
pub mod tensor;

pub use error::{Error, Result};
pub use norm::{NormKind, NormState};
pub use scheme::{PatchGrid, Rect, SchemeConfig, SplitMode};
pub use tensor::{Scalar, Shape, Tape, Tensor, Var};
