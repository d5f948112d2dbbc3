//! Feed-forward motion segmentation: geometry, flow and camera tokens are
//! fused per patch, decoded by multi-frame self-attention into motion masks,
//! trained with focal + dice losses and scored with region/boundary metrics.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dataio;
pub mod decoder;
pub mod diffcore;
pub mod error;
pub mod flowenc;
pub mod fusion;
pub mod gradsuite;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod presets;
pub mod providers;
pub mod sequence;
pub mod synthscenes;
pub mod trainer;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub use error::{Error, ErrorKind, Result};
