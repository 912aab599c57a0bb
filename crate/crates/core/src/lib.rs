//! Self-evolving semi-supervised image classification: a small vision
//! transformer trained on a fixed labeled set, then distilled teacher to
//! student over a growing unlabeled pool, with diagnostic statistics and
//! attention-based localization scoring.

pub mod distill;
pub mod error;
pub mod eval;
pub mod model;
pub mod optim;
pub mod par;
pub mod pipeline;
pub mod protocol;

pub use error::{DistlError, Result};
