//! Motion-graph video prediction.
//!
//! Frames are encoded into multi-scale patch features, a motion graph is
//! built over the patches, motion features are propagated by spatial and
//! temporal message passing, decoded into per-pixel dynamic vectors and
//! turned into the next frame by normalized multi-flow forward warping.

pub mod encoder;
pub mod error;
pub mod graph;
pub mod interaction;
pub mod numerics;
pub mod pipeline;
pub mod warp;

pub use error::{Error, Result};
