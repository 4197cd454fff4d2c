//! Few-shot new-view synthesis of deforming objects.
//!
//! A two-pass transformer field conditions on features sampled from a few
//! source frames, predicts per-point scene-flow offsets so that features are
//! gathered where the surface actually was at each source time, and renders
//! color, masks and canonical surface embeddings by emission-absorption
//! compositing. A procedural deforming scene supplies exact ground truth for
//! everything the model is supervised or evaluated with.

pub mod dataset;
pub mod encoder;
pub mod error;
pub mod geometry;
pub mod losses;
pub mod masktrack;
pub mod nerformer;
pub mod params;
pub mod render;
pub mod synth;
pub mod train;

pub use error::{CoreError, Result};
