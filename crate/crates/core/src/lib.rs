//! Dense point-cloud segmentation trained from scene-level tags.
//!
//! The crate covers a synthetic indoor scene generator, handcrafted point
//! descriptors and supervoxels, a small encoder/classifier with exact
//! gradients, dataset-wide K-means primitives, primitive-to-class matching,
//! the training losses, the training schedule with evaluation tooling, and
//! a command-line front end.

pub mod cli;
pub mod clustering;
pub mod encoder;
pub mod error;
pub mod features;
pub mod losses;
pub mod matching;
pub mod scenegen;
pub mod trainer;

pub use error::{Error, Result};
