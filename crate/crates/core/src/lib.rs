//! Open-set recognition on feature vectors.
//!
//! A classifier trained on a fixed set of categories meets a stream holding
//! categories it has never seen. This crate implements the full lifecycle
//! for that setting:
//!
//! 1. **Detect**: per-category confidence thresholds calibrated from the
//!    training data drive a four-rule cascade that either names a known
//!    category or flags the sample as unknown ([`thresholds`]).
//! 2. **Label**: a teacher oracle annotates a bounded number of flagged
//!    samples per category ([`openworld`]).
//! 3. **Expand**: the classification layer grows a column for the largest
//!    labeled group, initialized from the existing columns ([`classifier`]).
//! 4. **Fine-tune**: a short balanced training run settles the new column
//!    while established columns move at a reduced rate, then thresholds are
//!    recalibrated and the loop repeats.
//!
//! Everything is deterministic. Randomized steps take explicit seeds, so a
//! session over a fixed split and config reproduces its log byte for byte.
//! The `parallel` feature (on by default) runs batch scoring on rayon worker
//! threads; results are identical with it disabled.

pub mod batch;
pub mod classifier;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod openworld;
pub mod thresholds;

pub use error::{Error, Result};
