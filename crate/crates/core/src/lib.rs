//! Occupancy and flow forecasting on bird's-eye-view rasters with a pair of
//! coupled convolutional LSTM cells.
//!
//! The crate is organised bottom-up:
//!
//! * [`grid`] and [`tape`]: dense NCHW kernels and the reverse-mode tape that
//!   differentiates them.
//! * [`scenario`]: the synthetic world generator, rasterizer and the OFR
//!   on-disk raster format.
//! * [`model`]: encoder, accumulation cell, forecasting cell and decoders.
//! * [`losses`], [`metrics`]: training objectives and the evaluation suite.
//! * [`training`]: AdamW, cosine warm restarts, augmentation and the loop.

pub mod error;
pub mod grid;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod scenario;
pub mod tape;
pub mod training;


pub use error::{Error, Result};
pub use grid::{FeatureGrid, Real};
pub use tape::{Tape, Var};
