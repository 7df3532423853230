//! Compression toolkit for multi-dimensional microscopy-style volumes.
//!
//! A volume is encoded as the weights of a small sinusoidal coordinate
//! network, optionally fit to the residual left over by a classic
//! block-transform codec, and stored in a self-describing `.inif` file
//! that decodes arbitrary pixels, regions, strides, or masks on demand.

pub mod codec;
pub mod error;
pub mod format;
pub mod guidance;
pub mod metrics;
pub mod optim;
pub mod pipeline;
pub mod siren;
pub mod volume;

pub use error::{InifError, Result};
