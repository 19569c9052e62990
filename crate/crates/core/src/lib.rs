//! Coded-aperture snapshot spectral imaging: forward optics, a grouped
//! deformable convolution network with coarse-fine spectral-aware blocks, and
//! the training and evaluation machinery around it.

pub mod blocks;
pub mod data;
pub mod deform;
pub mod error;
pub mod io;
pub mod metrics;
pub mod network;
pub mod nn;
pub mod optics;
pub mod selfcheck;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
