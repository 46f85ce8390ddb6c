//! Visual grounding with box-to-segmentation supervision and triple
//! attention alignment, on a small CPU autodiff engine.

pub mod ablation;
pub mod attention;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod gradcheck_suite;
pub mod losses;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
