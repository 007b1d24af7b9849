//! Colour quantisation laboratory: a two-branch learned quantiser with
//! attention-decoded palettes, perceptual structure objectives, classical
//! baselines and WCS colour-naming tooling.

pub mod autodiff;
pub mod baselines;
pub mod colour;
pub mod cqformer;
pub mod dataset;
pub mod error;
pub mod harness;
pub mod io;
pub mod nn;
pub mod objectives;
pub mod recognition;
pub mod wcs;

pub use error::{Error, Result};
