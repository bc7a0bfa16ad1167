//! Bitemporal change detection with a Siamese encoder, Hopfield-based
//! feature retrieval and multi-scale fusion, on a small deterministic f64
//! autodiff library.

pub mod data;
pub mod decoder;
pub mod dsfr;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use kernels::UpsampleMode;
pub use tape::{Tape, Var};
pub use tensor::Tensor;
