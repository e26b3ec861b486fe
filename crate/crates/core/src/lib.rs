//! Numerical core for uncertainty-driven sparse sampling attention.
//!
//! The crate is organized around a small f64 tensor engine with reverse-mode
//! automatic differentiation ([`tensor`]), on top of which sit the mechanism
//! modules: Laplace-uncertainty ranking constructs ([`uncertainty`]), window /
//! sparse-sampling / local-reconstruction attention ([`attention`]), the full
//! encoder-decoder restoration model and its training loop ([`model`]), a
//! procedural rain-scene generator ([`raingen`]), and luminance-channel image
//! quality metrics ([`metrics`]).
//!
//! Everything is plain sequential f64 math: the point of this crate is that
//! every gradient can be checked against central finite differences and every
//! run is bit-reproducible from a seed.

pub mod attention;
pub mod error;
pub mod maps;
pub mod metrics;
pub mod model;
pub mod params;
pub mod raingen;
pub mod rng;
pub mod tensor;
pub mod uncertainty;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{Gradients, Tape, Tensor};
