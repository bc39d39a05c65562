//! Spatio-temporal video diffusion transformer trained with flow matching.
//!
//! The crate is organised bottom-up: [`tensor`] provides dense arrays with a
//! reverse-mode tape, [`nn`] the attention/normalization building blocks, [`model`]
//! the full network, [`conditioning`] and [`flow`] the conditioning algebra, guidance
//! and sampler, [`train`] the optimizer loop and model surgery, and [`synth`] a
//! synthetic moving-shape corpus with an independent motion oracle.

pub mod conditioning;
pub mod error;
pub mod flow;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Result, StivError};
pub use tensor::{Real, RngState, Tape, Tensor, Var};
