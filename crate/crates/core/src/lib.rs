//! Testbed for sample-specific debiased contrastive learning on synthetic
//! latent-class mixtures.

pub mod bounds;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod experiments;
pub mod io;
pub mod eta;
pub mod mixture;
pub mod objectives;
pub mod optim;
pub mod par;
pub mod rng;
pub mod text;
pub mod train;

pub use error::{Error, Result};
