//! Score-entropy discrete diffusion on `[S]^d`: forward noising, score
//! networks trained with score entropy, uniformization sampling and the
//! error diagnostics that go with them.

pub mod bregman;
pub mod config;
pub mod diagnostics;
pub mod error;
pub mod interp;
pub mod net;
pub mod sampler;
pub mod score;
pub mod state;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
