//! Desk-scale simulator for collaborative learning with gradient
//! pruning defenses, gradient inversion attacks against them, and
//! executable checks of the analytical claims about the defense.
//!
//! The crate is organized bottom-up:
//! - [`numerics`]: tensors, seeded randomness, Adam
//! - [`model`]: small MLP classifiers with analytic gradients
//! - [`defense`]: magnitude pruning rules, error feedback, the
//!   aligned collaborative variant, and differential-privacy noise
//! - [`attack`]: label inference, analytic and optimization-based
//!   input reconstruction, and the active imprint attack
//! - [`metrics`]: gradient distances, image quality, wire accounting
//! - [`sim`]: datasets and the multi-user training loop
//! - [`theory`]: numeric checks of the stated bounds
//! - [`cli`]: the `dgpsim` command line front end

pub mod attack;
pub mod cli;
pub mod defense;
pub mod error;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod sim;
pub mod theory;

pub use error::{DgpError, Result};
