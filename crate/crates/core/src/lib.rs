//! Numerical toolkit for two-player zero-sum stochastic differential games
//! driven by a Brownian motion and a finite-activity Poisson random measure.
//!
//! Three routes compute the lower and upper values and check each other:
//! backward simulation of the associated BSDEs with jumps ([`bsde`]), discrete
//! dynamic programming over finite control sets ([`game`]), and an explicit
//! monotone finite-difference scheme for the Isaacs integro-PDEs ([`pide`]).
//! [`oracle`] enumerates the full discretized noise tree on tiny instances.

pub mod bsde;
pub mod error;
pub mod export;
pub mod forward;
pub mod game;
pub mod grid;
pub mod levy_paths;
pub mod oracle;
pub mod pide;
pub mod problem;
pub mod quadrature;
pub mod stats;
pub mod step;
pub mod verify;

pub use error::{Error, Result};
