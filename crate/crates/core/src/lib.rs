//! Adaptive data analysis over correlated observations.
//!
//! The crate is organised by role:
//!
//! * [`measures`]: product, table, undirected-chain and planted-point measures
//!   with exact marginals, conditionals and sampling.
//! * [`dependence`]: total variation distance, the brute-force Gibbs-dependence
//!   coefficient `psi(mu)` and the closed-form chain bound `R̄`.
//! * [`privacy`]: Laplace/Gaussian noise, the exponential mechanism, a
//!   stability-based private histogram and the deviating private algorithm.
//! * [`game`]: the adaptive query game, accuracy evaluation, the concentration
//!   width `gamma(q, mu, delta)` and the exponential-mechanism monitor.
//! * [`mechanisms`] and [`analysts`]: the two interactive roles of the game.
//!
//! Every random quantity is drawn from an explicit [`seeding::Rng`] so that runs
//! are reproducible from a single seed.

pub mod analysts;
pub mod dependence;
pub mod error;
pub mod game;
pub mod measures;
pub mod mechanisms;
pub mod privacy;
pub mod query;
pub mod seeding;

/// A symbol of the finite alphabet, `0..alphabet.size()`.
pub type Symbol = u32;

pub use error::{Error, Result};
pub use measures::{Alphabet, Measure, MeasureSpec};
pub use query::{Query, StatisticalQuery};
