//! Extragradient for strongly monotone variational inequalities driven by
//! Markovian stochastic oracles.
//!
//! The crate is organised bottom-up:
//!
//! - [`problem`]: the bilinear-regularised saddle family, its affine operator
//!   `F(z) = Mz + q`, certified constants `L`, `mu` and the exact solution.
//! - [`markov`]: finite-state chains, stationary distributions, mixing times
//!   and per-state noise laws.
//! - [`oracle`]: the stochastic oracle `F(z, xi) = F(z) + xi`, with strict
//!   reuse of one noise draw across both half-steps of an iteration.
//! - [`solver`]: the extragradient loop and step-size rules.
//! - [`metrics`]: plateau and sample-variance statistics plus per-step checks
//!   of the descent and step-back inequalities on recorded traces.
//! - [`harness`]: seeded `(p, sigma)` sweeps and CSV reports.
//! - [`cli`]: the `markov-vi` command-line surface.

pub mod cli;
pub mod harness;
pub mod markov;
pub mod metrics;
pub mod oracle;
pub mod problem;
pub mod seed;
pub mod solver;

pub use markov::{MarkovNoiseChain, MixingProfile, NoiseDistribution};
pub use oracle::{OracleMode, StepSample, StochasticOracle};
pub use problem::{AffineVIOperator, SaddleInstance, Solution};
pub use solver::{RunTrace, SolverConfig};
