//! Wealth-share dynamics under wealth-dependent taxation.
//!
//! A population of agents holds shares of a unit total wealth. Each year every
//! share is multiplied by a random positive factor, taxed at a rate linear in
//! the post-growth share, optionally topped up by uniform redistribution of a
//! fraction of the collected taxes, and renormalised so shares again sum to
//! one. Progressive rates keep wealth distributed forever; regressive rates
//! drive the system into an absorbing state where one agent owns everything.
//!
//! The crate provides the stochastic simulation with 113-bit share
//! arithmetic ([`extprec`], [`model`]), a deterministic mean-field solver for
//! the steady state ([`meanfield`]), observable reduction and power-law
//! fitting ([`stats`]), and an experiment layer with sweeps, checkpointing
//! and CSV emission ([`experiment`]).

pub mod config;
pub mod csvio;
pub mod experiment;
pub mod extprec;
pub mod meanfield;
pub mod model;
pub mod stats;

pub use extprec::{ExtendedReal, PrecisionError};
pub use model::{FactorDistribution, FieldParams, ModelParams, ShareVector, TaxBase};
