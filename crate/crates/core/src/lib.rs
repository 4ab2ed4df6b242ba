//! Quantal synaptic dilution (QSD): a dropout variant whose per-unit retain
//! probabilities are beta distributed and whose rescaling sizes are linked
//! linearly to those probabilities, together with the small dense-network
//! core, MNIST ingestion, statistics and experiment runner needed to study it.

pub mod dataio;
pub mod dilution;
pub mod error;
pub mod experiment;
mod fsutil;
pub mod labstats;
pub mod netcore;
pub mod stochastics;

pub use error::{Error, Result};
