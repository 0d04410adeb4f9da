//! Model-based clustering of time series with regime changes.
//!
//! Each cluster of curves is described by a hidden Markov chain over
//! polynomial regression regimes. Parameters are fitted by a dedicated EM
//! algorithm; the crate also ships the comparison baselines, synthetic
//! scenario generators and CSV/JSON I/O used by the `regimeclust` CLI.

pub mod baselines;
pub mod datasets;
pub mod error;
pub mod hmm;
pub mod mixhmmr;
pub mod numcore;
mod par;
pub mod rng;

pub use error::{Error, Result};
pub use hmm::{ChainParams, Constraint};
pub use mixhmmr::{fit_em, Dataset, FitResult, ModelConfig, ModelParams, Posteriors};
pub use numcore::TimeGrid;
