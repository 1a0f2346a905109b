//! Command-line front end for `deco-core`: single runs, parallel sweeps,
//! summaries with provenance, learning-curve plots and the oracle checks.

pub mod cli;
pub mod error;
pub mod oracle_suite;
pub mod output;
pub mod plot;
pub mod summary;
pub mod sweep;

pub use error::{HarnessError, Result};
