//! Multi-predicate screening with crowd votes and machine classifiers.
//!
//! Items are screened against several filters; an item is excluded as soon as
//! any filter applies. The [`engine`] module holds the crowd-only shortest-run
//! strategy and its hybrid variant that seeds per-item priors from gated
//! classifiers. [`sim`] and [`experiment`] provide a seeded synthetic world to
//! compare strategies.

pub mod aggregation;
pub mod chart;
pub mod cli;
pub mod engine;
pub mod ensemble;
pub mod error;
pub mod experiment;
pub mod gate;
pub mod io;
pub mod metrics;
pub mod prob;
pub mod report;
pub mod sim;

pub use error::{Error, Result};
