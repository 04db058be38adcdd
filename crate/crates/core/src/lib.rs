//! Contracts for moral hazard with rich monitoring data.
//!
//! An agent privately chooses an action; the principal observes `n`
//! i.i.d. signals and pays a wage. The crate computes exact finite-n
//! implementation costs for binary test contracts, linear schedules and
//! the fully optimal contract, the divergences that govern their
//! convergence to the first best, and fits empirical decay rates.

// `!(x > 0.0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod model;
pub mod monitoring;
pub mod numeric;
pub mod preferences;
pub mod score_dist;
pub mod contracts;
pub mod barrier;
pub mod solvers;
pub mod rates;
pub mod adjustable;
pub mod oracle;
pub mod experiments;

pub use error::{Error, Result};
pub use model::Model;
