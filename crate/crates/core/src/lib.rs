//! Staggered difference-in-differences estimation.
//!
//! The crate covers the whole path from a long-format panel to policy
//! effects:
//!
//! - [`panel`]: validated balanced panels, cohort layout, base-period
//!   differencing;
//! - [`numkit`]: least squares, logistic IRLS, within transformation,
//!   cluster-robust covariance;
//! - [`twfe`]: two-by-two and staggered two-way fixed effects baselines;
//! - [`csdid`]: group-time ATTs by outcome regression, inverse probability
//!   weighting and doubly robust estimation;
//! - [`aggregate`]: group, overall, event-time and simple aggregations with
//!   influence-function and bootstrap inference;
//! - [`sensitivity`]: trend-comparison and robust-interval assessments of
//!   parallel trends;
//! - [`simlab`]: synthetic panels with known effects and brute-force oracles.
//!
//! Fan-out work (cells, bootstrap replicates, Monte Carlo replications) runs
//! through [`exec::map_indexed`]; with the default `parallel` feature it uses
//! rayon, and results are identical to a serial run.

// `!(x > 0.0)` is used on purpose so NaN fails the check; index loops over
// parallel row arrays read better than zipped iterators here.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod aggregate;
pub mod csdid;
pub mod error;
pub mod exec;
pub mod inference;
pub mod numkit;
pub mod panel;
pub mod sensitivity;
pub mod simlab;
pub mod twfe;

pub use error::{Error, Result};
pub use exec::Execution;

/// Version of this crate, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
