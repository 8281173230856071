//! Command-line front end for `stagdid`: panel CSV ingestion, the analysis
//! pipeline and its result files.

pub mod error;
pub mod ingest;
pub mod pipeline;

pub use error::{CliError, CliResult};
pub use pipeline::{run, sensitivity, simulate, validate, RunConfig};

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "STAGDID_OUT_DIR";
