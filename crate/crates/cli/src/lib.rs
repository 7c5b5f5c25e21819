//! `neoanova`: CSV in, versioned JSON (or text) report out.
//!
//! Exit codes: 0 success, 1 usage/formula/model specification, 2 data,
//! 3 identifiability, 4 non-convergence or numerical failure. Failures print
//! one line `error kind=<kind> code=<n>: <message>` on stderr; runs that fail
//! identifiability or convergence still print their report.

pub mod cli;
pub mod dataset;
pub mod error;
pub mod report;
pub mod run;
pub mod text;

pub use cli::{run_from_args, Cli, Output};
pub use dataset::{load_csv, parse_csv, ColumnKind, Dataset, Declarations};
pub use error::{CliError, ErrorKind};
pub use report::{RunReport, SCHEMA_VERSION};
pub use run::{run_fit, run_identify, run_spectrum, run_yates, PredictionRequests, RunOutcome};
