//! Experiment driver for contribution-budget optimization: loads or
//! generates data, fits each method on a training split, scores it by
//! Monte Carlo on the test split and writes reproducible result files.

pub mod config;
pub mod experiment;
pub mod generalize;
pub mod output;

pub use config::{ExperimentConfig, Method, Source, SynthSource, OUTPUT_DIR_ENV};
pub use experiment::{run_experiment, ExperimentOutput, ResultRow};
pub use generalize::{generalization_check, GeneralizationReport};
pub use output::emit_outputs;

use ara_budget::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

/// Process exit code for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Parameter(_) => EXIT_CONFIG,
        Error::Data(_) | Error::Io(_) | Error::Csv(_) | Error::Json(_) => EXIT_DATA,
        Error::Numerical(_) | Error::Shape { .. } => EXIT_NUMERICAL,
    }
}
