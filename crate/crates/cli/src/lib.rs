//! Command-line front end for the `spdfit` detector model.

pub mod commands;
pub mod error;
pub mod formats;
pub mod units;

pub use commands::{run, Cli, Outcome};
pub use error::CliError;

/// Process exit status for a finished command.
pub fn exit_code(result: &Result<Outcome, CliError>) -> u8 {
    match result {
        Ok(Outcome::Success) => 0,
        Ok(Outcome::NotConverged) => 2,
        Err(CliError::Model(spdfit::Error::NonConvergence { .. })) => 2,
        Err(_) => 1,
    }
}
