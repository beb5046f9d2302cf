//! Run-directory lifecycle commands behind the `consentctl` binary.

pub mod commands;
pub mod config;
pub mod error;
pub mod rundir;

pub use config::RunConfig;
pub use error::CliError;
pub use rundir::RunDir;
