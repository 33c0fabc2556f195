//! Library half of the `xtray` binary, split out so the HTTP router and the
//! offline commands can be tested in-process.

pub mod api;
pub mod commands;
pub mod error;

pub use error::CliError;
