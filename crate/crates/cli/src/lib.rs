//! Library side of the `cvfl` binary, shared with the integration tests.

pub mod commands;
pub mod config;
pub mod error;
