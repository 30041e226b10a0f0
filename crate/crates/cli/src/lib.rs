//! Command-line workflows and the HTTP service around `ecgwm-core`.

pub mod commands;
pub mod config;
pub mod error;
pub mod http;
pub mod service;

pub use error::CliError;
