//! Command-line front end for the hypolab laboratory: configuration,
//! experiment pipelines and run directories.

pub mod commands;
pub mod config;
pub mod output;
