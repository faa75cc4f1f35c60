//! Operator entry point for the grid generation toolkit: configuration,
//! run directories and the subcommand bodies behind the `flashar` binary.

pub mod commands;
pub mod config;
pub mod error;
