//! Configuration, output and subcommand plumbing behind the `qfibound` binary.

pub mod commands;
pub mod config;
pub mod output;
