//! Experiment-runner companion to `echo-core`: configuration resolution,
//! on-disk formats, and the subcommand implementations behind the
//! `echo-rnn` binary.

pub mod commands;
pub mod config;
pub mod formats;
