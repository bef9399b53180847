//! Harness library behind the `neuroctl` binary: configuration, the
//! figure-level experiment protocols, and the train/export commands.

pub mod commands;
pub mod common;
pub mod config;
pub mod experiments;
