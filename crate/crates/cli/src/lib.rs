//! Command-line front end for the oscillation laboratory.

pub mod commands;
pub mod config;
pub mod error;
pub mod output;
