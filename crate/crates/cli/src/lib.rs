//! Command-line front end for ratematch.

pub mod commands;
pub mod config;
