//! Command-line front end and HTTP service for the `pvse-core` engine.

pub mod cli;
pub mod server;
