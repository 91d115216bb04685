//! Library surface of the experiment CLI, exposed for integration tests.

pub mod commands;
pub mod config;
