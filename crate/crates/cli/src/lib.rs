//! Library surface of the command-line pipeline, reused by the integration
//! and acceptance suites.

pub mod config;
pub mod federate;
pub mod pipeline;
