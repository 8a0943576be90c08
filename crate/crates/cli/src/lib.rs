//! Library surface of the `bundlerec` binary: configuration resolution
//! and the run manifest, exposed for integration tests.

pub mod config;
pub mod manifest;
