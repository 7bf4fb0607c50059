//! Library surface of the `pedalign` binary: run configuration and the
//! pipeline stages, shared with the integration and acceptance tests.

pub mod config;
pub mod pipeline;
