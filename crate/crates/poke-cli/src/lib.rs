//! File formats, configuration, parallel gradient evaluation, and the
//! experiment matrix for the poke pipeline. The binary in `main.rs` is a
//! thin argument layer over this crate.

pub mod checkpoint;
pub mod config;
pub mod datastore;
pub mod experiment;
pub mod parallel;
