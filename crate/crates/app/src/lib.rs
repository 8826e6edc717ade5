//! Chat REST service and the pipeline command line.

pub mod api;
pub mod cli;
pub mod config;
pub mod store;
