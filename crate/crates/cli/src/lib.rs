//! Command-line support: configuration resolution and figure output.

pub mod config;
pub mod plot;
