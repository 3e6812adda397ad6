//! Command-line front end: synthetic ensemble generation, the cross-scale
//! sweep over CSV trace directories, JSON reports and SVG figures.

pub mod commands;
pub mod error;
pub mod fsutil;
pub mod report;
pub mod svg;

pub use error::CliError;
pub use report::Report;
