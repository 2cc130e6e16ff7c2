//! File formats, run manifests, reports and the `opaseg` command line built on
//! top of `opaseg-core`.

pub mod commands;
pub mod config;
pub mod error;
pub mod io;
pub mod manifest;
pub mod overlay;
pub mod report;

pub use error::{Error, ErrorKind, Result};
