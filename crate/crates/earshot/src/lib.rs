//! Host side of earshot: feature and checkpoint files, log-Mel extraction,
//! JSON manifests, CSV reports and the command implementations behind the
//! `earshot` binary. The numerics live in `earshot-core`.

pub mod audio;
pub mod checkpoint;
pub mod commands;
pub mod error;
pub mod formats;
pub mod manifest;
pub mod report;

pub use error::{Error, Result};
