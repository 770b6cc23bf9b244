//! File formats, stream loading, run configuration and the experiment runner
//! built on `tops-core`.

pub mod bench;
pub mod config;
pub mod error;
pub mod formats;
pub mod io;

pub use error::{Result, ToolError};
