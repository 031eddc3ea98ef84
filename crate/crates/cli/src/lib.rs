//! Command-line front end: configuration, file formats and the `gen`,
//! `detect`, `eval`, `selftest` and `init-weights` commands.

pub mod commands;
pub mod config;
pub mod format;
pub mod scene_dir;
pub mod selftest;

/// Environment variable that sets the worker thread count.
pub const THREADS_ENV: &str = "MVDET_THREADS";
