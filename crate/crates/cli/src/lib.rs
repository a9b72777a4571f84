//! Experiment driver for automatic adapter rank search.
//!
//! The `autorank` binary wraps these modules:
//!
//! - [`config`] reads the `key = value` run configuration (or its JSON form).
//! - [`commands`] implements `run`, `sweep`, `theory` and `plot`.
//! - [`report`] writes the CSV and JSON result files.
//! - [`plot`] draws SVG line charts of a run.
//!
//! Exit codes are 0 on success, 2 for an invalid config or arguments and 3
//! when training diverges. Every file is a pure function of the config and
//! seed; the random generator is ChaCha8 with one stream per purpose, as
//! documented in `autorank::rng`.

pub mod commands;
pub mod config;
pub mod plot;
pub mod report;

/// Environment variable naming the directory that relative output paths are placed under.
pub const OUTPUT_ROOT_ENV: &str = "AUTORANK_OUTPUT_ROOT";
