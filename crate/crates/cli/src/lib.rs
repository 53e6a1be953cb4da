//! Batch front end for the `densemimo` library.
//!
//! The binary reads a single TOML run configuration and dispatches one of
//! three subcommands: `analytic` (closed-form sweeps), `simulate` (Monte
//! Carlo sweeps) and `selftest` (fast numerical invariant checks). Results
//! go to a CSV file or stdout, with every parameter that influences the
//! numbers echoed in `#`-prefixed metadata lines.

pub mod config;
pub mod report;
pub mod run;
