//! Controlled-memorization corpora, offset-parameterized probes, and
//! verbatim-recall scoring for language-model training data.
//!
//! The pieces compose into one pipeline:
//!
//! - [`tokendata`] and [`packer`] turn documents into fixed-length,
//!   BOD-prefixed segments stored in a compact binary format.
//! - [`corpusgen`] schedules segments into dense, sparse or swapped
//!   training corpora with exact per-segment exposure counts.
//! - [`probekit`] cuts prefix/suffix probes at controlled offsets.
//! - [`metrics`] scores continuations; [`oracles`] supplies memorizers with
//!   known behavior; [`report`] aggregates the scores.
//! - [`pipeline`] runs all of it from one config file.

pub mod canonical;
pub mod corpusgen;
pub mod error;
pub mod fsutil;
pub mod metrics;
pub mod oracles;
pub mod packer;
pub mod pipeline;
pub mod probekit;
pub mod report;
pub mod rng;
pub mod tokendata;

pub use error::{Error, Result};
