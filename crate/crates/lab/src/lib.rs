//! Disk, orchestration, and reporting layer around `fewshot-core`.
//!
//! The core crate computes; this one persists and coordinates. It owns the
//! archive container every artifact is stored in ([`archive`]), dataset and
//! checkpoint IO ([`data`], [`checkpoints`], [`records`], [`scores`]), the
//! experiment suite that turns raw artifacts into result tables
//! ([`experiments`]), figure rendering ([`report`]), configuration parsing
//! with provenance tracking ([`config`]), and run manifests with content
//! hashes ([`manifest`]). The `fewshot` binary dispatches CLI subcommands
//! through [`cli::execute`].
//!
//! Everything here is as deterministic as the core: rerunning a command with
//! an identical resolved configuration produces byte-identical artifacts
//! (manifest timings aside).

pub mod archive;
pub mod checkpoints;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod experiments;
pub mod manifest;
pub mod records;
pub mod report;
pub mod scores;

pub use error::{LabError, Result};
