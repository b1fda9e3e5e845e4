//! File formats, timing, verification suites and the command line around
//! `visreformer-core`.
//!
//! - [`config`]: JSON run configuration with dotted overrides.
//! - [`session`]: training and evaluation runs writing logs and checkpoints.
//! - [`checkpoint`], [`cifar`]: binary checkpoints and CIFAR-10 batch files.
//! - [`sweep`], [`report`]: timed attention sweeps and their CSV, JSON and SVG reports.
//! - [`verify`]: the invariant suites behind the `verify` command.
//! - [`runlog`], [`failure`]: manifests, metric logs and exit codes.

pub mod checkpoint;
pub mod cifar;
pub mod config;
pub mod failure;
pub mod report;
pub mod runlog;
pub mod session;
pub mod sweep;
pub mod verify;
