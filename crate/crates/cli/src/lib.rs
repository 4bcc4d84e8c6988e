//! Desk-scale experiment harness for low-bit adapter training: synthetic
//! tasks, QAT and PTQ runs, bit-width / budget / noise sweeps, loss
//! landscape scans, and weight histograms. The `bitadapt` binary exposes
//! each piece as a subcommand; everything is a library function first.

pub mod config;
pub mod hist;
pub mod io;
pub mod landscape;
pub mod ptq;
pub mod report;
pub mod sweep;
pub mod task;
pub mod train;

pub use config::RunConfig;
pub use report::RunReport;
