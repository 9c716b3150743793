//! Benchmark and verification driver for `slimfer-core`.

pub mod bench;
pub mod config;
pub mod error;
pub mod report;
pub mod timing;
pub mod verify;

pub use error::BenchError;
pub use report::BenchReport;
