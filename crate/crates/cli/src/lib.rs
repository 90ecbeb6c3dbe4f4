//! Benchmark, self-consistency and bound-verification harness over the
//! estimator library.

pub mod config;
pub mod emit;
pub mod runner;
pub mod selfcheck;
pub mod trainer;
pub mod verify;
