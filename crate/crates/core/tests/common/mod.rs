//! Oracles shared by the per-module suites and the acceptance run.
#![allow(dead_code)]

pub mod grad;
pub mod oracles;
