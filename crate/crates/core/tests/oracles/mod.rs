//! Oracle checks shared by the per-module suites and the acceptance run.

#![allow(dead_code)]

pub mod kernels;
pub mod stats;
