//! Checks shared by the test suites and the acceptance report.
#![allow(dead_code)]

pub mod grad;
pub mod props;
