//! Checks shared by the unit-level suites and the acceptance runner.
#![allow(dead_code)]

pub mod grad;
pub mod loss;
pub mod oracle;
