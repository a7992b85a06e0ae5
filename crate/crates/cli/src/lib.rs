//! Command-line front end for the `fconn` pipeline: cohort simulation,
//! connectivity estimation, shrinkage, reliability scoring, and the
//! full scan-length sweep.

pub mod commands;
pub mod config;
pub mod pipeline;
pub mod report;
