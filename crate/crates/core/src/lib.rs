//! Functional-connectivity estimation with empirical Bayes shrinkage and
//! test-retest reliability assessment.
//!
//! The pipeline moves through four stages:
//!
//! 1. [`timeseries`]: load per-subject multivariate time series, truncate
//!    to a scan length, split into odd/even or first/second halves, and
//!    optionally project onto group spatial maps (dual regression).
//! 2. [`connectivity`]: Pearson correlation over region pairs, flattened
//!    to canonical edge vectors.
//! 3. [`shrinkage`]: decompose cross-subject variance into trait, state,
//!    and sampling parts (from two visits, or from one visit via
//!    subsampling), then blend each subject toward the group mean with a
//!    per-edge weight.
//! 4. [`reliability`]: score estimates against a reference with absolute
//!    percent error and aggregate medians at edge, seed, and omnibus
//!    resolution.
//!
//! [`simulator`] generates synthetic cohorts with known ground truth for
//! validating the estimators, either as edge estimates drawn straight
//! from the additive model or as Gaussian time series for end-to-end
//! runs. All randomness is seed-derived and parallelism-independent.

pub mod connectivity;
pub mod error;
pub mod reliability;
pub mod shrinkage;
pub mod simulator;
pub mod timeseries;

pub use error::{Error, Result};
