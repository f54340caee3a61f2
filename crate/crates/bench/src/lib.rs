//! Criterion benchmarks for coarsening and the covariance-estimation step.
//!
//! Run with `cargo bench -p multifamm-bench`.
