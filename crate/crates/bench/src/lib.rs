//! Criterion benchmarks for the entropy, calibration, budget and replay kernels.
//! Run with `cargo bench -p entgate-bench`.
