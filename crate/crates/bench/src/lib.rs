//! Criterion benchmarks for the flowis kernels; see the `benches` directory.
