//! Criterion benchmarks for the tep kernels; see `benches/`.
