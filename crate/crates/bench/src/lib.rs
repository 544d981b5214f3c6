//! Criterion benchmarks for the dissflow kernels; see `benches/`.
