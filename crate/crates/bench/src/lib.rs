//! Criterion benchmarks for the `crossmimic` kernels; see `benches/`.
