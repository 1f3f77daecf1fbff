//! Criterion benchmarks for chunkrl live under `benches/`.
