//! Criterion benchmarks for edgebench live under `benches/`.
