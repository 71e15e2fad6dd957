//! Criterion benchmarks for `flowsamp-core` live under `benches/`.
