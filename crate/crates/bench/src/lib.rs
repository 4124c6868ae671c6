//! Benchmarks for goalqvi live in `benches/`.
