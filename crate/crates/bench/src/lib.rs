//! Criterion benchmarks for the tray pipeline live in `benches/`.
