//! Criterion benchmarks for `gridcert-core`; see `benches/`.
