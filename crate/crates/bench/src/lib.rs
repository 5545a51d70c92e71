//! Criterion benchmarks for `zonegate-core`; run with `cargo bench -p zonegate-bench`.
