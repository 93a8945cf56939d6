//! Benchmark-only crate; see `benches/components.rs`.
