//! Benchmark-only crate; the measurements live in `benches/fid_benches.rs`.
//!
//! Run with `cargo bench -p fid-bench`.
