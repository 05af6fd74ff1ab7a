//! Shared setup helpers for the benchmark suite live in the bench files themselves.
