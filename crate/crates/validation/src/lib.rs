//! Holds the `acceptance` test target, which trains the shipped experiment
//! configs end to end and prints one pass/fail line per criterion.
//!
//! It lives in its own package so that a failing criterion does not stop the
//! CLI's own integration tests from running under `cargo test --workspace`.
