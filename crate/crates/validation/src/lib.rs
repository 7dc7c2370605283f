//! Holds the workspace acceptance run; see `tests/acceptance.rs`.
