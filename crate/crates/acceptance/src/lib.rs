//! Acceptance runs live in `tests/acceptance`; this crate has no library code.
