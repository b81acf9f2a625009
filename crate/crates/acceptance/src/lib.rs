//! Acceptance criteria for `fedlora`; see `tests/acceptance.rs`.
