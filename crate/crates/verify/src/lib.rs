//! Holds the `acceptance` test target, which checks the whole workspace
//! against its acceptance criteria. See `tests/acceptance.rs`.
