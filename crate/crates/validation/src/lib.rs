//! End-to-end acceptance checks for `gemirec` live in `tests/acceptance.rs`.
//!
//! They sit in their own package so that cargo runs them after the unit and
//! integration tests of the other workspace members.
