//! Acceptance suite: one test per criterion, sharing one trained pipeline.

mod common;

#[test]
fn placeholder() {
    assert!(common::fixture_config().validate().is_ok());
}
