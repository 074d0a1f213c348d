//! Reproduction checks live in `tests/acceptance.rs`; run them with
//! `cargo test -p phonon-validation --test acceptance`.
