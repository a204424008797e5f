//! Home of the `acceptance` test target; run it with
//! `cargo test -p progress-validation --test acceptance -- --nocapture`.
