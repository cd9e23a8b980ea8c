//! Experiment front end over the search library: configuration blocks, the
//! run-directory convention, study/search/report commands, and renderers.
//! `main.rs` is a thin argument-parsing shell over these modules so tests
//! can drive every command in-process.

pub mod commands;
pub mod config;
pub mod report;
pub mod rundir;
