//! File formats, command-line driver and simulation harness for the
//! clustered random forest engine in `crf_core`.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bench;
pub mod cli;
pub mod config;
pub mod io;
pub mod model;
pub mod simulation;
