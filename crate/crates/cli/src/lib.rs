//! Library surface of the pipeline CLI, exposed so integration tests can
//! drive runs in-process with an instrumented mock backend.

pub mod config;
pub mod evalcmd;
pub mod pipeline;
pub mod state;
