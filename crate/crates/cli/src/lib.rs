//! File formats, parallel orchestration and the command-line front end for
//! `vfmodel-core`.

pub mod commands;
pub mod config;
pub mod error;
pub mod io;
pub mod pipeline;
