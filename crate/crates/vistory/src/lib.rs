//! File formats, model checkpoints, configuration files and the `vistory`
//! command-line tool around `vistory-core`.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod formats;
pub mod pipeline;
