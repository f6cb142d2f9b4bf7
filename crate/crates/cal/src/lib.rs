//! File formats, configuration and orchestration around `cal_core`: the
//! library behind the `cal` command-line tool.

pub mod artifacts;
pub mod bundle;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod fsio;
pub mod jobs;
pub mod pipeline;
pub mod record;
