//! Dataset preparation, training, enhancement and evaluation around the
//! core engine, plus the text formats (config, manifest) that tie a run
//! together on disk.

pub mod config;
pub mod manifest;
pub mod pipeline;
