//! Data synthesis, training, checkpoints, metrics and the command-line entry points.

pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod evaluate;
pub mod gradcheck;
pub mod metrics;
pub mod pipeline;
pub mod synth;
pub mod train;
pub mod wav;
