//! End-to-end experiments: trace generation and selection, distillation,
//! cold-start RL, transfer, rank analysis, ablations, two-stage training,
//! and run bookkeeping.

mod analysis;
mod config;
mod experiments;
mod manifest;
mod report;
mod traces;

pub use analysis::*;
pub use config::RunConfig;
pub use experiments::*;
pub use manifest::*;
pub use report::*;
pub use traces::*;
