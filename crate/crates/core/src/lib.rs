//! Reinforcement-learned teachers at desk scale.
//!
//! A teacher language model is given a question *and* its solution and is
//! trained with GRPO to write explanations that a student model finds both
//! predictive of the solution and natural to continue from the question
//! alone. The explanations are then distilled into fresh students.
//!
//! Modules:
//! - [`lm`]: the transformer, sampling, losses and optimizer.
//! - [`format`]: tokenizer, prompt templates, completion parsing.
//! - [`reward`]: dense teacher rewards and correctness rewards.
//! - [`rl`]: GRPO / RLOO training loops.
//! - [`sft`]: supervised warmup and distillation.
//! - [`tasks`]: synthetic countdown and arithmetic-chain tasks.
//! - [`pipeline`]: end-to-end experiments and run bookkeeping.

pub mod error;
pub mod format;
pub mod lm;
pub mod pipeline;
pub mod reward;
pub mod rl;
pub mod sft;
pub mod tasks;

pub use error::{Error, Result};
