//! Verifiable context rewards for grounded long-context reinforcement learning.
//!
//! The crate is organised around the pieces of a grounded-QA RL setup:
//!
//! - [`data`]: chunked documents, grounded examples, the tagged prompt/rollout format.
//! - [`reward`]: answer reward, set precision/recall, F-beta, the gated context reward.
//! - [`policy`]: the log-linear grounding distribution over chunk subsets.
//! - [`env`]: a synthetic sparse-answer environment driven by a monotone evidence set function.
//! - [`oracle`]: exact expectations and gradients by enumeration, plus the gradient
//!   decomposition reports.
//! - [`estimators`]: Monte-Carlo REINFORCE and GRPO gradient estimators.
//! - [`trainer`]: a toy gradient-ascent loop comparing answer-only, context-only and
//!   total rewards.
//! - [`datagen`]: the segmentation / clustering / generation / rejection-sampling pipeline.
//! - [`verify`]: randomized certification suites used by the `verify-props` command.

pub mod config;
pub mod data;
pub mod datagen;
pub mod env;
mod error;
pub mod estimators;
pub mod oracle;
pub mod policy;
pub mod reward;
pub mod rng;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
