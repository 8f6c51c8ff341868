//! Small, exact kernels for preference fine-tuning and RL from feedback:
//! a tabular bigram policy with enumerable completions, reward models,
//! advantage estimators, policy-gradient surrogates, direct alignment and
//! rejection sampling.
//!
//! Everything numeric is generic over [`scalar::Scalar`] (`f32` or `f64`);
//! the aliases below fix the common choices.

// `!(x > 0)` is used on purpose so NaN fails range checks.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod advantage;
pub mod data;
pub mod dpo;
pub mod environments;
pub mod error;
pub mod numerics;
pub mod policy;
pub mod policy_gradient;
pub mod reward_models;
pub mod rng;
pub mod scalar;
pub mod selection;
pub mod sft;

pub use error::{Error, Result};
pub use policy::{Token, TokenSequence, Vocab};
pub use rng::Seed;
pub use scalar::Scalar;

pub type BigramPolicyF64 = policy::BigramPolicy<f64>;
pub type BigramPolicyF32 = policy::BigramPolicy<f32>;
pub type RewardModelF64 = reward_models::LinearRewardModel<f64>;
pub type RewardModelF32 = reward_models::LinearRewardModel<f32>;
pub type TrajectoryBatchF64 = policy_gradient::TrajectoryBatch<f64>;
pub type TrajectoryBatchF32 = policy_gradient::TrajectoryBatch<f32>;
pub type DpoBatchF64 = dpo::DpoBatch<f64>;
pub type DpoBatchF32 = dpo::DpoBatch<f32>;
