//! tinygrpo: desk-scale GRPO reinforcement learning for chain-of-thought NLI.
//!
//! The crate trains a tiny decoder-only transformer with LoRA adapters
//! (optionally over a simulated int4-quantized frozen base) using the GRPO
//! objective — clipped importance ratios, group-mean advantages, and a KL
//! penalty against a frozen reference policy — on a synthetic natural
//! language inference task, and ships the evaluation harness that produces
//! accuracy tables, temperature sweeps, and confusion-matrix diffs.

pub mod autodiff;
pub mod data;
pub mod eval;
pub mod grpo;
mod kernels;
pub mod policy;
pub mod reward;
pub mod rng;
pub mod rollout;
pub mod trainer;

pub use autodiff::{AutodiffError, Graph, Tensor, TensorId};
pub use data::{Label, NliExample, PromptTemplate, SyntheticTaskConfig};
pub use grpo::{AdvantageSet, GrpoConfig};
pub use policy::{AdapterState, Policy, PolicySpec, Tokenizer};
pub use reward::{ParsedCompletion, RewardConfig};
pub use rollout::{Completer, DecodeMode, DecodingConfig, RolloutGroup};
pub use trainer::TrainConfig;
