//! Desk-scale laboratory for reinforcement learning with verifiable rewards.
//!
//! The crate implements a complete, seeded RLVR pipeline on synthetic
//! verifiable math tasks:
//!
//! - [`tasks`] — synthetic problem families with exact oracles and a
//!   difficulty knob.
//! - [`policy`] — a differentiable autoregressive categorical policy with
//!   analytic gradients and budgeted sampling.
//! - [`verifier`] — boxed-answer extraction and binary exact-match rewards.
//! - [`grpo`] — group-relative advantages, the clipped surrogate objective,
//!   its analytic gradient, and the AdamW-style optimizer step.
//! - [`curation`] — rollout-based difficulty profiling, stage-1/stage-2
//!   filtering rules, and curriculum ordering.
//! - [`infotheory`] — exact-enumeration entropy diagnostics for the
//!   answer-uncertainty monotonicity identity.
//! - [`metrics`] — pass@1/pass@k, length statistics, efficiency-adjusted
//!   accuracy, and budget sweeps.
//! - [`harness`] — the training loop, JSONL telemetry, and the
//!   easy-retention vs easy-filtered comparison experiment.
//!
//! Everything is deterministic given a seed: rollout generation, dataset
//! construction, profiling, and training derive per-unit rng streams from
//! the top-level seed, so independent workers produce identical results
//! regardless of scheduling.

pub mod curation;
pub mod grpo;
pub mod harness;
pub mod infotheory;
pub mod metrics;
pub mod policy;
pub mod seeding;
pub mod tasks;
pub mod verifier;

pub use curation::{DifficultyProfile, RhoHistogram};
pub use grpo::{ClipConfig, OptState, RolloutGroup};
pub use harness::{ComparisonSummary, StepRecord, TrainConfig};
pub use infotheory::EntropyTrace;
pub use metrics::{EaaContext, EvalReport};
pub use policy::{FeatureSpec, PolicyParams, Rollout};
pub use tasks::{Family, Problem, Vocabulary};
pub use verifier::{FailureKind, Verdict};
