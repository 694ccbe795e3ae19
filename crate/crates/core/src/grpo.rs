//! Group-relative policy optimization.
//!
//! Rollout groups are standardized against their own reward mean and
//! population standard deviation; a group with uniform rewards has exactly
//! zero advantages and contributes nothing to the objective or its gradient.
//! The surrogate is the clipped token-level importance-weighted objective
//! with per-sequence `1/|y|` and per-group `1/G` normalization, maximized by
//! an AdamW-style ascent step with linear learning-rate warmup.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::policy::{self, PolicyError, PolicyParams, Rollout};
use crate::tasks::TokenId;

#[derive(Debug, Error)]
pub enum GrpoError {
    #[error("group must contain at least 2 rollouts (got {0})")]
    GroupTooSmall(usize),
    #[error("rollout {0} has no reward; score it before forming groups")]
    UnscoredRollout(String),
    #[error("rollout {0} in group for {1}")]
    MixedGroup(String, String),
    #[error("empty batch of groups")]
    EmptyBatch,
    #[error("invalid clip thresholds: need 0 < low < 1 < high, got ({low}, {high})")]
    InvalidClip { low: f64, high: f64 },
    #[error("old logprobs length {old} does not match token count {new}")]
    LengthMismatch { old: usize, new: usize },
    #[error("non-finite gradient entry at index {0}")]
    NonFiniteGradient(usize),
    #[error("policy error: {0}")]
    Policy(#[from] PolicyError),
}

/// Asymmetric clipping thresholds for the importance ratio.
///
/// Stored as two independent bounds rather than a single epsilon because the
/// reference configuration (0.8, 1.28) is not symmetric around 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipConfig {
    pub low: f64,
    pub high: f64,
}

impl Default for ClipConfig {
    fn default() -> Self {
        Self { low: 0.8, high: 1.28 }
    }
}

impl ClipConfig {
    pub fn new(low: f64, high: f64) -> Result<Self, GrpoError> {
        let cfg = Self { low, high };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), GrpoError> {
        if !(self.low > 0.0 && self.low < 1.0 && self.high > 1.0) {
            return Err(GrpoError::InvalidClip { low: self.low, high: self.high });
        }
        Ok(())
    }
}

/// Group-relative advantages: `(r_i - mean) / std` with the population
/// standard deviation. A zero-variance group returns exact zeros with no
/// epsilon smoothing, so uniform-reward groups carry no signal.
pub fn group_advantages(rewards: &[f64]) -> Result<Vec<f64>, GrpoError> {
    if rewards.len() < 2 {
        return Err(GrpoError::GroupTooSmall(rewards.len()));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if std == 0.0 {
        return Ok(vec![0.0; rewards.len()]);
    }
    Ok(rewards.iter().map(|r| (r - mean) / std).collect())
}

/// `G` rollouts for one problem plus their group-relative advantages.
#[derive(Debug, Clone)]
pub struct RolloutGroup {
    pub problem_id: String,
    pub rollouts: Vec<Rollout>,
    pub advantages: Vec<f64>,
}

impl RolloutGroup {
    /// Builds a group from scored rollouts, computing advantages.
    pub fn new(rollouts: Vec<Rollout>) -> Result<Self, GrpoError> {
        if rollouts.len() < 2 {
            return Err(GrpoError::GroupTooSmall(rollouts.len()));
        }
        let problem_id = rollouts[0].problem_id.clone();
        let mut rewards = Vec::with_capacity(rollouts.len());
        for r in &rollouts {
            if r.problem_id != problem_id {
                return Err(GrpoError::MixedGroup(r.problem_id.clone(), problem_id));
            }
            rewards.push(r.reward.ok_or_else(|| GrpoError::UnscoredRollout(r.problem_id.clone()))?);
        }
        let advantages = group_advantages(&rewards)?;
        Ok(Self { problem_id, rollouts, advantages })
    }

    /// True when every rollout carries the same reward (vanishing advantage).
    pub fn is_degenerate(&self) -> bool {
        self.advantages.iter().all(|&a| a == 0.0)
    }
}

/// Per-token importance weights `w_t = exp(ln pi_new - ln pi_old)`.
pub fn importance_weights(
    new_params: &PolicyParams,
    old_logprobs: &[f64],
    prompt: &[TokenId],
    tokens: &[TokenId],
) -> Result<Vec<f64>, GrpoError> {
    if old_logprobs.len() != tokens.len() {
        return Err(GrpoError::LengthMismatch { old: old_logprobs.len(), new: tokens.len() });
    }
    let new_logprobs = policy::step_logprobs(new_params, prompt, tokens)?;
    Ok(new_logprobs.iter().zip(old_logprobs).map(|(n, o)| (n - o).exp()).collect())
}

/// The per-token clipped objective `min(w A, clip(w, low, high) A)`.
pub fn clipped_token_objective(w: f64, advantage: f64, clip: &ClipConfig) -> f64 {
    let clipped = w.clamp(clip.low, clip.high);
    (w * advantage).min(clipped * advantage)
}

/// Whether a token in the given regime passes gradient. At a clip boundary
/// the clipped branch is selected and contributes zero gradient.
fn gradient_flows(w: f64, advantage: f64, clip: &ClipConfig) -> bool {
    (advantage > 0.0 && w < clip.high) || (advantage < 0.0 && w > clip.low)
}

/// Value of the surrogate objective over a batch of groups:
/// mean over groups of `(1/G) sum_i (1/|y_i|) sum_t min(...)`.
pub fn surrogate_value(
    groups: &[RolloutGroup],
    new_params: &PolicyParams,
    prompts: &dyn Fn(&str) -> Vec<TokenId>,
    clip: &ClipConfig,
) -> Result<f64, GrpoError> {
    clip.validate()?;
    if groups.is_empty() {
        return Err(GrpoError::EmptyBatch);
    }
    let mut total = 0.0;
    for group in groups {
        if group.is_degenerate() {
            continue; // contributes exactly zero
        }
        let prompt = prompts(&group.problem_id);
        let mut group_sum = 0.0;
        for (rollout, &adv) in group.rollouts.iter().zip(&group.advantages) {
            if adv == 0.0 {
                continue;
            }
            let weights =
                importance_weights(new_params, &rollout.behavior_logprobs, &prompt, &rollout.tokens)?;
            let seq: f64 = weights.iter().map(|&w| clipped_token_objective(w, adv, clip)).sum();
            group_sum += seq / rollout.tokens.len() as f64;
        }
        total += group_sum / group.rollouts.len() as f64;
    }
    Ok(total / groups.len() as f64)
}

/// Analytic gradient of [`surrogate_value`] with respect to theta.
///
/// Tokens where the min selects the clipped branch contribute exactly zero;
/// groups with uniform rewards are skipped entirely, so their contribution
/// is zero bit-for-bit.
pub fn surrogate_gradient(
    groups: &[RolloutGroup],
    new_params: &PolicyParams,
    prompts: &dyn Fn(&str) -> Vec<TokenId>,
    clip: &ClipConfig,
) -> Result<Vec<f64>, GrpoError> {
    clip.validate()?;
    if groups.is_empty() {
        return Err(GrpoError::EmptyBatch);
    }
    new_params.validate()?;
    let v = new_params.spec.vocab_size;
    let mut grad = vec![0.0f64; new_params.theta.len()];
    let batch_norm = 1.0 / groups.len() as f64;
    for group in groups {
        if group.is_degenerate() {
            continue;
        }
        let prompt = prompts(&group.problem_id);
        let group_norm = batch_norm / group.rollouts.len() as f64;
        for (rollout, &adv) in group.rollouts.iter().zip(&group.advantages) {
            if adv == 0.0 {
                continue;
            }
            let seq_norm = group_norm / rollout.tokens.len() as f64;
            for t in 0..rollout.tokens.len() {
                let prefix = &rollout.tokens[..t];
                let probs = policy::next_token_distribution(new_params, &prompt, prefix)?;
                let token = rollout.tokens[t];
                let new_lp = probs[token].ln();
                let w = (new_lp - rollout.behavior_logprobs[t]).exp();
                if !gradient_flows(w, adv, clip) {
                    continue;
                }
                // d/dtheta (w A) = w A * d/dtheta ln pi(y_t | ctx)
                let coef = seq_norm * adv * w;
                for f in policy_active_features(new_params, &prompt, prefix) {
                    let row = &mut grad[f * v..(f + 1) * v];
                    for (g, p) in row.iter_mut().zip(&probs) {
                        *g -= coef * p;
                    }
                    row[token] += coef;
                }
            }
        }
    }
    Ok(grad)
}

// Re-derive the active feature set the same way the policy does; kept here
// so the hot loop avoids building intermediate gradient vectors per token.
fn policy_active_features(
    params: &PolicyParams,
    prompt: &[TokenId],
    prefix: &[TokenId],
) -> Vec<usize> {
    let v = params.spec.vocab_size;
    let mut feats = Vec::with_capacity(params.spec.window + 1);
    for (slot, &tok) in
        prefix.iter().rev().chain(prompt.iter().rev()).take(params.spec.window).enumerate()
    {
        feats.push(slot * v + tok);
    }
    feats.push(params.spec.window * v);
    feats
}

/// AdamW-style optimizer state for ascent on the surrogate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    /// Number of updates applied so far.
    pub step: u64,
    pub base_lr: f64,
    pub weight_decay: f64,
    /// Fraction of `total_steps` spent in linear warmup.
    pub warmup_fraction: f64,
    pub total_steps: u64,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl OptState {
    pub fn new(
        param_len: usize,
        base_lr: f64,
        weight_decay: f64,
        warmup_fraction: f64,
        total_steps: u64,
    ) -> Self {
        Self {
            first_moment: vec![0.0; param_len],
            second_moment: vec![0.0; param_len],
            step: 0,
            base_lr,
            weight_decay,
            warmup_fraction,
            total_steps,
        }
    }

    /// Steps spent ramping the learning rate: `ceil(fraction * total)`.
    pub fn warmup_steps(&self) -> u64 {
        (self.warmup_fraction * self.total_steps as f64).ceil() as u64
    }

    /// Effective learning rate at update index `t` (1-based):
    /// `base_lr * min(1, t / warmup_steps)`.
    pub fn effective_lr_at(&self, t: u64) -> f64 {
        let warmup = self.warmup_steps();
        if warmup == 0 {
            return self.base_lr;
        }
        self.base_lr * 1.0f64.min(t as f64 / warmup as f64)
    }
}

/// One decoupled-weight-decay adaptive-moment ascent step.
///
/// Returns the updated parameters and state; the inputs are untouched so
/// samplers holding the old snapshot are unaffected.
pub fn optimizer_step(
    state: &OptState,
    params: &PolicyParams,
    grad: &[f64],
) -> Result<(PolicyParams, OptState), GrpoError> {
    if grad.len() != params.theta.len() {
        return Err(GrpoError::LengthMismatch { old: grad.len(), new: params.theta.len() });
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(GrpoError::NonFiniteGradient(i));
    }
    let mut next = state.clone();
    next.step = state.step + 1;
    let t = next.step;
    let lr = next.effective_lr_at(t);
    let bias1 = 1.0 - ADAM_BETA1.powi(t as i32);
    let bias2 = 1.0 - ADAM_BETA2.powi(t as i32);
    let mut theta = params.theta.clone();
    for i in 0..theta.len() {
        next.first_moment[i] = ADAM_BETA1 * state.first_moment[i] + (1.0 - ADAM_BETA1) * grad[i];
        next.second_moment[i] =
            ADAM_BETA2 * state.second_moment[i] + (1.0 - ADAM_BETA2) * grad[i] * grad[i];
        let m_hat = next.first_moment[i] / bias1;
        let v_hat = next.second_moment[i] / bias2;
        theta[i] += lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        theta[i] -= lr * next.weight_decay * params.theta[i];
    }
    Ok((PolicyParams { spec: params.spec, theta }, next))
}
