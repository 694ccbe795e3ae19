//! Evaluation metrics: pass rates, length statistics, truncation ratio, and
//! efficiency-adjusted accuracy.
//!
//! Efficiency-adjusted accuracy (EAA) discounts accuracy exponentially by
//! output length rescaled to the unit interval over a cohort:
//! `eaa = a * exp(-gamma * (L - L_min) / (L_max - L_min))`. It equals `a` at
//! the cohort minimum length and `a * e^-gamma` at the maximum, and the
//! normalization range is conventionally the per-benchmark min/max of the
//! cohort's mean lengths.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::policy::{sample_rollout, step_entropies, PolicyError, PolicyParams};
use crate::seeding::{fnv1a64, rng_from};
use crate::tasks::{Problem, TaskError, Vocabulary};
use crate::verifier;

/// Default penalty exponent for efficiency-adjusted accuracy.
pub const DEFAULT_GAMMA: f64 = 3.0;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("degenerate length range: L_min == L_max ({0})")]
    DegenerateRange(f64),
    #[error("cohort needs at least 2 mean lengths, got {0}")]
    CohortTooSmall(usize),
    #[error("gamma must be positive, got {0}")]
    BadGamma(f64),
    #[error("need n_samples >= k >= 1 (k = {k}, n_samples = {n})")]
    BadSampleCounts { k: usize, n: usize },
    #[error("empty problem set")]
    EmptyProblemSet,
    #[error("budgets must be strictly increasing")]
    BudgetsNotIncreasing,
    #[error("task error: {0}")]
    Task(#[from] TaskError),
    #[error("policy error: {0}")]
    Policy(#[from] PolicyError),
}

/// Length-normalization range and penalty exponent for EAA.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EaaContext {
    pub l_min: f64,
    pub l_max: f64,
    pub gamma: f64,
}

impl EaaContext {
    pub fn new(l_min: f64, l_max: f64, gamma: f64) -> Result<Self, MetricsError> {
        if l_max <= l_min {
            return Err(MetricsError::DegenerateRange(l_min));
        }
        if gamma <= 0.0 {
            return Err(MetricsError::BadGamma(gamma));
        }
        Ok(Self { l_min, l_max, gamma })
    }

    /// Builds the normalization range from a cohort of per-model mean
    /// lengths on one benchmark, with the default penalty exponent.
    pub fn from_cohort(lengths: &[f64]) -> Result<Self, MetricsError> {
        Self::from_cohort_with_gamma(lengths, DEFAULT_GAMMA)
    }

    pub fn from_cohort_with_gamma(lengths: &[f64], gamma: f64) -> Result<Self, MetricsError> {
        if lengths.len() < 2 {
            return Err(MetricsError::CohortTooSmall(lengths.len()));
        }
        let l_min = lengths.iter().cloned().fold(f64::INFINITY, f64::min);
        let l_max = lengths.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        Self::new(l_min, l_max, gamma)
    }
}

/// Efficiency-adjusted accuracy. Lengths outside the normalization range
/// clamp to the boundary rather than extrapolate.
pub fn eaa(accuracy: f64, mean_length: f64, ctx: &EaaContext) -> f64 {
    let l = mean_length.clamp(ctx.l_min, ctx.l_max);
    let normalized = (l - ctx.l_min) / (ctx.l_max - ctx.l_min);
    accuracy * (-ctx.gamma * normalized).exp()
}

/// Unbiased pass@k estimator from `n` samples with `c` successes:
/// `1 - C(n-c, k) / C(n, k)`, computed in product form.
pub fn pass_at_k(n: usize, c: usize, k: usize) -> f64 {
    if n.saturating_sub(c) < k {
        return 1.0;
    }
    1.0 - (1..=k).fold(1.0f64, |acc, i| acc * (n - c - k + i) as f64 / (n - k + i) as f64)
}

/// Aggregate evaluation of a policy on a problem set at one budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub benchmark: String,
    /// Mean reward of the first sample per problem.
    pub pass1: f64,
    /// Mean unbiased pass@k over problems.
    pub pass_k: f64,
    pub k: usize,
    pub n_samples: usize,
    pub mean_length: f64,
    pub min_length: usize,
    pub max_length: usize,
    /// Fraction of rollouts that hit the budget before EOS.
    pub truncation_ratio: f64,
    /// Per-token entropy in nats, averaged over sampled trajectories.
    pub mean_entropy: f64,
    pub budget: usize,
}

/// Samples `n_samples` completions per problem at the budget, scores them,
/// and aggregates pass rates and length/entropy/truncation statistics.
///
/// Seed derivation is budget-independent, so evaluations at different
/// budgets share trajectories prefix-wise and reports are comparable.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    params: &PolicyParams,
    problems: &[Problem],
    vocab: &Vocabulary,
    budget: usize,
    k: usize,
    n_samples: usize,
    seed: u64,
    benchmark: &str,
) -> Result<EvalReport, MetricsError> {
    if problems.is_empty() {
        return Err(MetricsError::EmptyProblemSet);
    }
    if k < 1 || n_samples < k {
        return Err(MetricsError::BadSampleCounts { k, n: n_samples });
    }
    let mut first_rewards = 0.0f64;
    let mut pass_k_sum = 0.0f64;
    let mut total_len = 0usize;
    let mut min_length = usize::MAX;
    let mut max_length = 0usize;
    let mut truncated = 0usize;
    let mut entropy_sum = 0.0f64;
    let mut n_rollouts = 0usize;
    for problem in problems {
        let prompt = problem.prompt_tokens(vocab)?;
        let id_hash = fnv1a64(problem.id.as_bytes());
        let mut successes = 0usize;
        for s in 0..n_samples {
            let mut rng = rng_from(&[seed, id_hash, s as u64]);
            let rollout =
                sample_rollout(params, &problem.id, &prompt, vocab.eos(), budget, &mut rng)?;
            let verdict = verifier::score(&rollout, problem, vocab);
            if verdict.reward == 1.0 {
                successes += 1;
            }
            if s == 0 {
                first_rewards += verdict.reward;
            }
            let len = rollout.length();
            total_len += len;
            min_length = min_length.min(len);
            max_length = max_length.max(len);
            if rollout.truncated {
                truncated += 1;
            }
            let h = step_entropies(params, &prompt, &rollout.tokens)?;
            entropy_sum += h.iter().sum::<f64>() / h.len().max(1) as f64;
            n_rollouts += 1;
        }
        pass_k_sum += pass_at_k(n_samples, successes, k);
    }
    let n_problems = problems.len() as f64;
    Ok(EvalReport {
        benchmark: benchmark.to_string(),
        pass1: first_rewards / n_problems,
        pass_k: pass_k_sum / n_problems,
        k,
        n_samples,
        mean_length: total_len as f64 / n_rollouts as f64,
        min_length,
        max_length,
        truncation_ratio: truncated as f64 / n_rollouts as f64,
        mean_entropy: entropy_sum / n_rollouts as f64,
        budget,
    })
}

/// Evaluates at each budget with shared seeds, one report per budget.
#[allow(clippy::too_many_arguments)]
pub fn budget_sweep(
    params: &PolicyParams,
    problems: &[Problem],
    vocab: &Vocabulary,
    budgets: &[usize],
    k: usize,
    n_samples: usize,
    seed: u64,
    benchmark: &str,
) -> Result<Vec<EvalReport>, MetricsError> {
    if !budgets.windows(2).all(|w| w[0] < w[1]) || budgets.is_empty() {
        return Err(MetricsError::BudgetsNotIncreasing);
    }
    budgets
        .iter()
        .map(|&b| {
            evaluate(params, problems, vocab, b, k, n_samples, seed, &format!("{benchmark}@{b}"))
        })
        .collect()
}

/// One row of an EAA table: a model's accuracy and mean length on a
/// benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EaaRow {
    pub model: String,
    pub benchmark: String,
    pub accuracy: f64,
    pub mean_length: f64,
}

/// An [`EaaRow`] with its efficiency-adjusted accuracy appended.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EaaScoredRow {
    pub model: String,
    pub benchmark: String,
    pub accuracy: f64,
    pub mean_length: f64,
    pub eaa: f64,
}

/// Scores a table of (model, benchmark, accuracy, length) rows: for each
/// benchmark the normalization range is that benchmark's cohort min/max of
/// mean lengths. Row order is preserved.
pub fn append_eaa(rows: &[EaaRow], gamma: f64) -> Result<Vec<EaaScoredRow>, MetricsError> {
    use std::collections::BTreeMap;
    let mut cohorts: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for row in rows {
        cohorts.entry(&row.benchmark).or_default().push(row.mean_length);
    }
    let mut contexts: BTreeMap<&str, EaaContext> = BTreeMap::new();
    for (bench, lengths) in &cohorts {
        contexts.insert(bench, EaaContext::from_cohort_with_gamma(lengths, gamma)?);
    }
    Ok(rows
        .iter()
        .map(|row| {
            let ctx = &contexts[row.benchmark.as_str()];
            EaaScoredRow {
                model: row.model.clone(),
                benchmark: row.benchmark.clone(),
                accuracy: row.accuracy,
                mean_length: row.mean_length,
                eaa: eaa(row.accuracy, row.mean_length, ctx),
            }
        })
        .collect())
}
