//! Exact-enumeration entropy diagnostics.
//!
//! For tiny vocabularies and short horizons the full law of the rollout
//! process is enumerable, so the conditional entropy of the final answer
//! given a length-`t` prefix can be computed exactly. Conditioning on a
//! longer prefix can never increase that entropy; the trace records the
//! entropy profile and the per-step information gains so the inequality can
//! be checked as an identity rather than a tendency.
//!
//! No sampling estimators are used here: the claim is exact and sampling
//! noise would blur it.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::policy::{self, PolicyError, PolicyParams};
use crate::tasks::{TokenId, Vocabulary};
use crate::verifier;

/// Enumeration ceiling: `V^horizon` may not exceed this.
pub const ENUMERATION_BUDGET: f64 = 1e6;

#[derive(Debug, Error)]
pub enum InfoError {
    #[error("enumeration budget exceeded: {vocab}^{horizon} > {budget}")]
    EnumerationBudget { vocab: usize, horizon: usize, budget: f64 },
    #[error("horizon must be at least 1")]
    ZeroHorizon,
    #[error("policy error: {0}")]
    Policy(#[from] PolicyError),
}

/// Exact conditional-entropy profile of the final answer along the prefix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyTrace {
    pub query_id: String,
    /// `H(Y | X, Z_t)` in nats for `t = 0..=horizon`.
    pub conditional_entropies: Vec<f64>,
    /// `I(Y; Y_{t+1} | X, Z_t) = H_t - H_{t+1}` for `t = 0..horizon-1`.
    pub information_gains: Vec<f64>,
}

/// Result of checking a trace for entropy monotonicity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MonotonicityReport {
    pub ok: bool,
    /// Largest observed increase `H_{t+1} - H_t`, floored at zero.
    pub max_violation: f64,
}

/// Checks `H_{t+1} <= H_t` up to a 1e-12 slack and reports the largest
/// violation.
pub fn monotonicity_check(entropies: &[f64]) -> MonotonicityReport {
    let mut max_violation = 0.0f64;
    for pair in entropies.windows(2) {
        max_violation = max_violation.max(pair[1] - pair[0]);
    }
    let max_violation = max_violation.max(0.0);
    MonotonicityReport { ok: max_violation <= 1e-12, max_violation }
}

/// Enumerates every sequence the policy can emit within `horizon` tokens
/// (stopping early at EOS) and computes the exact joint law of
/// (prefix, final answer). The answer is `answer_map(full sequence)`, a
/// deterministic function of the complete response; `None` acts as the
/// designated no-answer symbol.
pub fn exact_entropy_trace(
    params: &PolicyParams,
    query_id: &str,
    prompt: &[TokenId],
    eos: TokenId,
    horizon: usize,
    answer_map: &dyn Fn(&[TokenId]) -> Option<String>,
) -> Result<EntropyTrace, InfoError> {
    if horizon == 0 {
        return Err(InfoError::ZeroHorizon);
    }
    let v = params.spec.vocab_size;
    if (v as f64).powi(horizon as i32) > ENUMERATION_BUDGET {
        return Err(InfoError::EnumerationBudget {
            vocab: v,
            horizon,
            budget: ENUMERATION_BUDGET,
        });
    }

    // Depth-first enumeration of complete sequences with their exact
    // probabilities. A sequence completes at EOS or at the horizon.
    let mut complete: Vec<(Vec<TokenId>, f64)> = Vec::new();
    let mut stack: Vec<(Vec<TokenId>, f64)> = vec![(Vec::new(), 1.0)];
    while let Some((prefix, prob)) = stack.pop() {
        let dist = policy::next_token_distribution(params, prompt, &prefix)?;
        for (tok, &p) in dist.iter().enumerate() {
            if p <= 0.0 {
                continue;
            }
            let mut seq = prefix.clone();
            seq.push(tok);
            let seq_prob = prob * p;
            if tok == eos || seq.len() == horizon {
                complete.push((seq, seq_prob));
            } else {
                stack.push((seq, seq_prob));
            }
        }
    }

    // Answers, computed once per complete sequence. None is its own symbol.
    let answers: Vec<Option<String>> =
        complete.iter().map(|(seq, _)| answer_map(seq)).collect();

    // H(Y | Z_t) = sum_z P(z) H(Y | z). A sequence shorter than t is its own
    // prefix (the process has halted), which never collides with a live
    // prefix of the same length because live prefixes never end in EOS.
    // Ordered maps keep the summation order, and hence the low-order float
    // bits, identical across runs.
    let mut conditional_entropies = Vec::with_capacity(horizon + 1);
    for t in 0..=horizon {
        let mut by_prefix: BTreeMap<&[TokenId], BTreeMap<&Option<String>, f64>> = BTreeMap::new();
        for ((seq, prob), answer) in complete.iter().zip(&answers) {
            let cut = t.min(seq.len());
            *by_prefix.entry(&seq[..cut]).or_default().entry(answer).or_insert(0.0) += prob;
        }
        let mut h = 0.0;
        for answer_mass in by_prefix.values() {
            let z_prob: f64 = answer_mass.values().sum();
            if z_prob <= 0.0 {
                continue;
            }
            let mut h_given_z = 0.0;
            for &mass in answer_mass.values() {
                if mass > 0.0 {
                    let p = mass / z_prob;
                    h_given_z -= p * p.ln();
                }
            }
            h += z_prob * h_given_z;
        }
        conditional_entropies.push(h);
    }

    let information_gains = conditional_entropies
        .windows(2)
        .map(|pair| pair[0] - pair[1])
        .collect();

    Ok(EntropyTrace {
        query_id: query_id.to_string(),
        conditional_entropies,
        information_gains,
    })
}

/// The default answer map: contents of the last balanced boxed span, else
/// the no-answer symbol.
pub fn boxed_answer_map(vocab: &Vocabulary) -> impl Fn(&[TokenId]) -> Option<String> + '_ {
    move |tokens| verifier::extract_boxed_tokens(tokens, vocab)
}
