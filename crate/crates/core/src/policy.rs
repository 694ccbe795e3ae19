//! Differentiable autoregressive categorical policy.
//!
//! The next-token distribution is a softmax over a linear map of a fixed
//! featurization of the recent context: concatenated one-hots of the last
//! `window` tokens of `prompt ++ prefix`, plus an always-on bias feature.
//! Log-likelihood gradients are analytic, so no autodiff backend is needed
//! and gradient checks can run at tight tolerances.
//!
//! Parameter layout: `theta[f * V + y]` is the contribution of feature `f`
//! to the logit of token `y`. Feature `slot * V + t` fires when the token at
//! relative position `-(slot + 1)` (slot 0 = most recent) is `t`; feature
//! `window * V` is the bias.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tasks::TokenId;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("theta length {actual} does not match feature spec (expected {expected})")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("token id {0} outside vocabulary of size {1}")]
    TokenOutOfRange(TokenId, usize),
    #[error("sequence must be non-empty")]
    EmptySequence,
    #[error("max_tokens must be at least 1")]
    ZeroBudget,
    #[error("non-finite parameter at index {0}")]
    NonFiniteParam(usize),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Shape of the context featurization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSpec {
    /// Number of trailing context tokens that are one-hot encoded.
    pub window: usize,
    /// Vocabulary size `V`.
    pub vocab_size: usize,
}

pub const DEFAULT_WINDOW: usize = 4;

impl FeatureSpec {
    pub fn new(window: usize, vocab_size: usize) -> Self {
        Self { window, vocab_size }
    }

    /// One-hot slots plus the bias feature.
    pub fn feature_dim(&self) -> usize {
        self.window * self.vocab_size + 1
    }

    pub fn param_len(&self) -> usize {
        self.feature_dim() * self.vocab_size
    }
}

/// Immutable parameter snapshot of the policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub spec: FeatureSpec,
    pub theta: Vec<f64>,
}

impl PolicyParams {
    /// All-zero parameters: the uniform policy.
    pub fn zeros(spec: FeatureSpec) -> Self {
        Self { spec, theta: vec![0.0; spec.param_len()] }
    }

    /// Gaussian-ish random parameters for tests and diagnostics.
    pub fn random<R: Rng>(spec: FeatureSpec, scale: f64, rng: &mut R) -> Self {
        let theta = (0..spec.param_len())
            .map(|_| {
                // Sum of uniforms; cheap, bounded, zero-mean.
                let u: f64 = rng.random::<f64>() + rng.random::<f64>() + rng.random::<f64>();
                (u - 1.5) * scale
            })
            .collect();
        Self { spec, theta }
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        if self.theta.len() != self.spec.param_len() {
            return Err(PolicyError::DimensionMismatch {
                expected: self.spec.param_len(),
                actual: self.theta.len(),
            });
        }
        if let Some(i) = self.theta.iter().position(|v| !v.is_finite()) {
            return Err(PolicyError::NonFiniteParam(i));
        }
        Ok(())
    }

    /// Adds `delta` to the bias-feature logit of `target`, shifting its
    /// probability everywhere.
    pub fn add_bias(&mut self, target: TokenId, delta: f64) {
        let v = self.spec.vocab_size;
        let bias_feature = self.spec.window * v;
        self.theta[bias_feature * v + target] += delta;
    }

    /// Adds `delta` to the logit of `target` whenever the token at relative
    /// position `-(slot + 1)` equals `context`. Slot 0 is the most recent
    /// token. Large deltas build table policies for tests and diagnostics.
    pub fn add_window_rule(&mut self, slot: usize, context: TokenId, target: TokenId, delta: f64) {
        assert!(slot < self.spec.window, "slot {slot} outside window {}", self.spec.window);
        let v = self.spec.vocab_size;
        let feature = slot * v + context;
        self.theta[feature * v + target] += delta;
    }
}

/// One sampled completion with behavior-policy log-probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub problem_id: String,
    pub tokens: Vec<TokenId>,
    /// Per-token `ln pi_old(y_t | x, y_{<t})` recorded at sampling time.
    pub behavior_logprobs: Vec<f64>,
    /// Hit the token budget before emitting EOS.
    pub truncated: bool,
    /// Left unset by the sampler; filled in by the verifier.
    pub reward: Option<f64>,
}

impl Rollout {
    /// Number of generated tokens `T`.
    pub fn length(&self) -> usize {
        self.tokens.len()
    }
}

/// Feature indices active for the current context (all one-hots plus bias).
/// All active features have value 1, so only the indices are returned.
/// Window slots that reach past the start of the sequence fire no feature.
fn active_features(spec: &FeatureSpec, prompt: &[TokenId], prefix: &[TokenId]) -> Vec<usize> {
    let v = spec.vocab_size;
    let mut feats = Vec::with_capacity(spec.window + 1);
    for (slot, &tok) in prefix.iter().rev().chain(prompt.iter().rev()).take(spec.window).enumerate()
    {
        feats.push(slot * v + tok);
    }
    feats.push(spec.window * v); // bias
    feats
}

fn check_tokens(spec: &FeatureSpec, tokens: &[TokenId]) -> Result<(), PolicyError> {
    for &t in tokens {
        if t >= spec.vocab_size {
            return Err(PolicyError::TokenOutOfRange(t, spec.vocab_size));
        }
    }
    Ok(())
}

/// Raw next-token logits for the context `prompt ++ prefix`.
pub fn token_logits(
    params: &PolicyParams,
    prompt: &[TokenId],
    prefix: &[TokenId],
) -> Result<Vec<f64>, PolicyError> {
    params.validate()?;
    check_tokens(&params.spec, prompt)?;
    check_tokens(&params.spec, prefix)?;
    let v = params.spec.vocab_size;
    let mut logits = vec![0.0f64; v];
    for f in active_features(&params.spec, prompt, prefix) {
        let row = &params.theta[f * v..(f + 1) * v];
        for (l, w) in logits.iter_mut().zip(row) {
            *l += w;
        }
    }
    Ok(logits)
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Next-token distribution at the given context.
pub fn next_token_distribution(
    params: &PolicyParams,
    prompt: &[TokenId],
    prefix: &[TokenId],
) -> Result<Vec<f64>, PolicyError> {
    Ok(softmax(&token_logits(params, prompt, prefix)?))
}

/// Log-probability of each step of `tokens` under the policy.
pub fn step_logprobs(
    params: &PolicyParams,
    prompt: &[TokenId],
    tokens: &[TokenId],
) -> Result<Vec<f64>, PolicyError> {
    if tokens.is_empty() {
        return Err(PolicyError::EmptySequence);
    }
    check_tokens(&params.spec, tokens)?;
    let mut out = Vec::with_capacity(tokens.len());
    for t in 0..tokens.len() {
        let probs = next_token_distribution(params, prompt, &tokens[..t])?;
        out.push(probs[tokens[t]].ln());
    }
    Ok(out)
}

/// `ln pi(y | x)`: the sum of per-step log-probabilities.
pub fn sequence_logprob(
    params: &PolicyParams,
    prompt: &[TokenId],
    tokens: &[TokenId],
) -> Result<f64, PolicyError> {
    Ok(step_logprobs(params, prompt, tokens)?.iter().sum())
}

/// Analytic gradient of [`sequence_logprob`] with respect to theta.
///
/// Per step the softmax log-likelihood gradient is
/// `(onehot(y_t) - p_t)` outer the active features; contributions sum over
/// steps.
pub fn logprob_gradient(
    params: &PolicyParams,
    prompt: &[TokenId],
    tokens: &[TokenId],
) -> Result<Vec<f64>, PolicyError> {
    if tokens.is_empty() {
        return Err(PolicyError::EmptySequence);
    }
    params.validate()?;
    check_tokens(&params.spec, prompt)?;
    check_tokens(&params.spec, tokens)?;
    let v = params.spec.vocab_size;
    let mut grad = vec![0.0f64; params.theta.len()];
    for t in 0..tokens.len() {
        let prefix = &tokens[..t];
        let probs = softmax(&token_logits(params, prompt, prefix)?);
        for f in active_features(&params.spec, prompt, prefix) {
            let row = &mut grad[f * v..(f + 1) * v];
            for (g, p) in row.iter_mut().zip(&probs) {
                *g -= p;
            }
            row[tokens[t]] += 1.0;
        }
    }
    Ok(grad)
}

/// Shannon entropy (nats) of the next-token distribution at each position
/// along the realized prefix.
pub fn step_entropies(
    params: &PolicyParams,
    prompt: &[TokenId],
    tokens: &[TokenId],
) -> Result<Vec<f64>, PolicyError> {
    check_tokens(&params.spec, tokens)?;
    let mut out = Vec::with_capacity(tokens.len());
    for t in 0..tokens.len() {
        let probs = next_token_distribution(params, prompt, &tokens[..t])?;
        out.push(entropy_nats(&probs));
    }
    Ok(out)
}

/// Entropy of a probability vector in nats, with `0 ln 0 = 0`.
pub fn entropy_nats(probs: &[f64]) -> f64 {
    probs.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum()
}

/// Ancestral sampling under a token budget.
///
/// Stops at EOS (`truncated = false`) or after `max_tokens` tokens
/// (`truncated = true`). The reward field is left unset for the verifier.
/// Sampling is inverse-CDF over the softmax, so a given rng stream yields a
/// reproducible trajectory.
pub fn sample_rollout<R: Rng>(
    params: &PolicyParams,
    problem_id: &str,
    prompt: &[TokenId],
    eos: TokenId,
    max_tokens: usize,
    rng: &mut R,
) -> Result<Rollout, PolicyError> {
    if max_tokens == 0 {
        return Err(PolicyError::ZeroBudget);
    }
    let mut tokens: Vec<TokenId> = Vec::new();
    let mut logprobs: Vec<f64> = Vec::new();
    let mut truncated = true;
    while tokens.len() < max_tokens {
        let probs = next_token_distribution(params, prompt, &tokens)?;
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut chosen = probs.len() - 1;
        for (i, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                chosen = i;
                break;
            }
        }
        tokens.push(chosen);
        logprobs.push(probs[chosen].ln());
        if chosen == eos {
            truncated = false;
            break;
        }
    }
    Ok(Rollout {
        problem_id: problem_id.to_string(),
        tokens,
        behavior_logprobs: logprobs,
        truncated,
        reward: None,
    })
}

/// Saves parameters as JSON; f64 values round-trip bit-exactly.
pub fn save_checkpoint(path: &Path, params: &PolicyParams) -> Result<(), PolicyError> {
    params.validate()?;
    let w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(w, params)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<PolicyParams, PolicyError> {
    let r = BufReader::new(File::open(path)?);
    let params: PolicyParams = serde_json::from_reader(r)?;
    params.validate()?;
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding::rng_from;
    use crate::tasks::Vocabulary;

    fn spec() -> FeatureSpec {
        FeatureSpec::new(DEFAULT_WINDOW, Vocabulary::standard().size())
    }

    #[test]
    fn test_zero_params_give_uniform_distribution() {
        let params = PolicyParams::zeros(spec());
        let probs = next_token_distribution(&params, &[4, 5], &[]).unwrap();
        let v = params.spec.vocab_size as f64;
        for p in probs {
            assert!((p - 1.0 / v).abs() < 1e-15);
        }
    }

    #[test]
    fn test_probabilities_sum_to_one_for_random_params() {
        let mut rng = rng_from(&[1]);
        for _ in 0..20 {
            let params = PolicyParams::random(spec(), 1.5, &mut rng);
            let probs = next_token_distribution(&params, &[4, 14, 5], &[6]).unwrap();
            let sum: f64 = probs.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn test_column_shift_raises_one_logit_by_feature_activation_sum() {
        let mut rng = rng_from(&[2]);
        let base = PolicyParams::random(spec(), 0.7, &mut rng);
        let prompt = [4, 14, 5, 15, 6];
        let prefix = [7];
        let before = token_logits(&base, &prompt, &prefix).unwrap();

        // Add c to every row of token 9's column.
        let c = 0.37;
        let v = base.spec.vocab_size;
        let mut shifted = base.clone();
        for f in 0..base.spec.feature_dim() {
            shifted.theta[f * v + 9] += c;
        }
        let after = token_logits(&shifted, &prompt, &prefix).unwrap();

        // Active features: window one-hots plus bias = window + 1 (context
        // here is longer than the window).
        let activation_sum = (base.spec.window + 1) as f64;
        for y in 0..v {
            let expected = if y == 9 { c * activation_sum } else { 0.0 };
            assert!((after[y] - before[y] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn test_sequence_logprob_uniform_policy() {
        let params = PolicyParams::zeros(spec());
        let v = params.spec.vocab_size as f64;
        let tokens = [4, 5, 6, 7];
        let lp = sequence_logprob(&params, &[8], &tokens).unwrap();
        assert!((lp - (-(tokens.len() as f64) * v.ln())).abs() < 1e-12);
    }

    #[test]
    fn test_sequence_logprob_half_probability_token() {
        // Two tokens share a huge logit; each gets probability 1/2.
        let mut params = PolicyParams::zeros(spec());
        params.add_bias(4, 50.0);
        params.add_bias(5, 50.0);
        let lp = sequence_logprob(&params, &[6], &[4]).unwrap();
        assert!((lp - 0.5f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn test_sequence_logprob_is_sum_of_steps() {
        let mut rng = rng_from(&[3]);
        let params = PolicyParams::random(spec(), 1.0, &mut rng);
        let prompt = [4, 14, 5];
        let tokens = [6, 7, 2, 8, 3, 1];
        let total = sequence_logprob(&params, &prompt, &tokens).unwrap();
        let steps = step_logprobs(&params, &prompt, &tokens).unwrap();
        assert!((total - steps.iter().sum::<f64>()).abs() < 1e-12);
        assert!(total <= 0.0);
        assert!(steps.iter().all(|&s| s <= 0.0));
    }

    #[test]
    fn test_logprob_gradient_matches_finite_differences() {
        let mut rng = rng_from(&[4]);
        let h = 1e-5;
        for case in 0..50 {
            let params = PolicyParams::random(spec(), 0.8, &mut rng);
            let prompt: Vec<TokenId> = (0..3).map(|_| rng.random_range(4..22)).collect();
            let len = rng.random_range(1..6usize);
            let tokens: Vec<TokenId> = (0..len).map(|_| rng.random_range(0..22)).collect();
            let grad = logprob_gradient(&params, &prompt, &tokens).unwrap();

            // Check a subsample of coordinates against central differences.
            let mut max_rel = 0.0f64;
            for k in 0..24 {
                let idx = (case * 131 + k * 977) % params.theta.len();
                let mut plus = params.clone();
                plus.theta[idx] += h;
                let mut minus = params.clone();
                minus.theta[idx] -= h;
                let fd = (sequence_logprob(&plus, &prompt, &tokens).unwrap()
                    - sequence_logprob(&minus, &prompt, &tokens).unwrap())
                    / (2.0 * h);
                let denom = fd.abs().max(grad[idx].abs()).max(1e-8);
                max_rel = max_rel.max((fd - grad[idx]).abs() / denom);
            }
            assert!(max_rel <= 1e-4, "case {case}: max relative error {max_rel}");
        }
    }

    #[test]
    fn test_uniform_policy_gradient_one_token_is_onehot_minus_uniform() {
        let params = PolicyParams::zeros(spec());
        let v = params.spec.vocab_size;
        let prompt = [4, 5, 6, 7, 8]; // longer than the window
        let target = 9;
        let grad = logprob_gradient(&params, &prompt, &[target]).unwrap();
        // Expected: for each active feature f, grad[f*V + y] = 1[y=target] - 1/V.
        let feats = active_features(&params.spec, &prompt, &[]);
        assert_eq!(feats.len(), params.spec.window + 1);
        let mut expected = vec![0.0; params.theta.len()];
        for f in feats {
            for y in 0..v {
                expected[f * v + y] = if y == target { 1.0 - 1.0 / v as f64 } else { -1.0 / v as f64 };
            }
        }
        for (g, e) in grad.iter().zip(&expected) {
            assert!((g - e).abs() < 1e-12);
        }
    }

    #[test]
    fn test_gradient_of_two_token_sequence_is_sum_of_per_step_gradients() {
        let mut rng = rng_from(&[5]);
        let params = PolicyParams::random(spec(), 0.6, &mut rng);
        let prompt = [4, 14, 5];
        let full = logprob_gradient(&params, &prompt, &[6, 7]).unwrap();
        let first = logprob_gradient(&params, &prompt, &[6]).unwrap();
        // Second step conditioned on the first token: gradient of the
        // length-2 logprob minus first-step logprob.
        let mut prompt_ext = prompt.to_vec();
        prompt_ext.push(6);
        let second = logprob_gradient(&params, &prompt_ext, &[7]).unwrap();
        for i in 0..full.len() {
            assert!((full[i] - first[i] - second[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn test_step_entropies_uniform_and_deterministic() {
        let spec = spec();
        let v = spec.vocab_size as f64;
        let uniform = PolicyParams::zeros(spec);
        let h = step_entropies(&uniform, &[4], &[5, 6]).unwrap();
        for e in h {
            assert!((e - v.ln()).abs() < 1e-12);
        }
        let mut det = PolicyParams::zeros(spec);
        det.add_bias(7, 200.0);
        let h = step_entropies(&det, &[4], &[7, 7]).unwrap();
        for e in h {
            assert!(e.abs() < 1e-9);
            assert!(e >= 0.0);
        }
    }

    #[test]
    fn test_two_outcome_entropy_value() {
        // Distribution (0.9, 0.1) has entropy 0.325083 nats.
        let h = entropy_nats(&[0.9, 0.1, 0.0, 0.0]);
        assert!((h - 0.325083).abs() < 1e-6);
    }

    #[test]
    fn test_sample_rollout_eos_and_truncation_extremes() {
        let vocab = Vocabulary::standard();
        let spec = FeatureSpec::new(4, vocab.size());
        let mut always_eos = PolicyParams::zeros(spec);
        always_eos.add_bias(vocab.eos(), 200.0);
        let mut rng = rng_from(&[6]);
        let r = sample_rollout(&always_eos, "p", &[4], vocab.eos(), 16, &mut rng).unwrap();
        assert_eq!(r.length(), 1);
        assert!(!r.truncated);
        assert_eq!(r.tokens[0], vocab.eos());
        assert!(r.reward.is_none());

        let mut never_eos = PolicyParams::zeros(spec);
        never_eos.add_bias(vocab.eos(), -200.0);
        let r = sample_rollout(&never_eos, "p", &[4], vocab.eos(), 16, &mut rng).unwrap();
        assert_eq!(r.length(), 16);
        assert!(r.truncated);
        assert_ne!(*r.tokens.last().unwrap(), vocab.eos());
        assert_eq!(r.behavior_logprobs.len(), r.tokens.len());
        assert!(r.behavior_logprobs.iter().all(|&lp| lp <= 0.0));
    }

    #[test]
    fn test_sample_rollout_mean_length_matches_capped_geometric() {
        // Constant EOS probability q at every step: length is a geometric
        // variable capped at the budget. Exact capped expectation:
        // sum_{t=1}^{B} t q (1-q)^{t-1} + B (1-q)^B.
        let vocab = Vocabulary::standard();
        let spec = FeatureSpec::new(4, vocab.size());
        let q = 0.2f64;
        let budget = 32usize;
        // EOS logit = ln(q/(1-q) * (V-1)) against the other V-1 tokens at 0.
        let mut params = PolicyParams::zeros(spec);
        let v = vocab.size() as f64;
        params.add_bias(vocab.eos(), (q / (1.0 - q) * (v - 1.0)).ln());

        let mut expected = 0.0;
        for t in 1..=budget {
            expected += t as f64 * q * (1.0 - q).powi(t as i32 - 1);
        }
        expected += budget as f64 * (1.0 - q).powi(budget as i32);

        let n = 10_000usize;
        let mut rng = rng_from(&[7]);
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..n {
            let r = sample_rollout(&params, "p", &[4], vocab.eos(), budget, &mut rng).unwrap();
            let len = r.length() as f64;
            sum += len;
            sumsq += len * len;
        }
        let mean = sum / n as f64;
        let var = (sumsq / n as f64 - mean * mean).max(0.0);
        let se = (var / n as f64).sqrt();
        assert!(
            (mean - expected).abs() <= 3.0 * se,
            "mean {mean} vs expected {expected} (se {se})"
        );
    }

    #[test]
    fn test_sampling_frequencies_match_distribution_chi_square() {
        // 100k draws at a fixed prefix; chi-square against the softmax
        // probabilities at significance 0.001 (df = 21, critical 46.797).
        let mut rng = rng_from(&[8]);
        let params = PolicyParams::random(spec(), 0.3, &mut rng);
        let prompt = [4, 14, 5];
        let probs = next_token_distribution(&params, &prompt, &[]).unwrap();
        let n = 100_000usize;
        let mut counts = vec![0usize; probs.len()];
        for _ in 0..n {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut chosen = probs.len() - 1;
            for (i, p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    chosen = i;
                    break;
                }
            }
            counts[chosen] += 1;
        }
        let chi2: f64 = counts
            .iter()
            .zip(&probs)
            .map(|(&c, &p)| {
                let e = p * n as f64;
                (c as f64 - e).powi(2) / e
            })
            .sum();
        assert!(chi2 < 46.797, "chi-square {chi2} exceeds the 0.001 critical value");
    }

    #[test]
    fn test_checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        let mut rng = rng_from(&[9]);
        let params = PolicyParams::random(spec(), 1.234567890123456, &mut rng);
        save_checkpoint(&path, &params).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(params.spec, back.spec);
        for (a, b) in params.theta.iter().zip(&back.theta) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn test_dimension_mismatch_is_rejected() {
        let mut params = PolicyParams::zeros(spec());
        params.theta.pop();
        assert!(matches!(
            token_logits(&params, &[4], &[]),
            Err(PolicyError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn test_out_of_vocabulary_token_is_rejected() {
        let params = PolicyParams::zeros(spec());
        assert!(matches!(
            sequence_logprob(&params, &[4], &[99]),
            Err(PolicyError::TokenOutOfRange(99, _))
        ));
    }
}
