//! Rollout-based difficulty profiling and data curation rules.
//!
//! Difficulty is measured empirically: sample `n` completions per problem
//! under a token budget, verify them, and record the success rate `p_hat`.
//! Stage-1 keeps everything the policy cannot yet solve reliably (`p < 1`,
//! including `p = 0`); the interior filter keeps only problems with a live
//! gradient signal (`0 < p < 1`); stage-2 cutoffs retain, per domain, all
//! difficulty levels from the first one whose measured pass rate falls below
//! a threshold.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::policy::{sample_rollout, PolicyError, PolicyParams};
use crate::seeding::{fnv1a64, rng_from};
use crate::tasks::{Problem, TaskError, Vocabulary};
use crate::verifier;

/// Rollouts per problem when profiling difficulty.
pub const DEFAULT_PROFILE_ROLLOUTS: usize = 16;
/// Pass-rate threshold below which a difficulty level starts a domain's
/// stage-2 retention.
pub const DEFAULT_STAGE2_THRESHOLD: f64 = 0.75;
/// Problems probed per (domain, level) when estimating stage-2 cutoffs.
pub const DEFAULT_PROBE_SIZE: usize = 30;

const CURRICULUM_TIE_SEED: u64 = 0x5eed_0c0a;

#[derive(Debug, Error)]
pub enum CurationError {
    #[error("no problems to profile")]
    EmptyProblemSet,
    #[error("n_rollouts must be at least 1")]
    ZeroRollouts,
    #[error("n_bins must be at least 1")]
    ZeroBins,
    #[error("threshold must lie in (0, 1), got {0}")]
    BadThreshold(f64),
    #[error("difficulty levels for domain {0} are not contiguous")]
    NonContiguousLevels(String),
    #[error("task error: {0}")]
    Task(#[from] TaskError),
    #[error("policy error: {0}")]
    Policy(#[from] PolicyError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Empirical difficulty of one problem under a fixed policy and budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DifficultyProfile {
    pub problem_id: String,
    #[serde(rename = "n")]
    pub n_rollouts: usize,
    pub successes: usize,
    pub p_hat: f64,
    /// Mean token length of rewarded rollouts; absent when none succeeded.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mean_correct_length: Option<f64>,
    /// Token budget used while profiling.
    pub budget: usize,
}

/// Histogram of success rates with separate point masses at exactly 0 and 1.
///
/// Interior bins partition (0, 1); `zero_count + one_count + sum(counts)`
/// equals the number of profiled problems, so both the full and the
/// interior-only views are derivable from one pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RhoHistogram {
    pub bin_edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub zero_count: usize,
    pub one_count: usize,
}

impl RhoHistogram {
    pub fn total(&self) -> usize {
        self.zero_count + self.one_count + self.counts.iter().sum::<usize>()
    }
}

/// Samples `n_rollouts` completions per problem, scores them, and records
/// success rates and length statistics. Deterministic given the seed: each
/// (problem, rollout) pair gets its own derived rng stream, so profiling
/// order and worker count cannot change the result.
pub fn profile_difficulty(
    problems: &[Problem],
    params: &PolicyParams,
    vocab: &Vocabulary,
    n_rollouts: usize,
    budget: usize,
    seed: u64,
) -> Result<Vec<DifficultyProfile>, CurationError> {
    if problems.is_empty() {
        return Err(CurationError::EmptyProblemSet);
    }
    if n_rollouts == 0 {
        return Err(CurationError::ZeroRollouts);
    }
    let mut out = Vec::with_capacity(problems.len());
    for problem in problems {
        let prompt = problem.prompt_tokens(vocab)?;
        let id_hash = fnv1a64(problem.id.as_bytes());
        let mut successes = 0usize;
        let mut correct_len_sum = 0usize;
        for r in 0..n_rollouts {
            let mut rng = rng_from(&[seed, id_hash, r as u64]);
            let rollout =
                sample_rollout(params, &problem.id, &prompt, vocab.eos(), budget, &mut rng)?;
            let verdict = verifier::score(&rollout, problem, vocab);
            if verdict.reward == 1.0 {
                successes += 1;
                correct_len_sum += rollout.length();
            }
        }
        out.push(DifficultyProfile {
            problem_id: problem.id.clone(),
            n_rollouts,
            successes,
            p_hat: successes as f64 / n_rollouts as f64,
            mean_correct_length: (successes > 0)
                .then(|| correct_len_sum as f64 / successes as f64),
            budget,
        });
    }
    Ok(out)
}

/// Histogram of `p_hat` over profiles with exact-0 and exact-1 masses kept
/// out of the interior bins.
pub fn rho_histogram(
    profiles: &[DifficultyProfile],
    n_bins: usize,
) -> Result<RhoHistogram, CurationError> {
    if n_bins == 0 {
        return Err(CurationError::ZeroBins);
    }
    let bin_edges: Vec<f64> = (0..=n_bins).map(|i| i as f64 / n_bins as f64).collect();
    let mut counts = vec![0usize; n_bins];
    let mut zero_count = 0usize;
    let mut one_count = 0usize;
    for p in profiles {
        if p.p_hat == 0.0 {
            zero_count += 1;
        } else if p.p_hat == 1.0 {
            one_count += 1;
        } else {
            let idx = ((p.p_hat * n_bins as f64) as usize).min(n_bins - 1);
            counts[idx] += 1;
        }
    }
    Ok(RhoHistogram { bin_edges, counts, zero_count, one_count })
}

/// Monte-Carlo estimate of the expected reward over the profiled set,
/// `integral of p * rho(p) dp`, as the mean of `p_hat`. With a uniform
/// rollout count per problem this equals pooled successes over pooled
/// rollouts exactly.
pub fn expected_reward(profiles: &[DifficultyProfile]) -> f64 {
    if profiles.is_empty() {
        return 0.0;
    }
    profiles.iter().map(|p| p.p_hat).sum::<f64>() / profiles.len() as f64
}

/// Stage-1 retention: keep every problem with `p_hat < 1`, including
/// `p_hat = 0` (problems unsolved at this budget may become solvable at a
/// larger one).
pub fn stage1_filter(profiles: &[DifficultyProfile]) -> Vec<String> {
    profiles.iter().filter(|p| p.p_hat < 1.0).map(|p| p.problem_id.clone()).collect()
}

/// Interior retention: keep only `0 < p_hat < 1`, the problems that give a
/// live advantage signal.
pub fn effective_signal_filter(profiles: &[DifficultyProfile]) -> Vec<String> {
    profiles
        .iter()
        .filter(|p| p.p_hat > 0.0 && p.p_hat < 1.0)
        .map(|p| p.problem_id.clone())
        .collect()
}

/// Per-domain starting difficulty: the smallest level whose measured pass
/// rate falls below `threshold`; levels at or above the cutoff are retained.
/// A domain where every level meets the threshold gets `None` (no cutoff:
/// retain nothing from that domain).
pub fn stage2_cutoffs(
    pass1_by_level: &BTreeMap<(String, u32), f64>,
    threshold: f64,
) -> Result<BTreeMap<String, Option<u32>>, CurationError> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(CurationError::BadThreshold(threshold));
    }
    let mut per_domain: BTreeMap<String, Vec<(u32, f64)>> = BTreeMap::new();
    for ((domain, level), acc) in pass1_by_level {
        per_domain.entry(domain.clone()).or_default().push((*level, *acc));
    }
    let mut out = BTreeMap::new();
    for (domain, mut levels) in per_domain {
        levels.sort_by_key(|(l, _)| *l);
        for pair in levels.windows(2) {
            if pair[1].0 != pair[0].0 + 1 {
                return Err(CurationError::NonContiguousLevels(domain));
            }
        }
        let cutoff = levels.iter().find(|(_, acc)| *acc < threshold).map(|(l, _)| *l);
        out.insert(domain, cutoff);
    }
    Ok(out)
}

/// One curriculum phase: a full pass over one difficulty level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurriculumPhase {
    pub level: u32,
    pub problem_ids: Vec<String>,
}

/// Orders problems ascending by difficulty level into epoch-sized phases.
/// Within a level the order is a deterministic id-hash tie-break, identical
/// across runs.
pub fn curriculum_order(problems: &[Problem]) -> Vec<CurriculumPhase> {
    let mut keyed: Vec<(&Problem, u64)> = problems
        .iter()
        .map(|p| {
            let mut key = CURRICULUM_TIE_SEED.to_le_bytes().to_vec();
            key.extend_from_slice(p.id.as_bytes());
            (p, fnv1a64(&key))
        })
        .collect();
    keyed.sort_by(|a, b| (a.0.difficulty, a.1, &a.0.id).cmp(&(b.0.difficulty, b.1, &b.0.id)));
    let mut phases: Vec<CurriculumPhase> = Vec::new();
    for (p, _) in keyed {
        match phases.last_mut() {
            Some(phase) if phase.level == p.difficulty => phase.problem_ids.push(p.id.clone()),
            _ => phases
                .push(CurriculumPhase { level: p.difficulty, problem_ids: vec![p.id.clone()] }),
        }
    }
    phases
}

/// Writes profiles as JSON lines.
pub fn write_profiles(path: &Path, profiles: &[DifficultyProfile]) -> Result<(), CurationError> {
    let mut w = BufWriter::new(File::create(path)?);
    for p in profiles {
        serde_json::to_writer(&mut w, p)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_profiles(path: &Path) -> Result<Vec<DifficultyProfile>, CurationError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}
