//! Training orchestration: the sample -> verify -> advantage -> gradient ->
//! update loop, per-step JSONL telemetry, and the flagship comparison
//! between an easy-skewed and an easy-filtered training mix.
//!
//! Everything is reproducible: the tuple (config, seed) determines every
//! output byte except wall-clock fields. Rollout generation fans out across
//! workers (`RLVR_WORKERS`) with per-slot rng streams, so the worker count
//! never changes results; the optimizer step is a serial barrier.

use std::collections::{HashMap, HashSet};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::curation::{curriculum_order, CurationError};
use crate::grpo::{self, ClipConfig, GrpoError, OptState, RolloutGroup};
use crate::metrics::{self, EvalReport, MetricsError};
use crate::policy::{self, PolicyError, PolicyParams, Rollout};
use crate::seeding::{fnv1a64, mix_seed, rng_from};
use crate::tasks::{build_dataset, MixEntry, Problem, TaskError, TokenId, Vocabulary};
use crate::verifier;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("dataset empty after filtering")]
    EmptyDataset,
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: u64 },
    #[error("task error: {0}")]
    Task(#[from] TaskError),
    #[error("policy error: {0}")]
    Policy(#[from] PolicyError),
    #[error("grpo error: {0}")]
    Grpo(#[from] GrpoError),
    #[error("curation error: {0}")]
    Curation(#[from] CurationError),
    #[error("metrics error: {0}")]
    Metrics(#[from] MetricsError),
}

/// Which training stage a run belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Stage1,
    Stage2,
}

fn default_window() -> usize {
    policy::DEFAULT_WINDOW
}

/// Configuration of one training stage.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Dataset path (JSONL); the caller loads it and passes problems in.
    pub dataset: String,
    /// Rollouts per problem per step (G).
    pub group_size: usize,
    /// Problems per optimization step.
    pub groups_per_step: usize,
    pub clip_low: f64,
    pub clip_high: f64,
    /// Token budget per rollout.
    pub max_tokens: usize,
    pub base_lr: f64,
    #[serde(default)]
    pub weight_decay: f64,
    pub warmup_fraction: f64,
    pub total_steps: u64,
    pub seed: u64,
    pub stage: Stage,
    /// Order batches by difficulty phases instead of uniform shuffling.
    pub curriculum: bool,
    #[serde(default = "default_window")]
    pub window: usize,
    /// Optional validation dataset path for per-step pass@1 telemetry.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_dataset: Option<String>,
    /// Optional checkpoint to continue from (stage 2 resumes stage 1's
    /// parameters); absent means the uniform zero policy.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_checkpoint: Option<String>,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.group_size < 2 {
            return Err(HarnessError::InvalidConfig("group_size must be >= 2".into()));
        }
        if self.groups_per_step == 0 {
            return Err(HarnessError::InvalidConfig("groups_per_step must be >= 1".into()));
        }
        if self.max_tokens == 0 {
            return Err(HarnessError::InvalidConfig("max_tokens must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(HarnessError::InvalidConfig("warmup_fraction must be in [0, 1)".into()));
        }
        if self.window == 0 {
            return Err(HarnessError::InvalidConfig("window must be >= 1".into()));
        }
        ClipConfig::new(self.clip_low, self.clip_high).map_err(|e| {
            HarnessError::InvalidConfig(format!("clip thresholds: {e}"))
        })?;
        Ok(())
    }

    pub fn clip(&self) -> ClipConfig {
        ClipConfig { low: self.clip_low, high: self.clip_high }
    }
}

/// Telemetry for one optimization step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub mean_reward: f64,
    pub surrogate: f64,
    pub grad_norm: f64,
    pub mean_length: f64,
    pub min_length: usize,
    pub truncation_ratio: f64,
    pub mean_entropy: f64,
    pub effective_lr: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_pass1: Option<f64>,
    /// Wall-clock duration of the step; the only nondeterministic field.
    pub wall_ms: f64,
}

/// Final parameters and the per-step log of one stage.
#[derive(Debug, Clone)]
pub struct StageResult {
    pub params: PolicyParams,
    pub log: Vec<StepRecord>,
}

/// Number of rollout workers, from `RLVR_WORKERS` (default 1). Results are
/// identical for any worker count.
pub fn worker_count() -> usize {
    std::env::var("RLVR_WORKERS")
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

/// Index-stable parallel map over a work list.
fn parallel_map<T, U, F>(items: &[T], workers: usize, f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(usize, &T) -> U + Sync,
{
    if workers <= 1 || items.len() <= 1 {
        return items.iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    let mut out: Vec<Option<U>> = (0..items.len()).map(|_| None).collect();
    let chunk = items.len().div_ceil(workers);
    std::thread::scope(|scope| {
        for (w, out_chunk) in out.chunks_mut(chunk).enumerate() {
            let f = &f;
            let base = w * chunk;
            scope.spawn(move || {
                for (offset, slot) in out_chunk.iter_mut().enumerate() {
                    let i = base + offset;
                    *slot = Some(f(i, &items[i]));
                }
            });
        }
    });
    out.into_iter().map(|u| u.expect("worker filled every slot")).collect()
}

/// Deterministic batch-order stream over problem indices.
struct BatchOrder {
    order: Vec<usize>,
    cursor: usize,
    epoch: u64,
    shuffle_seed: Option<u64>,
}

impl BatchOrder {
    fn uniform(n: usize, seed: u64) -> Self {
        let mut s = Self { order: (0..n).collect(), cursor: 0, epoch: 0, shuffle_seed: Some(seed) };
        s.reshuffle();
        s
    }

    fn curriculum(problems: &[Problem]) -> Self {
        let index_of: HashMap<&str, usize> =
            problems.iter().enumerate().map(|(i, p)| (p.id.as_str(), i)).collect();
        let order: Vec<usize> = curriculum_order(problems)
            .iter()
            .flat_map(|phase| phase.problem_ids.iter().map(|id| index_of[id.as_str()]))
            .collect();
        Self { order, cursor: 0, epoch: 0, shuffle_seed: None }
    }

    fn reshuffle(&mut self) {
        if let Some(seed) = self.shuffle_seed {
            let mut rng = rng_from(&[seed, ORDER_TAG, self.epoch]);
            self.order.shuffle(&mut rng);
        }
    }

    fn next(&mut self) -> usize {
        if self.cursor >= self.order.len() {
            self.cursor = 0;
            self.epoch += 1;
            self.reshuffle();
        }
        let i = self.order[self.cursor];
        self.cursor += 1;
        i
    }
}

// Seed-derivation tags keep independent rng streams from colliding.
const ORDER_TAG: u64 = 0x6f72_6465;
const ROLLOUT_TAG: u64 = 0x726f_6c6c;
const VAL_TAG: u64 = 0x7661_6c31;
const DATA_TAG: u64 = 0x6461_7461;
const EVAL_TAG: u64 = 0x6576_616c;

/// Runs one training stage: sample, verify, group, gradient, update, for
/// `total_steps` steps. Stage 1 draws batches uniformly at random; stage 2
/// with `curriculum` walks difficulty phases in order. Each step invokes
/// `on_step` with its telemetry record.
pub fn run_stage(
    config: &TrainConfig,
    vocab: &Vocabulary,
    initial: PolicyParams,
    problems: &[Problem],
    val_problems: Option<&[Problem]>,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<StageResult, HarnessError> {
    config.validate()?;
    if problems.is_empty() {
        return Err(HarnessError::EmptyDataset);
    }
    initial.validate()?;

    let prompts: Vec<Vec<TokenId>> = problems
        .iter()
        .map(|p| p.prompt_tokens(vocab))
        .collect::<Result<_, _>>()?;
    let prompt_by_id: HashMap<&str, &Vec<TokenId>> =
        problems.iter().zip(&prompts).map(|(p, toks)| (p.id.as_str(), toks)).collect();
    let val_prompts: Option<Vec<(usize, Vec<TokenId>)>> = match val_problems {
        Some(vp) => Some(
            vp.iter()
                .enumerate()
                .map(|(i, p)| Ok((i, p.prompt_tokens(vocab)?)))
                .collect::<Result<_, TaskError>>()?,
        ),
        None => None,
    };

    let mut order = if config.stage == Stage::Stage2 && config.curriculum {
        BatchOrder::curriculum(problems)
    } else {
        BatchOrder::uniform(problems.len(), config.seed)
    };

    let clip = config.clip();
    let workers = worker_count();
    let mut params = initial;
    let mut opt = OptState::new(
        params.theta.len(),
        config.base_lr,
        config.weight_decay,
        config.warmup_fraction,
        config.total_steps,
    );
    let mut log: Vec<StepRecord> = Vec::with_capacity(config.total_steps as usize);

    for step in 1..=config.total_steps {
        let started = Instant::now();
        let batch: Vec<usize> = (0..config.groups_per_step).map(|_| order.next()).collect();

        // Fan out rollout generation + verification; per-slot rng streams
        // keep results independent of worker scheduling.
        let mut units: Vec<(usize, usize, usize)> = Vec::new();
        for (slot, &pi) in batch.iter().enumerate() {
            for r in 0..config.group_size {
                units.push((slot, pi, r));
            }
        }
        let params_ref = &params;
        let sampled: Vec<(Rollout, f64)> = parallel_map(&units, workers, |_, &(slot, pi, r)| {
            let problem = &problems[pi];
            let mut rng =
                rng_from(&[config.seed, ROLLOUT_TAG, step, slot as u64, r as u64]);
            let mut rollout = policy::sample_rollout(
                params_ref,
                &problem.id,
                &prompts[pi],
                vocab.eos(),
                config.max_tokens,
                &mut rng,
            )
            .expect("sampling from validated params cannot fail");
            let verdict = verifier::score(&rollout, problem, vocab);
            rollout.reward = Some(verdict.reward);
            let entropies = policy::step_entropies(params_ref, &prompts[pi], &rollout.tokens)
                .expect("entropy of sampled tokens cannot fail");
            let mean_entropy =
                entropies.iter().sum::<f64>() / entropies.len().max(1) as f64;
            (rollout, mean_entropy)
        });

        // Telemetry over the step's rollouts.
        let n_rollouts = sampled.len() as f64;
        let mean_reward =
            sampled.iter().map(|(r, _)| r.reward.unwrap_or(0.0)).sum::<f64>() / n_rollouts;
        let mean_length =
            sampled.iter().map(|(r, _)| r.length() as f64).sum::<f64>() / n_rollouts;
        let min_length = sampled.iter().map(|(r, _)| r.length()).min().unwrap_or(0);
        let truncation_ratio =
            sampled.iter().filter(|(r, _)| r.truncated).count() as f64 / n_rollouts;
        let mean_entropy = sampled.iter().map(|(_, h)| h).sum::<f64>() / n_rollouts;

        // Assemble groups in slot order.
        let mut groups: Vec<RolloutGroup> = Vec::with_capacity(batch.len());
        let mut rollouts_by_slot: Vec<Vec<Rollout>> =
            (0..batch.len()).map(|_| Vec::with_capacity(config.group_size)).collect();
        for ((slot, _, _), (rollout, _)) in units.iter().zip(sampled) {
            rollouts_by_slot[*slot].push(rollout);
        }
        for slot_rollouts in rollouts_by_slot {
            groups.push(RolloutGroup::new(slot_rollouts)?);
        }

        let lookup = |id: &str| -> Vec<TokenId> { prompt_by_id[id].clone() };
        let surrogate = grpo::surrogate_value(&groups, &params, &lookup, &clip)?;
        let grad = grpo::surrogate_gradient(&groups, &params, &lookup, &clip)?;
        if !surrogate.is_finite() {
            return Err(HarnessError::NonFiniteLoss { step });
        }
        let grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        let (next_params, next_opt) = grpo::optimizer_step(&opt, &params, &grad)
            .map_err(|e| match e {
                GrpoError::NonFiniteGradient(_) => HarnessError::NonFiniteLoss { step },
                other => HarnessError::Grpo(other),
            })?;
        params = next_params;
        opt = next_opt;

        // Validation pass@1 under the updated policy, one sample per
        // problem, with its own seed stream.
        let val_pass1 = match (&val_prompts, val_problems) {
            (Some(vp), Some(problems)) if !vp.is_empty() => {
                let params_ref = &params;
                let rewards: Vec<f64> = parallel_map(vp, workers, |_, (vi, prompt)| {
                    let problem = &problems[*vi];
                    let mut rng = rng_from(&[
                        config.seed,
                        VAL_TAG,
                        step,
                        fnv1a64(problem.id.as_bytes()),
                    ]);
                    let rollout = policy::sample_rollout(
                        params_ref,
                        &problem.id,
                        prompt,
                        vocab.eos(),
                        config.max_tokens,
                        &mut rng,
                    )
                    .expect("sampling from validated params cannot fail");
                    verifier::score(&rollout, problem, vocab).reward
                });
                Some(rewards.iter().sum::<f64>() / rewards.len() as f64)
            }
            _ => None,
        };

        let record = StepRecord {
            step,
            mean_reward,
            surrogate,
            grad_norm,
            mean_length,
            min_length,
            truncation_ratio,
            mean_entropy,
            effective_lr: opt.effective_lr_at(step),
            val_pass1,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        };
        on_step(&record);
        log.push(record);
    }

    Ok(StageResult { params, log })
}

// ---------------------------------------------------------------------------
// Comparison experiment
// ---------------------------------------------------------------------------

fn default_seeds() -> Vec<u64> {
    vec![1, 2, 3]
}

fn default_group_size() -> usize {
    16
}

fn default_groups_per_step() -> usize {
    32
}

fn default_clip_low() -> f64 {
    0.8
}

fn default_clip_high() -> f64 {
    1.28
}

fn default_max_tokens() -> usize {
    64
}

fn default_base_lr() -> f64 {
    0.05
}

fn default_warmup_fraction() -> f64 {
    0.05
}

fn default_total_steps() -> u64 {
    240
}

fn default_experiment_window() -> usize {
    6
}

fn default_eval_samples() -> usize {
    4
}

fn default_init_eos_bias() -> f64 {
    -2.0
}

fn default_easy_mix() -> Vec<MixEntry> {
    use crate::tasks::Family::*;
    vec![
        MixEntry::new(Echo, 1, 10),
        MixEntry::new(Echo, 2, 60),
        MixEntry::new(Echo, 3, 80),
        MixEntry::new(Echo, 4, 30),
        MixEntry::new(Echo, 5, 15),
        MixEntry::new(ChainMax, 1, 20),
        MixEntry::new(ChainMax, 2, 25),
        MixEntry::new(ChainMax, 3, 15),
        MixEntry::new(DigitSum, 1, 10),
        MixEntry::new(DigitSum, 2, 30),
        MixEntry::new(DigitSum, 3, 15),
        MixEntry::new(ChainMod, 1, 20),
        MixEntry::new(ChainMod, 2, 15),
        MixEntry::new(ChainMod, 3, 5),
    ]
}

fn default_hard_mix() -> Vec<MixEntry> {
    use crate::tasks::Family::*;
    // Instances whose answers cannot be cracked by marginal guessing (a
    // k-digit block is guessed with probability 10^-k). Single-digit
    // families stay guessable at ~10% no matter how deep the chain, which
    // would hand this arm a reward stream hard problems should not have.
    vec![
        MixEntry::new(Echo, 4, 90),
        MixEntry::new(Echo, 5, 45),
        MixEntry::new(Echo, 6, 25),
    ]
}

fn default_holdout_mix() -> Vec<MixEntry> {
    use crate::tasks::Family::*;
    vec![
        MixEntry::new(Echo, 3, 30),
        MixEntry::new(ChainMax, 3, 30),
        MixEntry::new(DigitSum, 2, 20),
        MixEntry::new(ChainMod, 2, 20),
    ]
}

/// Configuration of the easy-retention vs easy-filtered experiment.
///
/// The two arms share every hyperparameter and seed; only the training mix
/// differs. The holdout set is generated separately and removed from both
/// training sets, and doubles as the per-step validation set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonConfig {
    #[serde(default = "default_easy_mix")]
    pub easy_mix: Vec<MixEntry>,
    #[serde(default = "default_hard_mix")]
    pub hard_mix: Vec<MixEntry>,
    #[serde(default = "default_holdout_mix")]
    pub holdout_mix: Vec<MixEntry>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_group_size")]
    pub group_size: usize,
    #[serde(default = "default_groups_per_step")]
    pub groups_per_step: usize,
    #[serde(default = "default_clip_low")]
    pub clip_low: f64,
    #[serde(default = "default_clip_high")]
    pub clip_high: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: usize,
    #[serde(default = "default_base_lr")]
    pub base_lr: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "default_warmup_fraction")]
    pub warmup_fraction: f64,
    #[serde(default = "default_total_steps")]
    pub total_steps: u64,
    #[serde(default = "default_experiment_window")]
    pub window: usize,
    #[serde(default = "default_eval_samples")]
    pub eval_samples: usize,
    /// Initial logit offset on EOS. Negative values make the starting
    /// policy ramble, standing in for a verbose base model; training must
    /// earn its way back to short completions.
    #[serde(default = "default_init_eos_bias")]
    pub init_eos_bias: f64,
}

impl Default for ComparisonConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults are complete")
    }
}

/// One arm's outcome for one seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArmOutcome {
    pub arm: String,
    pub eval: EvalReport,
    pub steps: Vec<StepRecord>,
}

/// Both arms under one seed, with the headline ratios.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedComparison {
    pub seed: u64,
    pub easy_heavy: ArmOutcome,
    pub hard_only: ArmOutcome,
    /// easy pass@1 minus hard pass@1 on the shared holdout.
    pub pass1_gap: f64,
    /// easy mean length over hard mean length on the shared holdout.
    pub length_ratio: f64,
}

/// Aggregate over seeds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonSummary {
    pub per_seed: Vec<SeedComparison>,
    pub mean_easy_pass1: f64,
    pub mean_hard_pass1: f64,
    pub mean_easy_length: f64,
    pub mean_hard_length: f64,
    /// mean_easy_pass1 - mean_hard_pass1.
    pub pass1_gap: f64,
    /// mean_easy_length / mean_hard_length.
    pub length_ratio: f64,
}

fn train_config_for_arm(cfg: &ComparisonConfig, seed: u64, arm: &str) -> TrainConfig {
    TrainConfig {
        dataset: format!("<inline:{arm}>"),
        group_size: cfg.group_size,
        groups_per_step: cfg.groups_per_step,
        clip_low: cfg.clip_low,
        clip_high: cfg.clip_high,
        max_tokens: cfg.max_tokens,
        base_lr: cfg.base_lr,
        weight_decay: cfg.weight_decay,
        warmup_fraction: cfg.warmup_fraction,
        total_steps: cfg.total_steps,
        seed,
        stage: Stage::Stage1,
        curriculum: false,
        window: cfg.window,
        val_dataset: None,
        init_checkpoint: None,
    }
}

/// Trains both arms with shared seeds, steps, and budget, then evaluates
/// both on the shared held-out mid-difficulty set. `on_arm_done` receives
/// each arm's final parameters for checkpointing.
pub fn run_comparison(
    cfg: &ComparisonConfig,
    vocab: &Vocabulary,
    mut on_step: impl FnMut(u64, &str, &StepRecord),
    mut on_arm_done: impl FnMut(u64, &str, &PolicyParams),
) -> Result<ComparisonSummary, HarnessError> {
    let mut per_seed = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let holdout = build_dataset(&cfg.holdout_mix, mix_seed(&[seed, DATA_TAG, 0]))?;
        if holdout.is_empty() {
            return Err(HarnessError::EmptyDataset);
        }
        let holdout_ids: HashSet<&str> = holdout.iter().map(|p| p.id.as_str()).collect();
        let mut arms = Vec::with_capacity(2);
        for (arm_idx, (arm, mixes)) in
            [("easy-heavy", &cfg.easy_mix), ("hard-only", &cfg.hard_mix)].iter().enumerate()
        {
            let mut dataset = build_dataset(mixes, mix_seed(&[seed, DATA_TAG, 1 + arm_idx as u64]))?;
            dataset.retain(|p| !holdout_ids.contains(p.id.as_str()));
            let config = train_config_for_arm(cfg, seed, arm);
            let spec = policy::FeatureSpec::new(cfg.window, vocab.size());
            let mut initial = PolicyParams::zeros(spec);
            initial.add_bias(vocab.eos(), cfg.init_eos_bias);
            let result = run_stage(
                &config,
                vocab,
                initial,
                &dataset,
                Some(&holdout),
                |record| on_step(seed, arm, record),
            )?;
            let eval = metrics::evaluate(
                &result.params,
                &holdout,
                vocab,
                cfg.max_tokens,
                1,
                cfg.eval_samples,
                mix_seed(&[seed, EVAL_TAG]),
                "holdout",
            )?;
            on_arm_done(seed, arm, &result.params);
            arms.push(ArmOutcome { arm: arm.to_string(), eval, steps: result.log });
        }
        let hard = arms.pop().expect("two arms");
        let easy = arms.pop().expect("two arms");
        let pass1_gap = easy.eval.pass1 - hard.eval.pass1;
        let length_ratio = easy.eval.mean_length / hard.eval.mean_length;
        per_seed.push(SeedComparison { seed, easy_heavy: easy, hard_only: hard, pass1_gap, length_ratio });
    }
    let n = per_seed.len() as f64;
    let mean_easy_pass1 = per_seed.iter().map(|s| s.easy_heavy.eval.pass1).sum::<f64>() / n;
    let mean_hard_pass1 = per_seed.iter().map(|s| s.hard_only.eval.pass1).sum::<f64>() / n;
    let mean_easy_length = per_seed.iter().map(|s| s.easy_heavy.eval.mean_length).sum::<f64>() / n;
    let mean_hard_length = per_seed.iter().map(|s| s.hard_only.eval.mean_length).sum::<f64>() / n;
    Ok(ComparisonSummary {
        per_seed,
        mean_easy_pass1,
        mean_hard_pass1,
        mean_easy_length,
        mean_hard_length,
        pass1_gap: mean_easy_pass1 - mean_hard_pass1,
        length_ratio: mean_easy_length / mean_hard_length,
    })
}
