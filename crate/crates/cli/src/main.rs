//! `rlvr` — command-line pipeline for the desk-scale RLVR laboratory.
//!
//! Every subcommand reads a JSON config (`--config`), writes its outputs
//! into a run directory (`--out`), and exits 0 on success. On failure a
//! machine-readable error record is printed to stderr and the exit code is
//! nonzero. `--seed` and `--budget` override the corresponding config
//! fields. All outputs are byte-identical across runs with the same config
//! and seed, except wall-clock fields in step telemetry.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use rlvr_core::curation::{
    self, effective_signal_filter, profile_difficulty, read_profiles, rho_histogram,
    stage1_filter, stage2_cutoffs, write_profiles, DEFAULT_PROFILE_ROLLOUTS,
    DEFAULT_STAGE2_THRESHOLD,
};
use rlvr_core::harness::{run_comparison, run_stage, ComparisonConfig, TrainConfig};
use rlvr_core::infotheory::{boxed_answer_map, exact_entropy_trace, monotonicity_check};
use rlvr_core::metrics::{append_eaa, budget_sweep, evaluate, EaaRow, DEFAULT_GAMMA};
use rlvr_core::policy::{
    load_checkpoint, save_checkpoint, FeatureSpec, PolicyParams, DEFAULT_WINDOW,
};
use rlvr_core::seeding::rng_from;
use rlvr_core::tasks::{build_dataset, read_dataset, write_dataset, MixEntry, Vocabulary};

#[derive(Parser)]
#[command(name = "rlvr", version, about = "Desk-scale RLVR laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// JSON config file for this subcommand.
    #[arg(long)]
    config: PathBuf,
    /// Run directory for outputs (created if missing).
    #[arg(long)]
    out: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config's token budget.
    #[arg(long)]
    budget: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset from a difficulty mix.
    Gen(CommonArgs),
    /// Profile per-problem success rates under a policy.
    Profile(CommonArgs),
    /// Apply stage-1/interior filters and compute stage-2 cutoffs.
    Filter(CommonArgs),
    /// Run one training stage.
    Train(CommonArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(CommonArgs),
    /// Evaluate across increasing budgets with shared seeds.
    Sweep(CommonArgs),
    /// Append efficiency-adjusted accuracy to a results table.
    Eaa(CommonArgs),
    /// Verify answer-entropy monotonicity on random tiny policies.
    EntropyCheck(CommonArgs),
    /// Train and evaluate the easy-retention vs easy-filtered arms.
    Compare(CommonArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Gen(_) => "gen",
            Command::Profile(_) => "profile",
            Command::Filter(_) => "filter",
            Command::Train(_) => "train",
            Command::Eval(_) => "eval",
            Command::Sweep(_) => "sweep",
            Command::Eaa(_) => "eaa",
            Command::EntropyCheck(_) => "entropy-check",
            Command::Compare(_) => "compare",
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let name = cli.command.name();
    let result = match cli.command {
        Command::Gen(args) => cmd_gen(&args),
        Command::Profile(args) => cmd_profile(&args),
        Command::Filter(args) => cmd_filter(&args),
        Command::Train(args) => cmd_train(&args),
        Command::Eval(args) => cmd_eval(&args),
        Command::Sweep(args) => cmd_sweep(&args),
        Command::Eaa(args) => cmd_eaa(&args),
        Command::EntropyCheck(args) => cmd_entropy_check(&args),
        Command::Compare(args) => cmd_compare(&args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let record = serde_json::json!({
                "command": name,
                "error": format!("{err:#}"),
            });
            eprintln!("{record}");
            ExitCode::FAILURE
        }
    }
}

// ---------------------------------------------------------------------------
// Shared helpers
// ---------------------------------------------------------------------------

fn read_config<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let file =
        File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn prepare_out(args: &CommonArgs) -> Result<PathBuf> {
    fs::create_dir_all(&args.out)
        .with_context(|| format!("creating run directory {}", args.out.display()))?;
    Ok(args.out.clone())
}

/// Echo the effective (post-override) config into the run directory.
fn record_config<T: Serialize>(out: &Path, config: &T) -> Result<()> {
    write_json(&out.join("config.json"), config)
}

fn load_problems(path: &str) -> Result<Vec<rlvr_core::tasks::Problem>> {
    read_dataset(Path::new(path)).with_context(|| format!("reading dataset {path}"))
}

fn load_params(checkpoint: &Option<String>, window: usize, vocab: &Vocabulary) -> Result<PolicyParams> {
    match checkpoint {
        Some(path) => load_checkpoint(Path::new(path))
            .with_context(|| format!("reading checkpoint {path}")),
        None => Ok(PolicyParams::zeros(FeatureSpec::new(window, vocab.size()))),
    }
}

fn default_n_bins() -> usize {
    10
}

fn default_profile_rollouts() -> usize {
    DEFAULT_PROFILE_ROLLOUTS
}

fn default_threshold() -> f64 {
    DEFAULT_STAGE2_THRESHOLD
}

fn default_window() -> usize {
    DEFAULT_WINDOW
}

fn default_gamma() -> f64 {
    DEFAULT_GAMMA
}

fn default_k() -> usize {
    1
}

fn default_benchmark() -> String {
    "eval".into()
}

// ---------------------------------------------------------------------------
// gen
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct GenConfig {
    mix: Vec<MixEntry>,
    seed: u64,
}

fn cmd_gen(args: &CommonArgs) -> Result<()> {
    let mut config: GenConfig = read_config(&args.config)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    let out = prepare_out(args)?;
    record_config(&out, &config)?;
    let problems = build_dataset(&config.mix, config.seed)?;
    write_dataset(&out.join("dataset.jsonl"), &problems)?;
    println!("wrote {} problems", problems.len());
    Ok(())
}

// ---------------------------------------------------------------------------
// profile
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct ProfileConfig {
    dataset: String,
    #[serde(default)]
    checkpoint: Option<String>,
    #[serde(default = "default_profile_rollouts")]
    n_rollouts: usize,
    budget: usize,
    seed: u64,
    #[serde(default = "default_window")]
    window: usize,
    #[serde(default = "default_n_bins")]
    n_bins: usize,
}

fn cmd_profile(args: &CommonArgs) -> Result<()> {
    let mut config: ProfileConfig = read_config(&args.config)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(budget) = args.budget {
        config.budget = budget;
    }
    let out = prepare_out(args)?;
    record_config(&out, &config)?;
    let vocab = Vocabulary::standard();
    let problems = load_problems(&config.dataset)?;
    let params = load_params(&config.checkpoint, config.window, &vocab)?;
    let profiles = profile_difficulty(
        &problems,
        &params,
        &vocab,
        config.n_rollouts,
        config.budget,
        config.seed,
    )?;
    write_profiles(&out.join("profiles.jsonl"), &profiles)?;
    let histogram = rho_histogram(&profiles, config.n_bins)?;
    write_json(&out.join("rho.json"), &histogram)?;
    println!(
        "profiled {} problems: expected reward {:.4}, p=0 mass {}, p=1 mass {}",
        profiles.len(),
        curation::expected_reward(&profiles),
        histogram.zero_count,
        histogram.one_count,
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// filter
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct FilterConfig {
    dataset: String,
    profiles: String,
    #[serde(default = "default_threshold")]
    threshold: f64,
}

fn cmd_filter(args: &CommonArgs) -> Result<()> {
    let config: FilterConfig = read_config(&args.config)?;
    let out = prepare_out(args)?;
    record_config(&out, &config)?;
    let problems = load_problems(&config.dataset)?;
    let profiles = read_profiles(Path::new(&config.profiles))
        .with_context(|| format!("reading profiles {}", config.profiles))?;

    let stage1 = stage1_filter(&profiles);
    let interior = effective_signal_filter(&profiles);
    write_json(&out.join("stage1_ids.json"), &stage1)?;
    write_json(&out.join("interior_ids.json"), &interior)?;

    let keep = |ids: &[String]| {
        let set: std::collections::HashSet<&str> = ids.iter().map(|s| s.as_str()).collect();
        problems.iter().filter(|p| set.contains(p.id.as_str())).cloned().collect::<Vec<_>>()
    };
    write_dataset(&out.join("stage1_dataset.jsonl"), &keep(&stage1))?;
    write_dataset(&out.join("interior_dataset.jsonl"), &keep(&interior))?;

    // Per-(domain, level) pass rate from the profiles, then the cutoff rule.
    let by_id: BTreeMap<&str, &rlvr_core::tasks::Problem> =
        problems.iter().map(|p| (p.id.as_str(), p)).collect();
    let mut acc: BTreeMap<(String, u32), (f64, usize)> = BTreeMap::new();
    for profile in &profiles {
        if let Some(p) = by_id.get(profile.problem_id.as_str()) {
            let slot = acc.entry((p.domain.tag().to_string(), p.difficulty)).or_insert((0.0, 0));
            slot.0 += profile.p_hat;
            slot.1 += 1;
        }
    }
    let pass1: BTreeMap<(String, u32), f64> =
        acc.into_iter().map(|(k, (sum, n))| (k, sum / n as f64)).collect();
    let cutoffs = stage2_cutoffs(&pass1, config.threshold)?;
    write_json(&out.join("cutoffs.json"), &cutoffs)?;
    println!(
        "stage1 kept {} of {}; interior kept {}",
        stage1.len(),
        profiles.len(),
        interior.len()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

fn cmd_train(args: &CommonArgs) -> Result<()> {
    let mut config: TrainConfig = read_config(&args.config)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(budget) = args.budget {
        config.max_tokens = budget;
    }
    let out = prepare_out(args)?;
    record_config(&out, &config)?;
    let vocab = Vocabulary::standard();
    let problems = load_problems(&config.dataset)?;
    let val_problems = match &config.val_dataset {
        Some(path) => Some(load_problems(path)?),
        None => None,
    };
    let initial = load_params(&config.init_checkpoint, config.window, &vocab)?;

    let ckpt_dir = out.join("checkpoints");
    fs::create_dir_all(&ckpt_dir)?;
    let steps_file = File::create(out.join("steps.jsonl"))?;
    let mut steps_writer = BufWriter::new(steps_file);

    let result = run_stage(
        &config,
        &vocab,
        initial,
        &problems,
        val_problems.as_deref(),
        |record| {
            // Telemetry is append-only; one record per step.
            serde_json::to_writer(&mut steps_writer, record).expect("serializing step record");
            steps_writer.write_all(b"\n").expect("writing step record");
        },
    )?;
    steps_writer.flush()?;
    save_checkpoint(&ckpt_dir.join("final.json"), &result.params)?;
    let last = result.log.last();
    println!(
        "trained {} steps; final mean reward {:.4}, mean length {:.2}",
        result.log.len(),
        last.map_or(0.0, |r| r.mean_reward),
        last.map_or(0.0, |r| r.mean_length),
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// eval / sweep
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct EvalConfig {
    dataset: String,
    #[serde(default)]
    checkpoint: Option<String>,
    budget: usize,
    #[serde(default = "default_k")]
    k: usize,
    #[serde(default = "default_k")]
    n_samples: usize,
    seed: u64,
    #[serde(default = "default_window")]
    window: usize,
    #[serde(default = "default_benchmark")]
    benchmark: String,
}

fn cmd_eval(args: &CommonArgs) -> Result<()> {
    let mut config: EvalConfig = read_config(&args.config)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(budget) = args.budget {
        config.budget = budget;
    }
    let out = prepare_out(args)?;
    record_config(&out, &config)?;
    let vocab = Vocabulary::standard();
    let problems = load_problems(&config.dataset)?;
    let params = load_params(&config.checkpoint, config.window, &vocab)?;
    let report = evaluate(
        &params,
        &problems,
        &vocab,
        config.budget,
        config.k,
        config.n_samples,
        config.seed,
        &config.benchmark,
    )?;
    let eval_dir = out.join("eval");
    fs::create_dir_all(&eval_dir)?;
    write_json(&eval_dir.join("report.json"), &report)?;
    println!(
        "pass@1 {:.4}, pass@{} {:.4}, mean length {:.2}, truncation {:.3}",
        report.pass1, report.k, report.pass_k, report.mean_length, report.truncation_ratio
    );
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct SweepConfig {
    dataset: String,
    #[serde(default)]
    checkpoint: Option<String>,
    budgets: Vec<usize>,
    #[serde(default = "default_k")]
    k: usize,
    #[serde(default = "default_k")]
    n_samples: usize,
    seed: u64,
    #[serde(default = "default_window")]
    window: usize,
    #[serde(default = "default_benchmark")]
    benchmark: String,
}

fn cmd_sweep(args: &CommonArgs) -> Result<()> {
    let mut config: SweepConfig = read_config(&args.config)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(budget) = args.budget {
        config.budgets = vec![budget];
    }
    let out = prepare_out(args)?;
    record_config(&out, &config)?;
    let vocab = Vocabulary::standard();
    let problems = load_problems(&config.dataset)?;
    let params = load_params(&config.checkpoint, config.window, &vocab)?;
    let reports = budget_sweep(
        &params,
        &problems,
        &vocab,
        &config.budgets,
        config.k,
        config.n_samples,
        config.seed,
        &config.benchmark,
    )?;
    let eval_dir = out.join("eval");
    fs::create_dir_all(&eval_dir)?;
    write_json(&eval_dir.join("sweep.json"), &reports)?;
    for r in &reports {
        println!("budget {:>6}: pass@1 {:.4}, mean length {:.2}", r.budget, r.pass1, r.mean_length);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// eaa
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct EaaCliConfig {
    /// CSV with header `model,benchmark,accuracy,mean_length`.
    table: String,
    #[serde(default = "default_gamma")]
    gamma: f64,
}

fn parse_eaa_csv(text: &str) -> Result<Vec<EaaRow>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| anyhow!("empty EAA table"))?;
    let expected = "model,benchmark,accuracy,mean_length";
    if header.trim() != expected {
        return Err(anyhow!("bad EAA table header {header:?}; expected {expected:?}"));
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(anyhow!("row {}: expected 4 fields, got {}", i + 2, fields.len()));
        }
        rows.push(EaaRow {
            model: fields[0].trim().to_string(),
            benchmark: fields[1].trim().to_string(),
            accuracy: fields[2].trim().parse().with_context(|| format!("row {}", i + 2))?,
            mean_length: fields[3].trim().parse().with_context(|| format!("row {}", i + 2))?,
        });
    }
    Ok(rows)
}

fn cmd_eaa(args: &CommonArgs) -> Result<()> {
    let config: EaaCliConfig = read_config(&args.config)?;
    let out = prepare_out(args)?;
    record_config(&out, &config)?;
    let text = fs::read_to_string(&config.table)
        .with_context(|| format!("reading table {}", config.table))?;
    let rows = parse_eaa_csv(&text)?;
    let scored = append_eaa(&rows, config.gamma)?;
    let eval_dir = out.join("eval");
    fs::create_dir_all(&eval_dir)?;
    let file = File::create(eval_dir.join("eaa.csv"))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "model,benchmark,accuracy,mean_length,eaa")?;
    for row in &scored {
        writeln!(
            w,
            "{},{},{},{},{:.4}",
            row.model, row.benchmark, row.accuracy, row.mean_length, row.eaa
        )?;
    }
    w.flush()?;
    println!("scored {} rows", scored.len());
    Ok(())
}

// ---------------------------------------------------------------------------
// entropy-check
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct EntropyCheckConfig {
    /// Non-special tokens of the diagnostic vocabulary.
    #[serde(default = "default_extra_tokens")]
    extra_tokens: Vec<String>,
    #[serde(default = "default_entropy_window")]
    window: usize,
    #[serde(default = "default_horizon")]
    horizon: usize,
    #[serde(default = "default_n_policies")]
    n_policies: usize,
    #[serde(default = "default_scale")]
    scale: f64,
    seed: u64,
}

fn default_extra_tokens() -> Vec<String> {
    vec!["7".into()]
}

fn default_entropy_window() -> usize {
    2
}

fn default_horizon() -> usize {
    6
}

fn default_n_policies() -> usize {
    20
}

fn default_scale() -> f64 {
    1.2
}

#[derive(Debug, Serialize)]
struct EntropySummary {
    n_policies: usize,
    all_monotone: bool,
    max_violation: f64,
    max_telescope_error: f64,
}

fn cmd_entropy_check(args: &CommonArgs) -> Result<()> {
    let mut config: EntropyCheckConfig = read_config(&args.config)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    let out = prepare_out(args)?;
    record_config(&out, &config)?;
    let extra: Vec<&str> = config.extra_tokens.iter().map(|s| s.as_str()).collect();
    let vocab = Vocabulary::minimal(&extra)?;
    let spec = FeatureSpec::new(config.window, vocab.size());
    let answer_map = boxed_answer_map(&vocab);

    let file = File::create(out.join("traces.jsonl"))?;
    let mut w = BufWriter::new(file);
    let mut max_violation = 0.0f64;
    let mut max_telescope = 0.0f64;
    let mut all_ok = true;
    for i in 0..config.n_policies {
        let mut rng = rng_from(&[config.seed, i as u64]);
        let params = PolicyParams::random(spec, config.scale, &mut rng);
        let trace = exact_entropy_trace(
            &params,
            &format!("policy-{i}"),
            &[],
            vocab.eos(),
            config.horizon,
            &answer_map,
        )?;
        let report = monotonicity_check(&trace.conditional_entropies);
        all_ok &= report.ok;
        max_violation = max_violation.max(report.max_violation);
        let telescoped: f64 = trace.information_gains.iter().sum();
        let span = trace.conditional_entropies.first().unwrap()
            - trace.conditional_entropies.last().unwrap();
        max_telescope = max_telescope.max((telescoped - span).abs());
        serde_json::to_writer(&mut w, &trace)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    let summary = EntropySummary {
        n_policies: config.n_policies,
        all_monotone: all_ok,
        max_violation,
        max_telescope_error: max_telescope,
    };
    write_json(&out.join("summary.json"), &summary)?;
    println!(
        "{} policies: max violation {:.3e}, max telescope error {:.3e}",
        config.n_policies, max_violation, max_telescope
    );
    if !all_ok {
        return Err(anyhow!("entropy monotonicity violated by {max_violation}"));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// compare
// ---------------------------------------------------------------------------

fn cmd_compare(args: &CommonArgs) -> Result<()> {
    let mut config: ComparisonConfig = read_config(&args.config)?;
    if let Some(seed) = args.seed {
        config.seeds = vec![seed];
    }
    if let Some(budget) = args.budget {
        config.max_tokens = budget;
    }
    let out = prepare_out(args)?;
    record_config(&out, &config)?;
    let vocab = Vocabulary::standard();

    let arms_dir = out.join("arms");
    fs::create_dir_all(&arms_dir)?;
    let mut writers: BTreeMap<(u64, String), BufWriter<File>> = BTreeMap::new();
    let summary = run_comparison(
        &config,
        &vocab,
        |seed, arm, record| {
            let key = (seed, arm.to_string());
            let writer = writers.entry(key).or_insert_with(|| {
                let path = arms_dir.join(format!("seed{seed}-{arm}-steps.jsonl"));
                BufWriter::new(File::create(path).expect("creating arm telemetry file"))
            });
            serde_json::to_writer(&mut *writer, record).expect("serializing step record");
            writer.write_all(b"\n").expect("writing step record");
        },
        |seed, arm, params| {
            let path = arms_dir.join(format!("seed{seed}-{arm}-final.json"));
            save_checkpoint(&path, params).expect("saving arm checkpoint");
        },
    )?;
    for (_, mut w) in writers {
        w.flush()?;
    }
    write_json(&out.join("summary.json"), &summary)?;
    println!(
        "easy-heavy: pass@1 {:.4} length {:.2} | hard-only: pass@1 {:.4} length {:.2} | ratio {:.3}",
        summary.mean_easy_pass1,
        summary.mean_easy_length,
        summary.mean_hard_pass1,
        summary.mean_hard_length,
        summary.length_ratio
    );
    Ok(())
}
