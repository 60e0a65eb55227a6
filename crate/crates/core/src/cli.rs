//! Command-line harness tying the pipeline together.
//!
//! Eight subcommands cover the full loop: `gen-task` → `rollout` →
//! `annotate` → `select` → `align`, plus `train-classifier` (a learned
//! judge), `dynamics` (the probability-space simulator) and `report`
//! (artifact aggregation). Every command is a pure function of its input
//! files, resolved configuration and seed: reruns are byte-identical, and
//! `--workers` changes only wall-clock time, never bytes.
//!
//! Configuration: each command owns a flat key table (defaults listed in
//! the tables below). Values resolve as defaults → `--config` file →
//! explicit flags, and the fully-resolved configuration is written to
//! `<out>/run.config` next to the outputs. `--workers` and `--out` are
//! execution facts, not experiment parameters, so they are not config keys
//! and never appear in `run.config`.
//!
//! Exit codes: 0 success · 2 configuration or input error · 3 dataset
//! empty after filtering · 4 numerical violation (oversized step /
//! non-finite values). Progress goes to stderr; machine-readable output
//! only to files.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::alignment::{
    run_alignment, run_nu_sweep, DataMode, IterationSpec, OptimizerKind, TrainerConfig,
    WeightRefresh,
};
use crate::config::Resolver;
use crate::data::{
    annotate_records, build_train_set, generate_task, group_annotated, read_jsonl,
    sample_rollout_records, select_pair, train_classifier, write_jsonl, AnnotationRecord, Judge,
    LogisticClassifier, PairRecord, PromptRecord, RolloutRecord, SamplingConfig, Selection, Task,
    TaskConfig,
};
use crate::dynamics::{
    contrast_csv, contrast_setup, random_simplex_with_modal, run_offpolicy_trajectory,
    run_onpolicy_contrast, standard_support_probe, support_suppression_probe, trajectory_csv,
    ContrastConfig, DynamicsConfig, DynamicsMode, InitialDistribution, SupportProbeConfig,
};
use crate::policy::Policy;
use crate::report::{iteration_rates_csv, join_report, pair_rows_csv, summary_csv};
use crate::seeds;
use crate::{Error, Result};

#[derive(Parser)]
#[command(
    name = "alignlab",
    version,
    about = "Desk-scale preference-alignment laboratory"
)]
pub struct Cli {
    /// Worker threads for parallel prompt processing (default: all cores).
    /// Output bytes are identical for every value.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

// The parsed command is consumed once at startup; variant size is moot.
#[allow(clippy::large_enum_variant)]
#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic task (prompts.jsonl).
    GenTask(GenTaskArgs),
    /// Train the logistic hallucination classifier on oracle labels.
    TrainClassifier(TrainClassifierArgs),
    /// Sample K responses per prompt (rollouts.jsonl).
    Rollout(RolloutArgs),
    /// Judge rollouts (annotations.jsonl).
    Annotate(AnnotateArgs),
    /// Select preference pairs from judged rollouts (pairs.jsonl).
    Select(SelectArgs),
    /// Run iterative preference training (reports + checkpoints).
    Align(AlignArgs),
    /// Probability-space training dynamics experiments.
    Dynamics(DynamicsArgs),
    /// Aggregate pipeline artifacts into plot-ready tables.
    Report(ReportArgs),
}

/// Shared --config/--out plumbing.
#[derive(Args)]
struct CommonArgs {
    /// Flat `key = value` config file; flags override file values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (created if missing).
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct GenTaskArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    seed: Option<u64>,
    /// Number of prompts.
    #[arg(long)]
    n: Option<usize>,
    /// Vocabulary size (required).
    #[arg(long)]
    vocab: Option<usize>,
    /// Fraction of the vocabulary in each prompt's hallucinated set.
    #[arg(long)]
    halluc_fraction: Option<f64>,
    /// Cross-prompt correlation sharpness of hallucinated sets.
    #[arg(long)]
    halluc_sharpness: Option<f64>,
    /// Ground-truth content tokens before the terminal end token.
    #[arg(long)]
    gt_len: Option<usize>,
}

const GEN_TASK_KEYS: &[(&str, &str)] = &[
    ("gt_len", "3"),
    ("halluc_fraction", "0.25"),
    ("halluc_sharpness", "6"),
    ("n", "64"),
    ("seed", "7"),
    ("vocab", ""),
];

#[derive(Args)]
struct TrainClassifierArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    seed: Option<u64>,
    /// Task file (required).
    #[arg(long)]
    prompts: Option<PathBuf>,
    /// Vocabulary size (required, must match the task).
    #[arg(long)]
    vocab: Option<usize>,
    /// Labeled examples to sample.
    #[arg(long)]
    examples: Option<usize>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    max_len: Option<usize>,
    /// Held-out validation fraction.
    #[arg(long)]
    val_fraction: Option<f64>,
    /// Gradient-descent learning rate.
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Sampler policy feature dimension.
    #[arg(long)]
    dim: Option<usize>,
    /// Sampler policy context window.
    #[arg(long)]
    window: Option<usize>,
    /// Sampler policy init scale.
    #[arg(long)]
    init_scale: Option<f64>,
}

const TRAIN_CLASSIFIER_KEYS: &[(&str, &str)] = &[
    ("dim", "24"),
    ("epochs", "300"),
    ("eta", "0.2"),
    ("examples", "2000"),
    ("init_scale", "0.4"),
    ("max_len", "8"),
    ("prompts", ""),
    ("seed", "7"),
    ("temperature", "1"),
    ("val_fraction", "0.2"),
    ("vocab", ""),
    ("window", "3"),
];

#[derive(Args)]
struct RolloutArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    seed: Option<u64>,
    /// Task file (required).
    #[arg(long)]
    prompts: Option<PathBuf>,
    /// Vocabulary size (required, must match the task).
    #[arg(long)]
    vocab: Option<usize>,
    /// Responses per prompt.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    max_len: Option<usize>,
    /// Resampling round index (part of the RNG stream).
    #[arg(long)]
    round: Option<u64>,
    /// Policy checkpoint to sample from (default: seeded initial policy).
    #[arg(long)]
    policy: Option<PathBuf>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    init_scale: Option<f64>,
}

const ROLLOUT_KEYS: &[(&str, &str)] = &[
    ("dim", "24"),
    ("init_scale", "0.4"),
    ("k", "5"),
    ("max_len", "8"),
    ("policy", ""),
    ("prompts", ""),
    ("round", "0"),
    ("seed", "7"),
    ("temperature", "1"),
    ("vocab", ""),
    ("window", "3"),
];

#[derive(Args)]
struct AnnotateArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Seed for judge label noise (unused when epsilon = 0).
    #[arg(long)]
    seed: Option<u64>,
    /// Task file (required).
    #[arg(long)]
    prompts: Option<PathBuf>,
    /// Vocabulary size (required, must match the task).
    #[arg(long)]
    vocab: Option<usize>,
    /// Rollouts file (required).
    #[arg(long)]
    rollouts: Option<PathBuf>,
    /// Judge kind: oracle | classifier.
    #[arg(long)]
    judge: Option<String>,
    /// Oracle label-flip probability.
    #[arg(long)]
    epsilon: Option<f64>,
    /// Oracle soft scores (delta / 1-delta instead of 0 / 1).
    #[arg(long)]
    soft: Option<bool>,
    /// Classifier checkpoint (required when judge = classifier).
    #[arg(long)]
    classifier: Option<PathBuf>,
}

const ANNOTATE_KEYS: &[(&str, &str)] = &[
    ("classifier", ""),
    ("epsilon", "0"),
    ("judge", "oracle"),
    ("prompts", ""),
    ("rollouts", ""),
    ("seed", "7"),
    ("soft", "false"),
    ("vocab", ""),
];

#[derive(Args)]
struct SelectArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Rollouts file (required).
    #[arg(long)]
    rollouts: Option<PathBuf>,
    /// Annotations file (required).
    #[arg(long)]
    annotations: Option<PathBuf>,
    /// Judge-score admission threshold.
    #[arg(long)]
    tau: Option<f64>,
}

const SELECT_KEYS: &[(&str, &str)] = &[("annotations", ""), ("rollouts", ""), ("tau", "0.5")];

#[derive(Args)]
struct AlignArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    seed: Option<u64>,
    /// Task file (required).
    #[arg(long)]
    prompts: Option<PathBuf>,
    /// Vocabulary size (required, must match the task).
    #[arg(long)]
    vocab: Option<usize>,
    /// Initial policy checkpoint (default: seeded initial policy).
    #[arg(long)]
    policy: Option<PathBuf>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    init_scale: Option<f64>,
    /// Preset schedule; `paper` = off-policy warm start then weighted
    /// on-policy iteration. Overrides the per-iteration keys below.
    #[arg(long)]
    recipe: Option<String>,
    /// Number of identical iterations (custom schedule).
    #[arg(long)]
    iterations: Option<usize>,
    /// Data mode per iteration: onpolicy | offpolicy.
    #[arg(long)]
    data_mode: Option<String>,
    #[arg(long)]
    beta: Option<f64>,
    /// Tie-strength nu for weighted training; empty = plain preference loss.
    #[arg(long)]
    nu: Option<f64>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    nll_weight: Option<f64>,
    /// Weight refresh: step | epoch.
    #[arg(long)]
    weight_refresh: Option<String>,
    /// Optimizer: sgd | adam.
    #[arg(long)]
    optimizer: Option<String>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    holdout_fraction: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    /// Responses per prompt when building datasets.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    max_len: Option<usize>,
    /// Extra sampling rounds for the off-policy builder.
    #[arg(long)]
    retry_rounds: Option<usize>,
    /// Margin above which a pair counts as easy.
    #[arg(long)]
    m_easy: Option<f64>,
    /// Margin below which a pair counts as hard.
    #[arg(long)]
    m_hard: Option<f64>,
    /// Judge kind: oracle | classifier.
    #[arg(long)]
    judge: Option<String>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    soft: Option<bool>,
    #[arg(long)]
    classifier: Option<PathBuf>,
    /// Comma-separated nu values; when set, runs the nu sweep instead of a
    /// single schedule.
    #[arg(long)]
    sweep_nus: Option<String>,
}

const ALIGN_KEYS: &[(&str, &str)] = &[
    ("batch_size", "8"),
    ("beta", "0.1"),
    ("classifier", ""),
    ("data_mode", "onpolicy"),
    ("dim", "24"),
    ("epochs", "5"),
    ("epsilon", "0"),
    ("eta", "0.5"),
    ("holdout_fraction", "0.2"),
    ("init_scale", "0.4"),
    ("iterations", "1"),
    ("judge", "oracle"),
    ("k", "5"),
    ("m_easy", "2"),
    ("m_hard", "-2"),
    ("max_len", "8"),
    ("nll_weight", "0"),
    ("nu", ""),
    ("optimizer", "sgd"),
    ("policy", ""),
    ("prompts", ""),
    ("recipe", ""),
    ("retry_rounds", "3"),
    ("seed", "7"),
    ("soft", "false"),
    ("sweep_nus", ""),
    ("tau", "0.5"),
    ("temperature", "1"),
    ("vocab", ""),
    ("weight_refresh", "step"),
    ("window", "3"),
];

#[derive(Args)]
struct DynamicsArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    seed: Option<u64>,
    /// Experiment: offpolicy | onpolicy-contrast | support-probe.
    #[arg(long)]
    mode: Option<String>,
    /// Integration route for offpolicy runs: euler | weight.
    #[arg(long)]
    space: Option<String>,
    /// Simulator vocabulary (offpolicy mode).
    #[arg(long)]
    vocab: Option<usize>,
    /// Comma-separated hallucinated token set, ascending (offpolicy mode).
    #[arg(long)]
    halluc: Option<String>,
    /// Clean training target token (offpolicy mode).
    #[arg(long)]
    target: Option<u32>,
    /// Steps per run; empty = mode default (200 offpolicy, 500 otherwise).
    #[arg(long)]
    steps: Option<usize>,
    /// Euler step size (offpolicy mode).
    #[arg(long)]
    step: Option<f64>,
    /// Number of seeded trajectories (offpolicy mode).
    #[arg(long)]
    trajectories: Option<usize>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    eta: Option<f64>,
    /// Sampling attempts per side per step (contrast mode).
    #[arg(long)]
    retries: Option<usize>,
    /// Negligible-probability ceiling (support-probe mode).
    #[arg(long)]
    ceiling: Option<f64>,
    #[arg(long)]
    max_len: Option<usize>,
}

const DYNAMICS_KEYS: &[(&str, &str)] = &[
    ("beta", "0.1"),
    ("ceiling", "0.001"),
    ("eta", "0.1"),
    ("halluc", "0"),
    ("max_len", "8"),
    ("mode", ""),
    ("retries", "32"),
    ("seed", "7"),
    ("space", "euler"),
    ("step", "0.05"),
    ("steps", ""),
    ("target", "1"),
    ("trajectories", "1"),
    ("vocab", "10"),
];

#[derive(Args)]
struct ReportArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Task file (required).
    #[arg(long)]
    prompts: Option<PathBuf>,
    /// Rollouts file (required).
    #[arg(long)]
    rollouts: Option<PathBuf>,
    /// Annotations file (required).
    #[arg(long)]
    annotations: Option<PathBuf>,
    /// Pairs file (required).
    #[arg(long)]
    pairs: Option<PathBuf>,
    /// Optional per-iteration training table to extract rates from.
    #[arg(long)]
    iterations: Option<PathBuf>,
    /// Optional weight-histogram table to re-emit alongside the report.
    #[arg(long)]
    weight_hist: Option<PathBuf>,
}

const REPORT_KEYS: &[(&str, &str)] = &[
    ("annotations", ""),
    ("iterations", ""),
    ("pairs", ""),
    ("prompts", ""),
    ("rollouts", ""),
    ("weight_hist", ""),
];

/// Parses argv and runs; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        // Clap prints its own message; usage errors exit 2, --help/--version 0.
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    if let Some(n) = cli.workers {
        if n > 0 {
            // Ignore "already initialized": only possible if the embedding
            // process configured rayon first, which is fine.
            let _ = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global();
        }
    }
    let outcome = match &cli.command {
        Command::GenTask(a) => cmd_gen_task(a),
        Command::TrainClassifier(a) => cmd_train_classifier(a),
        Command::Rollout(a) => cmd_rollout(a),
        Command::Annotate(a) => cmd_annotate(a),
        Command::Select(a) => cmd_select(a),
        Command::Align(a) => cmd_align(a),
        Command::Dynamics(a) => cmd_dynamics(a),
        Command::Report(a) => cmd_report(a),
    };
    match outcome {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_degenerate_data() {
                3
            } else if e.is_numerical() {
                4
            } else {
                2
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Resolution helpers
// ---------------------------------------------------------------------------

type Override = (&'static str, Option<String>);

fn opt<T: ToString>(key: &'static str, value: &Option<T>) -> Override {
    (key, value.as_ref().map(|v| v.to_string()))
}

fn opt_path(key: &'static str, value: &Option<PathBuf>) -> Override {
    (key, value.as_ref().map(|p| p.display().to_string()))
}

fn resolve(
    keys: &'static [(&'static str, &'static str)],
    common: &CommonArgs,
    overrides: Vec<Override>,
) -> Result<Resolver> {
    let mut r = Resolver::new(keys);
    if let Some(path) = &common.config {
        let text = fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read config file {}: {e}", path.display()))
        })?;
        r.apply_file(&text)?;
    }
    for (key, value) in overrides {
        if let Some(value) = value {
            r.set(key, value)?;
        }
    }
    Ok(r)
}

/// A key that has no usable default; the error names both the key and its
/// flag spelling.
fn require<'a>(r: &'a Resolver, key: &str) -> Result<&'a str> {
    let value = r.get_str(key)?;
    if value.is_empty() {
        return Err(Error::Config(format!(
            "missing required config key `{key}` (set it in the config file or pass --{})",
            key.replace('_', "-")
        )));
    }
    Ok(value)
}

fn require_usize(r: &Resolver, key: &str) -> Result<usize> {
    require(r, key)?;
    r.get_usize(key)
}

fn prepare_out(common: &CommonArgs, r: &Resolver) -> Result<PathBuf> {
    fs::create_dir_all(&common.out)?;
    let path = common.out.join("run.config");
    fs::write(&path, r.resolved_text())?;
    Ok(common.out.clone())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text)?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn write_records<T: serde::Serialize>(path: &Path, records: &[T]) -> Result<()> {
    write_jsonl(path, records)?;
    eprintln!("wrote {} ({} records)", path.display(), records.len());
    Ok(())
}

fn load_task(r: &Resolver) -> Result<Task> {
    let prompts_path = require(r, "prompts")?;
    let vocab = require_usize(r, "vocab")?;
    let records: Vec<PromptRecord> = read_jsonl(Path::new(prompts_path))?;
    Task::from_prompts(vocab, records)
}

/// Initial policy: a checkpoint when `policy` is set, otherwise a seeded
/// random init with the configured shape.
fn load_policy(r: &Resolver, vocab: usize) -> Result<Policy> {
    let path = r.get_str("policy")?;
    if path.is_empty() {
        let seed = r.get_u64("seed")?;
        Policy::seeded_init(
            vocab,
            require_usize(r, "dim")?,
            r.get_usize("window")?,
            seeds::derive(seed, "features"),
            seed,
            r.get_f64("init_scale")?,
        )
    } else {
        let policy = Policy::load(Path::new(path))?;
        if policy.vocab() != vocab {
            return Err(Error::Config(format!(
                "policy checkpoint has vocabulary {} but the run is configured for {vocab}",
                policy.vocab()
            )));
        }
        Ok(policy)
    }
}

fn load_judge(r: &Resolver) -> Result<Judge> {
    match r.get_str("judge")? {
        "oracle" => Judge::oracle(
            r.get_f64("epsilon")?,
            r.get_bool("soft")?,
            r.get_u64("seed")?,
        ),
        "classifier" => {
            let path = require(r, "classifier")?;
            Ok(Judge::Learned(LogisticClassifier::load(Path::new(path))?))
        }
        other => Err(Error::Config(format!(
            "config key `judge`: expected oracle or classifier, got `{other}`"
        ))),
    }
}

fn sampling_config(r: &Resolver) -> Result<SamplingConfig> {
    Ok(SamplingConfig {
        k: r.get_usize("k")?,
        temperature: r.get_f64("temperature")?,
        max_len: r.get_usize("max_len")?,
    })
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

fn cmd_gen_task(a: &GenTaskArgs) -> Result<()> {
    let r = resolve(
        GEN_TASK_KEYS,
        &a.common,
        vec![
            opt("seed", &a.seed),
            opt("n", &a.n),
            opt("vocab", &a.vocab),
            opt("halluc_fraction", &a.halluc_fraction),
            opt("halluc_sharpness", &a.halluc_sharpness),
            opt("gt_len", &a.gt_len),
        ],
    )?;
    let cfg = TaskConfig {
        n_prompts: r.get_usize("n")?,
        vocab: require_usize(&r, "vocab")?,
        halluc_fraction: r.get_f64("halluc_fraction")?,
        halluc_sharpness: r.get_f64("halluc_sharpness")?,
        gt_len: r.get_usize("gt_len")?,
        seed: r.get_u64("seed")?,
    };
    let task = generate_task(&cfg)?;
    let out = prepare_out(&a.common, &r)?;
    write_records(&out.join("prompts.jsonl"), task.prompts())
}

fn cmd_train_classifier(a: &TrainClassifierArgs) -> Result<()> {
    let r = resolve(
        TRAIN_CLASSIFIER_KEYS,
        &a.common,
        vec![
            opt("seed", &a.seed),
            opt_path("prompts", &a.prompts),
            opt("vocab", &a.vocab),
            opt("examples", &a.examples),
            opt("temperature", &a.temperature),
            opt("max_len", &a.max_len),
            opt("val_fraction", &a.val_fraction),
            opt("eta", &a.eta),
            opt("epochs", &a.epochs),
            opt("dim", &a.dim),
            opt("window", &a.window),
            opt("init_scale", &a.init_scale),
        ],
    )?;
    let task = load_task(&r)?;
    let seed = r.get_u64("seed")?;
    let sampler = Policy::seeded_init(
        task.vocab(),
        r.get_usize("dim")?,
        r.get_usize("window")?,
        seeds::derive(seed, "features"),
        seed,
        r.get_f64("init_scale")?,
    )?;
    eprintln!("sampling {} labeled examples", r.get_usize("examples")?);
    let set = build_train_set(
        &task,
        &sampler,
        r.get_usize("examples")?,
        r.get_f64("temperature")?,
        r.get_usize("max_len")?,
        r.get_f64("val_fraction")?,
        seed,
    )?;
    let trained = train_classifier(&set, r.get_f64("eta")?, r.get_usize("epochs")?, seed)?;
    eprintln!(
        "held-out agreement {:.4} ({} train / {} validation)",
        trained.val_accuracy, trained.n_train, trained.n_val
    );
    let out = prepare_out(&a.common, &r)?;
    trained.classifier.save(&out.join("classifier.txt"))?;
    eprintln!("wrote {}", out.join("classifier.txt").display());
    let mut loss = String::from("epoch,train_loss\n");
    for (epoch, l) in trained.train_loss.iter().enumerate() {
        loss.push_str(&format!("{epoch},{l}\n"));
    }
    write_text(&out.join("classifier_loss.csv"), &loss)?;
    write_text(
        &out.join("classifier_summary.csv"),
        &format!(
            "val_accuracy,n_train,n_val\n{},{},{}\n",
            trained.val_accuracy, trained.n_train, trained.n_val
        ),
    )
}

fn cmd_rollout(a: &RolloutArgs) -> Result<()> {
    let r = resolve(
        ROLLOUT_KEYS,
        &a.common,
        vec![
            opt("seed", &a.seed),
            opt_path("prompts", &a.prompts),
            opt("vocab", &a.vocab),
            opt("k", &a.k),
            opt("temperature", &a.temperature),
            opt("max_len", &a.max_len),
            opt("round", &a.round),
            opt_path("policy", &a.policy),
            opt("dim", &a.dim),
            opt("window", &a.window),
            opt("init_scale", &a.init_scale),
        ],
    )?;
    let task = load_task(&r)?;
    let policy = load_policy(&r, task.vocab())?;
    let rollouts = sample_rollout_records(
        &policy,
        &task,
        &sampling_config(&r)?,
        r.get_u64("seed")?,
        r.get_u64("round")?,
    )?;
    let out = prepare_out(&a.common, &r)?;
    write_records(&out.join("rollouts.jsonl"), &rollouts)
}

fn cmd_annotate(a: &AnnotateArgs) -> Result<()> {
    let r = resolve(
        ANNOTATE_KEYS,
        &a.common,
        vec![
            opt("seed", &a.seed),
            opt_path("prompts", &a.prompts),
            opt("vocab", &a.vocab),
            opt_path("rollouts", &a.rollouts),
            opt("judge", &a.judge),
            opt("epsilon", &a.epsilon),
            opt("soft", &a.soft),
            opt_path("classifier", &a.classifier),
        ],
    )?;
    let task = load_task(&r)?;
    let rollouts: Vec<RolloutRecord> = read_jsonl(Path::new(require(&r, "rollouts")?))?;
    let judge = load_judge(&r)?;
    let annotations = annotate_records(&judge, &task, &rollouts)?;
    let out = prepare_out(&a.common, &r)?;
    write_records(&out.join("annotations.jsonl"), &annotations)
}

fn cmd_select(a: &SelectArgs) -> Result<()> {
    let r = resolve(
        SELECT_KEYS,
        &a.common,
        vec![
            opt_path("rollouts", &a.rollouts),
            opt_path("annotations", &a.annotations),
            opt("tau", &a.tau),
        ],
    )?;
    let rollouts: Vec<RolloutRecord> = read_jsonl(Path::new(require(&r, "rollouts")?))?;
    let annotations: Vec<AnnotationRecord> = read_jsonl(Path::new(require(&r, "annotations")?))?;
    let tau = r.get_f64("tau")?;
    let sets = group_annotated(&rollouts, &annotations)?;
    let mut pairs = Vec::new();
    let mut stats = [0usize; 4];
    for set in &sets {
        match select_pair(set, tau)? {
            Selection::Admitted(pair) => {
                stats[0] += 1;
                pairs.push(PairRecord {
                    prompt_id: pair.prompt,
                    chosen: pair.chosen.tokens,
                    rejected: pair.rejected.tokens,
                    p_chosen: pair.p_chosen,
                    p_rejected: pair.p_rejected,
                });
            }
            Selection::AllClean => stats[1] += 1,
            Selection::AllHallucinated => stats[2] += 1,
            Selection::Degenerate => stats[3] += 1,
        }
    }
    eprintln!(
        "admitted {} of {} prompts ({} all-clean, {} all-hallucinated, {} degenerate)",
        stats[0],
        sets.len(),
        stats[1],
        stats[2],
        stats[3]
    );
    let out = prepare_out(&a.common, &r)?;
    write_records(&out.join("pairs.jsonl"), &pairs)?;
    write_text(
        &out.join("select_stats.csv"),
        &format!(
            "admitted,all_clean,all_hallucinated,degenerate\n{},{},{},{}\n",
            stats[0], stats[1], stats[2], stats[3]
        ),
    )
}

fn parse_data_mode(s: &str) -> Result<DataMode> {
    match s {
        "onpolicy" => Ok(DataMode::OnPolicy),
        "offpolicy" => Ok(DataMode::OffPolicyGroundTruth),
        other => Err(Error::Config(format!(
            "config key `data_mode`: expected onpolicy or offpolicy, got `{other}`"
        ))),
    }
}

fn parse_weight_refresh(s: &str) -> Result<WeightRefresh> {
    match s {
        "step" => Ok(WeightRefresh::Step),
        "epoch" => Ok(WeightRefresh::Epoch),
        other => Err(Error::Config(format!(
            "config key `weight_refresh`: expected step or epoch, got `{other}`"
        ))),
    }
}

fn parse_optimizer(s: &str) -> Result<OptimizerKind> {
    match s {
        "sgd" => Ok(OptimizerKind::Sgd),
        "adam" => Ok(OptimizerKind::Adam),
        other => Err(Error::Config(format!(
            "config key `optimizer`: expected sgd or adam, got `{other}`"
        ))),
    }
}

fn trainer_config(r: &Resolver) -> Result<TrainerConfig> {
    let seed = r.get_u64("seed")?;
    match r.get_str("recipe")? {
        "" => {
            let spec = IterationSpec {
                data_mode: parse_data_mode(r.get_str("data_mode")?)?,
                beta: r.get_f64("beta")?,
                nu: r.get_opt_f64("nu")?,
                eta: r.get_f64("eta")?,
                epochs: r.get_usize("epochs")?,
                nll_weight: r.get_f64("nll_weight")?,
                weight_refresh: parse_weight_refresh(r.get_str("weight_refresh")?)?,
            };
            Ok(TrainerConfig {
                sampling: sampling_config(r)?,
                tau: r.get_f64("tau")?,
                holdout_fraction: r.get_f64("holdout_fraction")?,
                batch_size: r.get_usize("batch_size")?,
                retry_rounds: r.get_usize("retry_rounds")?,
                m_easy: r.get_f64("m_easy")?,
                m_hard: r.get_f64("m_hard")?,
                optimizer: parse_optimizer(r.get_str("optimizer")?)?,
                seed,
                iterations: vec![spec; r.get_usize("iterations")?.max(1)],
            })
        }
        "paper" => Ok(TrainerConfig::preset_paper(seed)),
        other => Err(Error::Config(format!(
            "config key `recipe`: expected empty or `paper`, got `{other}`"
        ))),
    }
}

fn cmd_align(a: &AlignArgs) -> Result<()> {
    let r = resolve(
        ALIGN_KEYS,
        &a.common,
        vec![
            opt("seed", &a.seed),
            opt_path("prompts", &a.prompts),
            opt("vocab", &a.vocab),
            opt_path("policy", &a.policy),
            opt("dim", &a.dim),
            opt("window", &a.window),
            opt("init_scale", &a.init_scale),
            opt("recipe", &a.recipe),
            opt("iterations", &a.iterations),
            opt("data_mode", &a.data_mode),
            opt("beta", &a.beta),
            opt("nu", &a.nu),
            opt("eta", &a.eta),
            opt("epochs", &a.epochs),
            opt("nll_weight", &a.nll_weight),
            opt("weight_refresh", &a.weight_refresh),
            opt("optimizer", &a.optimizer),
            opt("batch_size", &a.batch_size),
            opt("holdout_fraction", &a.holdout_fraction),
            opt("tau", &a.tau),
            opt("k", &a.k),
            opt("temperature", &a.temperature),
            opt("max_len", &a.max_len),
            opt("retry_rounds", &a.retry_rounds),
            opt("m_easy", &a.m_easy),
            opt("m_hard", &a.m_hard),
            opt("judge", &a.judge),
            opt("epsilon", &a.epsilon),
            opt("soft", &a.soft),
            opt_path("classifier", &a.classifier),
            opt("sweep_nus", &a.sweep_nus),
        ],
    )?;
    let task = load_task(&r)?;
    let initial = load_policy(&r, task.vocab())?;
    let judge = load_judge(&r)?;
    let cfg = trainer_config(&r)?;
    let out = prepare_out(&a.common, &r)?;

    let nus = r.get_f64_list("sweep_nus")?;
    if !nus.is_empty() {
        eprintln!("running nu sweep over {nus:?}");
        let margins: Vec<f64> = (0..=64).map(|i| -8.0 + 0.25 * i as f64).collect();
        let report = run_nu_sweep(&initial, &task, &judge, &cfg, &nus, &margins)?;
        write_text(&out.join("sweep_curve.csv"), &report.curve_csv())?;
        return write_text(&out.join("sweep_runs.csv"), &report.runs_csv());
    }

    eprintln!(
        "training {} iteration(s) on {} prompts",
        cfg.iterations.len(),
        task.prompts().len()
    );
    let outcome = run_alignment(&initial, &task, &judge, &cfg)?;
    for row in &outcome.report.iterations {
        eprintln!(
            "iteration {} ({}): {} pairs, hallucination rate {:.4}",
            row.iteration, row.data_mode, row.pairs, row.halluc_rate
        );
    }
    write_text(&out.join("epochs.csv"), &outcome.report.epochs_csv())?;
    write_text(
        &out.join("iterations.csv"),
        &outcome.report.iterations_csv(),
    )?;
    write_text(
        &out.join("weight_hist.csv"),
        &outcome.report.weight_hist_csv(),
    )?;
    for (ix, policy) in outcome.iteration_policies.iter().enumerate() {
        let path = out.join(format!("policy_iter_{:03}.txt", ix + 1));
        policy.save(&path)?;
        eprintln!("wrote {}", path.display());
    }
    outcome.policy.save(&out.join("policy.txt"))?;
    eprintln!("wrote {}", out.join("policy.txt").display());
    Ok(())
}

fn parse_space(s: &str) -> Result<DynamicsMode> {
    match s {
        "euler" => Ok(DynamicsMode::EulerProbabilitySpace),
        "weight" => Ok(DynamicsMode::GradientWeightSpace),
        other => Err(Error::Config(format!(
            "config key `space`: expected euler or weight, got `{other}`"
        ))),
    }
}

fn steps_or(r: &Resolver, fallback: usize) -> Result<usize> {
    if r.get_str("steps")?.is_empty() {
        Ok(fallback)
    } else {
        r.get_usize("steps")
    }
}

fn cmd_dynamics(a: &DynamicsArgs) -> Result<()> {
    let r = resolve(
        DYNAMICS_KEYS,
        &a.common,
        vec![
            opt("seed", &a.seed),
            opt("mode", &a.mode),
            opt("space", &a.space),
            opt("vocab", &a.vocab),
            opt("halluc", &a.halluc),
            opt("target", &a.target),
            opt("steps", &a.steps),
            opt("step", &a.step),
            opt("trajectories", &a.trajectories),
            opt("beta", &a.beta),
            opt("eta", &a.eta),
            opt("retries", &a.retries),
            opt("ceiling", &a.ceiling),
            opt("max_len", &a.max_len),
        ],
    )?;
    let seed = r.get_u64("seed")?;
    match require(&r, "mode")? {
        "offpolicy" => {
            let vocab = r.get_usize("vocab")?;
            let halluc_set = r.get_u32_list("halluc")?;
            let modal = *halluc_set.first().ok_or_else(|| {
                Error::Config("config key `halluc`: need at least one token".into())
            })?;
            let target = r.get_u32("target")?;
            let steps = steps_or(&r, 200)?;
            let trajectories = r.get_usize("trajectories")?.max(1);
            let space = parse_space(r.get_str("space")?)?;
            let out = prepare_out(&a.common, &r)?;
            let mut summaries = String::new();
            let mut first_csv: Option<String> = None;
            let mut total_ordering = 0usize;
            let mut total_lower = 0usize;
            for i in 0..trajectories {
                let run_seed = seeds::derive_indexed(seed, "trajectory", &[i as u64]);
                let cfg = DynamicsConfig {
                    vocab,
                    init: InitialDistribution::Explicit(random_simplex_with_modal(
                        vocab, modal, run_seed,
                    )?),
                    halluc_set: halluc_set.clone(),
                    step: r.get_f64("step")?,
                    steps,
                    mode: space,
                    seed: run_seed,
                    tracked: None,
                };
                let run = run_offpolicy_trajectory(&cfg, target)?;
                total_ordering += run.ordering_violations;
                total_lower += run.lower_bound_violations;
                summaries.push_str(&serde_json::to_string(&run.summary(&cfg))?);
                summaries.push('\n');
                if first_csv.is_none() {
                    first_csv = Some(trajectory_csv(&run));
                }
            }
            eprintln!(
                "{trajectories} trajectories: {total_ordering} ordering violations, {total_lower} lower-bound violations"
            );
            write_text(&out.join("summary.jsonl"), &summaries)?;
            write_text(
                &out.join("trajectory.csv"),
                &first_csv.expect("at least one trajectory"),
            )
        }
        "onpolicy-contrast" => {
            let setup = contrast_setup(seed)?;
            let cfg = ContrastConfig {
                beta: r.get_f64("beta")?,
                eta: r.get_f64("eta")?,
                steps: steps_or(&r, 500)?,
                sample_retries: r.get_usize("retries")?,
                seed,
            };
            let report = run_onpolicy_contrast(
                &setup.policy,
                setup.prompt,
                &setup.halluc_set,
                &setup.gt_sequence,
                &setup.rejected_sequence,
                &cfg,
            )?;
            eprintln!(
                "on-policy flip: {:?}; off-policy flip: {:?}",
                report.on_policy.first_flip_step, report.off_policy.first_flip_step
            );
            let out = prepare_out(&a.common, &r)?;
            write_text(&out.join("contrast.csv"), &contrast_csv(&report))?;
            let mut json = serde_json::to_string_pretty(&report.summary(seed))?;
            json.push('\n');
            write_text(&out.join("contrast_summary.json"), &json)
        }
        "support-probe" => {
            let max_len = r.get_usize("max_len")?;
            let probe = standard_support_probe(seed, max_len)?;
            let cfg = SupportProbeConfig {
                beta: r.get_f64("beta")?,
                eta: r.get_f64("eta")?,
                steps: steps_or(&r, 500)?,
                ceiling: r.get_f64("ceiling")?,
                max_len,
            };
            let report =
                support_suppression_probe(&probe.reference, probe.prompt, &probe.arms, &cfg)?;
            let out = prepare_out(&a.common, &r)?;
            let mut csv = String::from(
                "arm,generable,p_before,p_after,log_prob_before,log_prob_after\n",
            );
            for arm in &report.arms {
                eprintln!(
                    "{}: generation probability {:.3e} -> {:.3e}",
                    arm.label, arm.p_before, arm.p_after
                );
                csv.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    arm.label,
                    arm.generable,
                    arm.p_before,
                    arm.p_after,
                    arm.log_prob_before,
                    arm.log_prob_after
                ));
            }
            write_text(&out.join("probe.csv"), &csv)?;
            let mut json = serde_json::to_string_pretty(&report)?;
            json.push('\n');
            write_text(&out.join("probe.json"), &json)
        }
        other => Err(Error::Config(format!(
            "config key `mode`: expected offpolicy, onpolicy-contrast or support-probe, got `{other}`"
        ))),
    }
}

fn cmd_report(a: &ReportArgs) -> Result<()> {
    let r = resolve(
        REPORT_KEYS,
        &a.common,
        vec![
            opt_path("prompts", &a.prompts),
            opt_path("rollouts", &a.rollouts),
            opt_path("annotations", &a.annotations),
            opt_path("pairs", &a.pairs),
            opt_path("iterations", &a.iterations),
            opt_path("weight_hist", &a.weight_hist),
        ],
    )?;
    let prompts: Vec<PromptRecord> = read_jsonl(Path::new(require(&r, "prompts")?))?;
    let rollouts: Vec<RolloutRecord> = read_jsonl(Path::new(require(&r, "rollouts")?))?;
    let annotations: Vec<AnnotationRecord> = read_jsonl(Path::new(require(&r, "annotations")?))?;
    let pairs: Vec<PairRecord> = read_jsonl(Path::new(require(&r, "pairs")?))?;
    if pairs.is_empty() {
        eprintln!("warning: pairs file is empty; report has zero rows");
    }
    let joined = join_report(&prompts, &rollouts, &annotations, &pairs)?;
    let out = prepare_out(&a.common, &r)?;
    write_text(&out.join("report.csv"), &pair_rows_csv(&joined))?;
    write_text(&out.join("summary.csv"), &summary_csv(&joined))?;
    let iterations_path = r.get_str("iterations")?;
    if !iterations_path.is_empty() {
        let table = fs::read_to_string(iterations_path)?;
        write_text(
            &out.join("iteration_rates.csv"),
            &iteration_rates_csv(&table)?,
        )?;
    }
    let hist_path = r.get_str("weight_hist")?;
    if !hist_path.is_empty() {
        let text = fs::read_to_string(hist_path)?;
        if !text.starts_with("iteration,epoch,bin_lo,bin_hi,count") {
            return Err(Error::Config(format!(
                "file {hist_path} does not look like a weight-histogram table"
            )));
        }
        write_text(&out.join("weight_hist.csv"), &text)?;
    }
    Ok(())
}
