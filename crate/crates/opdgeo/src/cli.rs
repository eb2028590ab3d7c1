//! Experiment harness: config-driven subcommands that wire the task lab,
//! the geometry analyses, the quadratic oracle, and the extrapolation
//! accelerator into reproducible on-disk runs.
//!
//! Exit codes are a stable scripting contract: 0 success, 2 config error,
//! 3 runtime or numerical failure. The output root is `--out` when given,
//! else the `OPDGEO_OUT` environment variable, else `./runs`. Every emitted
//! table and report names the config digest and seed that produced it.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::effopd::{run_effopd, ScoreKind, TaskValidator, ValidationSet};
use crate::geometry::{
    alignment_trajectory, mean_summaries, norm_match_scale, summarize, ModuleKind, UpdateDelta,
};
use crate::intervene::{self, TruncationMode};
use crate::quadsim::{
    closed_form, iterate_gd, lockin_bound_check, random_concentrated_instance,
    random_oracle_instance, spd_with_spectrum, spectral_form, QuadraticModel,
};
use crate::store::{sha256_hex, MetricTableRef, RunDir, RunManifest};
use crate::toylab::{
    evaluate, make_base, make_teacher, train, PolicyConfig, SyntheticTask, TaskConfig,
    TeacherConfig, ToyPolicy, ToyTrainer, TrainConfig, TrainMode, TrainRun,
};

/// Top-k subspace depth used by the alignment analysis.
const ALIGN_K_MAX: usize = 4;
/// Repetitions per window in the sweep analysis.
const SWEEP_EVAL_REPS: usize = 4;

/// Process failure, split by exit code: 2 for configuration problems,
/// 3 for runtime or numerical ones.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Runtime(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Runtime(m) => write!(f, "runtime error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

#[derive(Parser, Debug)]
#[command(name = "opdgeo", version, about = "Parameter-update geometry laboratory")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Run seeded training runs described by a config file.
    Train(TrainArgs),
    /// Run analyses over a stored run directory.
    Analyze(AnalyzeArgs),
    /// Check the quadratic-theory oracles and bounds; write a JSON report.
    Quadsim(QuadsimArgs),
    /// Summarize the extrapolation event log of an accelerated run.
    EffopdReport(EffopdReportArgs),
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Output root; overrides OPDGEO_OUT.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Comma-separated seed list overriding the config's.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Parallel worker slots for multi-seed runs.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Args, Debug)]
pub struct AnalyzeArgs {
    /// Path to a run directory (runs/<id>).
    #[arg(long)]
    pub run: PathBuf,
    /// Comma-separated analysis selections; defaults to the run's config.
    #[arg(long, value_delimiter = ',')]
    pub analyses: Option<Vec<AnalysisKind>>,
}

#[derive(Args, Debug)]
pub struct QuadsimArgs {
    /// Optional oracle-check config (JSON); defaults match the test suite.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output root; overrides OPDGEO_OUT.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EffopdReportArgs {
    /// Path to an accelerated run directory (runs/<id>).
    #[arg(long)]
    pub run: PathBuf,
}

/// Which estimator a run trains with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum RunKind {
    Opd,
    Rl,
    Effopd,
}

impl std::fmt::Display for RunKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RunKind::Opd => write!(f, "opd"),
            RunKind::Rl => write!(f, "rl"),
            RunKind::Effopd => write!(f, "effopd"),
        }
    }
}

/// Analyses the `analyze` subcommand can emit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum AnalysisKind {
    /// Per-matrix spectral metrics of checkpoint deltas.
    Metrics,
    /// Top-k subspace alignment of each checkpoint against the final one.
    Align,
    /// Accuracy of spectrally truncated deltas.
    Truncate,
    /// Norm-matched early-checkpoint evaluation.
    Scale,
    /// Window sweeps over MLP and attention blocks.
    Sweep,
    /// Quadratic-theory oracle report.
    Quadsim,
}

impl std::fmt::Display for AnalysisKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            AnalysisKind::Metrics => "metrics",
            AnalysisKind::Align => "align",
            AnalysisKind::Truncate => "truncate",
            AnalysisKind::Scale => "scale",
            AnalysisKind::Sweep => "sweep",
            AnalysisKind::Quadsim => "quadsim",
        };
        write!(f, "{s}")
    }
}

/// One experiment, fully described: strict JSON (unknown keys rejected).
/// Optional training knobs default per mode; the stored per-run copy has
/// every field resolved.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: TaskConfig,
    pub model: PolicyConfig,
    pub mode: RunKind,
    pub seeds: Vec<u64>,
    pub steps: usize,
    pub ckpt_stride: usize,
    #[serde(default)]
    pub analyses: Vec<AnalysisKind>,
    #[serde(default)]
    pub out_dir: Option<String>,
    #[serde(default)]
    pub lr: Option<f64>,
    #[serde(default)]
    pub batch: Option<usize>,
    #[serde(default)]
    pub clamp_cap: Option<f64>,
    /// Validation score kind for accelerated runs.
    #[serde(default)]
    pub score: Option<ScoreKind>,
    #[serde(default = "default_teacher_seed")]
    pub teacher_seed: u64,
    #[serde(default = "default_base_seed")]
    pub base_seed: u64,
    #[serde(default = "default_base_target")]
    pub base_target_accuracy: f64,
}

fn default_teacher_seed() -> u64 {
    101
}

fn default_base_seed() -> u64 {
    7
}

fn default_base_target() -> f64 {
    0.35
}

impl ExperimentConfig {
    fn train_mode(&self) -> TrainMode {
        match self.mode {
            RunKind::Rl => TrainMode::Rl,
            RunKind::Opd | RunKind::Effopd => TrainMode::Opd,
        }
    }

    /// The concrete per-run config: mode defaults filled in, seed list
    /// narrowed to this run's seed. This is what the run directory embeds
    /// and what the config digest hashes.
    pub fn resolved_for_seed(&self, seed: u64) -> ExperimentConfig {
        let defaults = TrainConfig::for_mode(self.train_mode());
        let mut c = self.clone();
        c.lr.get_or_insert(defaults.lr);
        c.batch.get_or_insert(defaults.batch);
        c.clamp_cap.get_or_insert(defaults.clamp_cap);
        if matches!(c.mode, RunKind::Effopd) {
            c.score.get_or_insert(ScoreKind::Accuracy);
        }
        c.seeds = vec![seed];
        c
    }

    pub fn digest(&self) -> String {
        let mut bytes = serde_json::to_vec_pretty(self).expect("config serializes");
        bytes.push(b'\n');
        sha256_hex(&bytes)
    }

    fn train_config(&self, seed: u64) -> TrainConfig {
        let mut cfg = TrainConfig::for_mode(self.train_mode());
        cfg.seed = seed;
        cfg.steps = self.steps;
        cfg.ckpt_stride = self.ckpt_stride;
        if let Some(lr) = self.lr {
            cfg.lr = lr;
        }
        if let Some(batch) = self.batch {
            cfg.batch = batch;
        }
        if let Some(cap) = self.clamp_cap {
            cfg.clamp_cap = cap;
        }
        cfg
    }

    fn validate(&self) -> Result<(), CliError> {
        if self.seeds.is_empty() {
            return Err(CliError::Config("seeds list is empty".into()));
        }
        if self.steps == 0 {
            return Err(CliError::Config("steps must be at least 1".into()));
        }
        self.model.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.train_config(self.seeds[0])
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        let task = SyntheticTask::new(self.task.clone())
            .map_err(|e| CliError::Config(e.to_string()))?;
        if self.model.vocab_size < task.min_vocab() {
            return Err(CliError::Config(format!(
                "model vocab_size {} is below the task's minimum {}",
                self.model.vocab_size,
                task.min_vocab()
            )));
        }
        if self.model.context_len + 1 < task.max_seq_len() {
            return Err(CliError::Config(format!(
                "model context_len {} cannot hold task sequences of length {}",
                self.model.context_len,
                task.max_seq_len()
            )));
        }
        Ok(())
    }
}

/// Resolve the output root: flag, then OPDGEO_OUT, then ./runs.
pub fn out_root(flag: &Option<PathBuf>) -> PathBuf {
    if let Some(p) = flag {
        return p.clone();
    }
    if let Ok(env) = std::env::var("OPDGEO_OUT") {
        if !env.is_empty() {
            return PathBuf::from(env);
        }
    }
    PathBuf::from("runs")
}

fn read_json_file<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let bytes = std::fs::read(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_slice(&bytes)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn named_header(config_digest: &str, seed: u64) -> String {
    format!("# config_digest={config_digest} seed={seed}\n")
}

/// Dispatch a parsed command line.
pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train(args) => cmd_train(&args),
        Command::Analyze(args) => cmd_analyze(&args),
        Command::Quadsim(args) => cmd_quadsim(&args),
        Command::EffopdReport(args) => cmd_effopd_report(&args),
    }
}

struct RunOutcome {
    run_id: String,
    manifest_digest: String,
    final_accuracy: f64,
}

/// Train every requested seed, one isolated run directory each.
pub fn cmd_train(args: &TrainArgs) -> Result<(), CliError> {
    let mut config: ExperimentConfig = read_json_file(&args.config)?;
    if let Some(seeds) = &args.seeds {
        config.seeds = seeds.clone();
    }
    config.validate()?;
    let root = match &config.out_dir {
        Some(dir) if args.out.is_none() && std::env::var_os("OPDGEO_OUT").is_none() => {
            PathBuf::from(dir)
        }
        _ => out_root(&args.out),
    };

    let task = SyntheticTask::new(config.task.clone()).map_err(runtime)?;
    let teacher = make_teacher(
        &task,
        &TeacherConfig {
            policy: config.model.clone(),
            seed: config.teacher_seed,
            ..TeacherConfig::default()
        },
    )
    .map_err(runtime)?;
    let base = make_base(
        &task,
        config.model.clone(),
        config.base_seed,
        config.base_target_accuracy,
    )
    .map_err(runtime)?;

    let jobs = args.jobs.max(1);
    let mut outcomes: Vec<Result<RunOutcome, CliError>> = Vec::new();
    for chunk in config.seeds.clone().chunks(jobs) {
        std::thread::scope(|scope| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|&seed| {
                    let config = &config;
                    let task = &task;
                    let teacher = &teacher;
                    let base = &base;
                    let root = &root;
                    scope.spawn(move || run_one_seed(config, task, teacher, base, root, seed))
                })
                .collect();
            for h in handles {
                outcomes.push(h.join().expect("training worker panicked"));
            }
        });
    }

    let mut first_err = None;
    for outcome in outcomes {
        match outcome {
            Ok(o) => println!(
                "run {} manifest_digest {} final_accuracy {:.4}",
                o.run_id, o.manifest_digest, o.final_accuracy
            ),
            Err(e) => {
                eprintln!("{e}");
                first_err.get_or_insert(e);
            }
        }
    }
    match first_err {
        None => Ok(()),
        Some(e) => Err(e),
    }
}

fn run_one_seed(
    config: &ExperimentConfig,
    task: &SyntheticTask,
    teacher: &ToyPolicy,
    base: &ToyPolicy,
    root: &Path,
    seed: u64,
) -> Result<RunOutcome, CliError> {
    let resolved = config.resolved_for_seed(seed);
    let digest = resolved.digest();
    let run_id = format!("{}-s{}-{}", resolved.mode, seed, &digest[..8]);
    let run = RunDir::create(root, &run_id).map_err(runtime)?;

    let mut config_bytes = serde_json::to_vec_pretty(&resolved).map_err(runtime)?;
    config_bytes.push(b'\n');
    std::fs::write(run.root().join("config.json"), &config_bytes)
        .map_err(|e| runtime(format!("writing config.json: {e}")))?;

    let train_cfg = resolved.train_config(seed);
    let mut extra_tables: Vec<MetricTableRef> = Vec::new();
    let train_run: TrainRun = match resolved.mode {
        RunKind::Opd | RunKind::Rl => {
            train(task, base, Some(teacher), &train_cfg).map_err(runtime)?
        }
        RunKind::Effopd => {
            let kind = resolved.score.unwrap_or(ScoreKind::Accuracy);
            let set = ValidationSet::sample(task, kind, seed).map_err(runtime)?;
            let validator = TaskValidator { task, set: &set, teacher: Some(teacher) };
            let mut trainer =
                ToyTrainer::new(task, base, Some(teacher), &train_cfg).map_err(runtime)?;
            let eff = run_effopd(&mut trainer, train_cfg.steps, &validator).map_err(runtime)?;
            std::fs::write(run.root().join("events.jsonl"), eff.events_jsonl())
                .map_err(|e| runtime(format!("writing events.jsonl: {e}")))?;
            let mut csv = named_header(&digest, seed);
            csv.push_str("step,validation_score\n");
            for (i, score) in eff.validation_curve.iter().enumerate() {
                match score {
                    Some(s) => writeln!(csv, "{},{s}", i + 1).expect("string write"),
                    None => writeln!(csv, "{},", i + 1).expect("string write"),
                }
            }
            extra_tables.push(run.write_metrics_csv("validation", &csv).map_err(runtime)?);
            eff.run
        }
    };

    let mut checkpoints = Vec::new();
    for (step, policy) in &train_run.checkpoints {
        checkpoints.push(run.save_checkpoint(policy, *step, seed).map_err(runtime)?);
    }

    let mut csv = named_header(&digest, seed);
    csv.push_str("step,loss,mean_reward,kl_to_teacher,delta_norm,accuracy\n");
    for m in &train_run.metrics {
        let kl = m.kl_to_teacher.map(|k| k.to_string()).unwrap_or_default();
        writeln!(
            csv,
            "{},{},{},{kl},{},{}",
            m.step, m.loss, m.mean_reward, m.delta_norm, m.accuracy
        )
        .expect("string write");
    }
    let mut metrics = vec![run.write_metrics_csv("steps", &csv).map_err(runtime)?];
    metrics.append(&mut extra_tables);

    let manifest = RunManifest {
        run_id: run_id.clone(),
        mode: resolved.mode.to_string(),
        seed,
        config_digest: digest,
        checkpoints,
        metrics,
    };
    run.write_manifest(&manifest).map_err(runtime)?;

    let final_accuracy = train_run.metrics.last().map(|m| m.accuracy).unwrap_or(0.0);
    Ok(RunOutcome { run_id, manifest_digest: manifest.digest(), final_accuracy })
}

fn open_run(path: &Path) -> Result<(RunDir, RunManifest, ExperimentConfig), CliError> {
    let id = path
        .file_name()
        .and_then(|s| s.to_str())
        .ok_or_else(|| CliError::Config(format!("{} is not a run directory", path.display())))?;
    let parent = path.parent().unwrap_or_else(|| Path::new("."));
    let run = RunDir::open(parent, id)
        .map_err(|e| CliError::Config(format!("cannot open run {}: {e}", path.display())))?;
    let manifest = run.load_manifest().map_err(runtime)?;
    let config: ExperimentConfig = read_json_file(&run.root().join("config.json"))?;
    Ok((run, manifest, config))
}

/// Run the selected analyses over a stored run and register their outputs
/// in the run manifest.
pub fn cmd_analyze(args: &AnalyzeArgs) -> Result<(), CliError> {
    let (run, mut manifest, config) = open_run(&args.run)?;
    let selections = match &args.analyses {
        Some(list) if !list.is_empty() => list.clone(),
        Some(_) | None if !config.analyses.is_empty() => config.analyses.clone(),
        _ => {
            return Err(CliError::Config(
                "no analyses selected (pass --analyses or set them in the config)".into(),
            ))
        }
    };

    let mut written = Vec::new();
    for kind in &selections {
        let tables = match kind {
            AnalysisKind::Metrics => analyze_metrics(&run, &manifest)?,
            AnalysisKind::Align => analyze_align(&run, &manifest)?,
            AnalysisKind::Truncate => analyze_truncate(&run, &manifest, &config)?,
            AnalysisKind::Scale => analyze_scale(&run, &manifest, &config)?,
            AnalysisKind::Sweep => analyze_sweep(&run, &manifest, &config)?,
            AnalysisKind::Quadsim => {
                let (report, _) = quadsim_report(&QuadsimConfig::default());
                let mut report = report;
                report["config_digest"] = manifest.config_digest.clone().into();
                report["seed"] = manifest.seed.into();
                vec![run.write_report_json("quadsim", &report).map_err(runtime)?]
            }
        };
        written.extend(tables);
    }

    for table in &written {
        manifest.metrics.retain(|m| m.name != table.name);
        manifest.metrics.push(table.clone());
        println!("wrote {}", run.root().join(&table.path).display());
    }
    run.write_manifest(&manifest).map_err(runtime)?;
    Ok(())
}

/// Steps (ascending) of all stored checkpoints.
fn checkpoint_steps(manifest: &RunManifest) -> Vec<usize> {
    manifest.checkpoints.iter().map(|c| c.step).collect()
}

fn load_deltas_vs_base(
    run: &RunDir,
    manifest: &RunManifest,
) -> Result<Vec<(usize, UpdateDelta)>, CliError> {
    let mut out = Vec::new();
    for &step in checkpoint_steps(manifest).iter().skip(1) {
        out.push((step, run.load_delta(0, step).map_err(runtime)?));
    }
    if out.is_empty() {
        return Err(CliError::Runtime(
            "analysis requires checkpoints beyond step 0".into(),
        ));
    }
    Ok(out)
}

fn analyze_metrics(run: &RunDir, manifest: &RunManifest) -> Result<Vec<MetricTableRef>, CliError> {
    let mut csv = named_header(&manifest.config_digest, manifest.seed);
    csv.push_str("step,matrix_name,sigma_max,spec_frob_ratio,effective_rank,top1pct_ratio\n");
    for (step, delta) in load_deltas_vs_base(run, manifest)? {
        for (path, m) in delta.iter() {
            if m.is_zero() {
                continue;
            }
            let s = summarize(m, &path.to_string()).map_err(runtime)?;
            writeln!(
                csv,
                "{step},{},{},{},{},{}",
                s.matrix_name,
                s.spectral_norm,
                s.spec_frob_ratio,
                s.effective_rank,
                s.top1pct_norm_ratio
            )
            .expect("string write");
        }
        let mean = mean_summaries(&delta).map_err(runtime)?;
        writeln!(
            csv,
            "{step},mean_attn_mlp,{},{},{},{}",
            mean.spectral_norm, mean.spec_frob_ratio, mean.effective_rank, mean.top1pct_norm_ratio
        )
        .expect("string write");
    }
    Ok(vec![run.write_metrics_csv("geometry", &csv).map_err(runtime)?])
}

fn analyze_align(run: &RunDir, manifest: &RunManifest) -> Result<Vec<MetricTableRef>, CliError> {
    let series = load_deltas_vs_base(run, manifest)?;
    let alignment = alignment_trajectory(&series, ALIGN_K_MAX).map_err(runtime)?;
    let mut csv = named_header(&manifest.config_digest, manifest.seed);
    csv.push_str("step,mean_topk_alignment\n");
    for (step, value) in alignment.steps.iter().zip(&alignment.values) {
        writeln!(csv, "{step},{value}").expect("string write");
    }
    Ok(vec![run.write_metrics_csv("align", &csv).map_err(runtime)?])
}

fn final_delta(
    run: &RunDir,
    manifest: &RunManifest,
) -> Result<(ToyPolicy, usize, UpdateDelta), CliError> {
    let steps = checkpoint_steps(manifest);
    let last = *steps.last().ok_or_else(|| {
        CliError::Runtime("run has no checkpoints; required steps: 0 and the final step".into())
    })?;
    if last == 0 {
        return Err(CliError::Runtime(
            "analysis requires a trained checkpoint; required steps: 0 and the final step".into(),
        ));
    }
    let base = run.load_checkpoint(0).map_err(runtime)?;
    let delta = run.load_delta(0, last).map_err(runtime)?;
    Ok((base, last, delta))
}

fn analyze_truncate(
    run: &RunDir,
    manifest: &RunManifest,
    config: &ExperimentConfig,
) -> Result<Vec<MetricTableRef>, CliError> {
    let (base, _, delta) = final_delta(run, manifest)?;
    let task = SyntheticTask::new(config.task.clone()).map_err(runtime)?;
    let prompts = task.test_prompts();
    let mut csv = named_header(&manifest.config_digest, manifest.seed);
    csv.push_str("mode,k_percent,norm_match,accuracy,truncated_norm,full_norm\n");
    let cases = [
        (TruncationMode::Top, 10.0, false),
        (TruncationMode::Top, 25.0, false),
        (TruncationMode::Top, 50.0, false),
        (TruncationMode::Top, 100.0, false),
        (TruncationMode::Top, 10.0, true),
        (TruncationMode::Bottom, 50.0, false),
        (TruncationMode::Bottom, 90.0, false),
    ];
    for (mode, k, norm_match) in cases {
        let eval =
            intervene::truncated_model_eval(&base, &delta, mode, k, norm_match, &task, &prompts)
                .map_err(runtime)?;
        writeln!(
            csv,
            "{mode},{k},{norm_match},{},{},{}",
            eval.accuracy, eval.truncated_norm, eval.full_norm
        )
        .expect("string write");
    }
    Ok(vec![run.write_metrics_csv("truncate", &csv).map_err(runtime)?])
}

fn analyze_scale(
    run: &RunDir,
    manifest: &RunManifest,
    config: &ExperimentConfig,
) -> Result<Vec<MetricTableRef>, CliError> {
    let steps = checkpoint_steps(manifest);
    let (base, last, delta_final) = final_delta(run, manifest)?;
    let want_early = (last as f64 * 0.1).ceil() as usize;
    let early = steps
        .iter()
        .copied()
        .filter(|&s| s > 0 && s < last)
        .min_by_key(|&s| s.abs_diff(want_early))
        .ok_or_else(|| {
            CliError::Runtime(format!(
                "scale analysis needs an intermediate checkpoint near step {want_early}; \
                 required steps: 0, ~{want_early}, {last}"
            ))
        })?;
    let delta_early = run.load_delta(0, early).map_err(runtime)?;
    let scaled = norm_match_scale(&delta_early, &delta_final, 1.0).map_err(runtime)?;

    let task = SyntheticTask::new(config.task.clone()).map_err(runtime)?;
    let teacher = make_teacher(
        &task,
        &TeacherConfig {
            policy: config.model.clone(),
            seed: config.teacher_seed,
            ..TeacherConfig::default()
        },
    )
    .map_err(runtime)?;
    let prompts = task.test_prompts();
    let mut csv = named_header(&manifest.config_digest, manifest.seed);
    csv.push_str("variant,early_step,final_step,accuracy,kl_to_teacher\n");
    for (variant, delta) in
        [("unscaled", &delta_early), ("norm_matched", &scaled), ("final", &delta_final)]
    {
        let policy = base.add_delta(delta).map_err(runtime)?;
        let rep =
            evaluate(&policy, &task, Some(&teacher), &prompts, manifest.seed).map_err(runtime)?;
        writeln!(
            csv,
            "{variant},{early},{last},{},{}",
            rep.accuracy,
            rep.mean_kl.map(|k| k.to_string()).unwrap_or_default()
        )
        .expect("string write");
    }
    Ok(vec![run.write_metrics_csv("scale", &csv).map_err(runtime)?])
}

fn analyze_sweep(
    run: &RunDir,
    manifest: &RunManifest,
    config: &ExperimentConfig,
) -> Result<Vec<MetricTableRef>, CliError> {
    let (base, _, delta) = final_delta(run, manifest)?;
    let task = SyntheticTask::new(config.task.clone()).map_err(runtime)?;
    let prompts = task.test_prompts();
    let mut out = Vec::new();
    for (kind, name) in
        [(ModuleKind::MlpSub, "sweep_mlp"), (ModuleKind::AttentionSub, "sweep_attn")]
    {
        let rows = intervene::window_sweep(
            &base,
            &delta,
            kind,
            intervene::DEFAULT_RADIUS,
            SWEEP_EVAL_REPS,
            &task,
            &prompts,
            manifest.seed,
        )
        .map_err(runtime)?;
        let mut csv = named_header(&manifest.config_digest, manifest.seed);
        csv.push_str(&intervene::sweep_csv(&rows));
        out.push(run.write_metrics_csv(name, &csv).map_err(runtime)?);
    }
    Ok(out)
}

/// Oracle-check configuration; defaults mirror the library test suite.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadsimConfig {
    #[serde(default = "default_instances")]
    pub instances: usize,
    #[serde(default = "default_max_dim")]
    pub max_dim: usize,
    #[serde(default = "default_step_counts")]
    pub step_counts: Vec<usize>,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    #[serde(default = "default_lockin_instances")]
    pub lockin_instances: usize,
    #[serde(default = "default_quadsim_seed")]
    pub seed: u64,
}

fn default_instances() -> usize {
    50
}

fn default_max_dim() -> usize {
    64
}

fn default_step_counts() -> Vec<usize> {
    vec![1, 10, 100, 1000]
}

fn default_tolerance() -> f64 {
    1e-9
}

fn default_lockin_instances() -> usize {
    100
}

fn default_quadsim_seed() -> u64 {
    67
}

impl Default for QuadsimConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields default")
    }
}

fn vec_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn rel_gap(a: &[f64], b: &[f64]) -> f64 {
    let scale = vec_norm(a).max(1e-12);
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    vec_norm(&diff) / scale
}

/// Run every oracle and bound check; returns the JSON report and overall
/// pass/fail.
pub fn quadsim_report(cfg: &QuadsimConfig) -> (serde_json::Value, bool) {
    // Route equivalence: iteration vs closed form vs spectral form.
    let mut max_gap = 0.0f64;
    let mut equiv_failures = 0usize;
    for trial in 0..cfg.instances {
        let model = random_oracle_instance(cfg.max_dim, cfg.seed.wrapping_add(trial as u64));
        for &s in &cfg.step_counts {
            let it = iterate_gd(&model, s);
            let cf = match closed_form(&model, s) {
                Ok(x) => x,
                Err(_) => {
                    equiv_failures += 1;
                    continue;
                }
            };
            let sp = spectral_form(&model, s).assembled;
            let gap = rel_gap(&it, &cf).max(rel_gap(&it, &sp)).max(rel_gap(&cf, &sp));
            max_gap = max_gap.max(gap);
            if gap >= cfg.tolerance {
                equiv_failures += 1;
            }
        }
    }
    let equiv_pass = equiv_failures == 0;

    // Lock-in bound on concentrated instances.
    let mut violations = 0usize;
    let mut max_eps = 0.0f64;
    for trial in 0..cfg.lockin_instances {
        let (model, k) =
            random_concentrated_instance(cfg.seed.wrapping_add(10_000 + trial as u64));
        let steps = 1 + (trial * 7) % 500;
        match lockin_bound_check(&model, k, steps) {
            Ok(rep) => {
                max_eps = max_eps.max(rep.epsilon);
                if !rep.holds {
                    violations += 1;
                }
            }
            Err(_) => violations += 1,
        }
    }
    let lockin_pass = violations == 0;

    // Step-size guard: eta = 2.5 / lambda_max must be rejected by the
    // solvers as outside the convergent range (0, 2 / lambda_max).
    let (a, u) = spd_with_spectrum(&[2.0, 1.0], cfg.seed ^ 0xE7A);
    let b = crate::quadsim::eigvec_combination(&u, &[(0, 1.0)]);
    let guard_err = QuadraticModel::new(a, b, 2.5 / 2.0, None)
        .and_then(|model| closed_form(&model, 10))
        .err();
    let guard_pass = guard_err.is_some();

    let pass = equiv_pass && lockin_pass && guard_pass;
    let report = serde_json::json!({
        "config": {
            "instances": cfg.instances,
            "max_dim": cfg.max_dim,
            "step_counts": cfg.step_counts,
            "tolerance": cfg.tolerance,
            "lockin_instances": cfg.lockin_instances,
            "seed": cfg.seed,
        },
        "equivalence": {
            "instances": cfg.instances,
            "step_counts": cfg.step_counts,
            "max_rel_gap": max_gap,
            "failures": equiv_failures,
            "pass": equiv_pass,
        },
        "lockin": {
            "instances": cfg.lockin_instances,
            "violations": violations,
            "max_epsilon": max_eps,
            "pass": lockin_pass,
        },
        "eta_guard": {
            "attempted_eta_times_lambda_max": 2.5,
            "rejected": guard_pass,
            "message": guard_err.map(|e| e.to_string()).unwrap_or_default(),
        },
        "pass": pass,
    });
    (report, pass)
}

/// Check the theory oracles and write `quadsim-report.json` under the
/// output root.
pub fn cmd_quadsim(args: &QuadsimArgs) -> Result<(), CliError> {
    let cfg: QuadsimConfig = match &args.config {
        Some(path) => read_json_file(path)?,
        None => QuadsimConfig::default(),
    };
    if cfg.instances == 0 || cfg.step_counts.is_empty() {
        return Err(CliError::Config(
            "quadsim needs at least one instance and one step count".into(),
        ));
    }
    let (mut report, pass) = quadsim_report(&cfg);
    let mut cfg_bytes = serde_json::to_vec_pretty(&cfg).map_err(runtime)?;
    cfg_bytes.push(b'\n');
    report["config_digest"] = sha256_hex(&cfg_bytes).into();
    report["seed"] = cfg.seed.into();

    let root = out_root(&args.out);
    std::fs::create_dir_all(&root)
        .map_err(|e| runtime(format!("creating {}: {e}", root.display())))?;
    let path = root.join("quadsim-report.json");
    let mut bytes = serde_json::to_vec_pretty(&report).map_err(runtime)?;
    bytes.push(b'\n');
    std::fs::write(&path, &bytes)
        .map_err(|e| runtime(format!("writing {}: {e}", path.display())))?;
    println!("wrote {}", path.display());

    if pass {
        println!("quadsim checks passed");
        Ok(())
    } else {
        Err(CliError::Runtime(format!(
            "quadsim checks failed; see {}",
            path.display()
        )))
    }
}

/// Summarize an accelerated run's event log as `effopd-report.json`.
pub fn cmd_effopd_report(args: &EffopdReportArgs) -> Result<(), CliError> {
    let (run, manifest, _config) = open_run(&args.run)?;
    if manifest.mode != RunKind::Effopd.to_string() {
        return Err(CliError::Config(format!(
            "run {} trained in mode {:?}, not effopd",
            manifest.run_id, manifest.mode
        )));
    }
    let events_path = run.root().join("events.jsonl");
    let text = std::fs::read_to_string(&events_path)
        .map_err(|e| runtime(format!("reading {}: {e}", events_path.display())))?;
    let mut events = Vec::new();
    let mut accepted = 0usize;
    let mut candidates = 0usize;
    let mut wallclock_ms = 0u64;
    for (i, line) in text.lines().enumerate() {
        let v: serde_json::Value = serde_json::from_str(line)
            .map_err(|e| runtime(format!("event line {}: {e}", i + 1)))?;
        let k = v["accepted_k"].as_u64().unwrap_or(0);
        if k > 0 {
            accepted += 1;
        }
        candidates += v["scores"].as_array().map(|a| a.len()).unwrap_or(0);
        wallclock_ms += v["wallclock_ms"].as_u64().unwrap_or(0);
        events.push(v);
    }
    if events.is_empty() {
        return Err(CliError::Runtime("event log is empty".into()));
    }
    let report = serde_json::json!({
        "run_id": manifest.run_id,
        "config_digest": manifest.config_digest,
        "seed": manifest.seed,
        "triggers": events.len(),
        "accepted_triggers": accepted,
        "acceptance_rate": accepted as f64 / events.len() as f64,
        "candidates_scored": candidates,
        "extrapolation_wallclock_ms": wallclock_ms,
        "events": events,
    });
    let path = run.root().join("effopd-report.json");
    let mut bytes = serde_json::to_vec_pretty(&report).map_err(runtime)?;
    bytes.push(b'\n');
    std::fs::write(&path, &bytes)
        .map_err(|e| runtime(format!("writing {}: {e}", path.display())))?;
    println!("wrote {}", path.display());
    println!(
        "triggers {} accepted {} candidates {}",
        events.len(),
        accepted,
        candidates
    );
    Ok(())
}
