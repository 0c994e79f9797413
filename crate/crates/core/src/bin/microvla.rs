//! Command-line entry point: data generation, staged training, evaluation
//! and report rendering, all driven by one declarative config file.
//!
//! Exit codes: 0 success, 2 validation error (bad flags, bad config, missing
//! named inputs), 1 runtime failure.

use clap::{Parser, Subcommand};
use microvla::bench::{
    build_suites, evaluate, summary_json, BenchReport, DualFreqPoint, ReportSummary, ScalePoint,
};
use microvla::config::{load_config, template_realizations, write_run_artifacts, RunConfig};
use microvla::corpus::{
    annotate_language_motion, build_tokenizer, generate_multimodal_corpus, generate_vla_it,
    DialogueSample, VlaItRecord,
};
use microvla::env::{
    generate_episode, load_episodes, save_episodes, Episode, SceneSampler, TaskType,
};
use microvla::infer::{dual_frequency_sweep, rollout, SweepTask};
use microvla::nn::derive_rng;
use microvla::recipes::{
    atomic_manip_items, fit_normalizer, language_items, nested_fraction, qa_probe, run_fft_baseline,
    run_stage0, run_stage1, run_stage2, vlait_items, vqa_accuracy, LanguageItem, ModelBundle,
    StageReport,
};
use microvla::registry::AttributeRegistry;
use rand::RngCore;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "microvla",
    version,
    about = "Desk-scale vision-language-action pipeline: synthetic demos, staged training, closed-loop benchmark"
)]
struct Cli {
    /// Path to a TOML run config; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides master_seed from config/env.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides output_dir from config/env.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate scripted demonstration episodes.
    GenDemos {
        /// Overrides data.episodes.
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Derive motion phrases from stored proprioception.
    Annotate,
    /// Generate instruction-tuning records from episodes.
    GenVlait,
    /// Generate the caption/QA multimodal corpus.
    GenMm {
        /// Overrides data.mm_size.
        #[arg(long)]
        size: Option<usize>,
    },
    /// Stage 0: pretrain the backbone on the multimodal corpus.
    Pretrain,
    /// Stage 1: action pretraining (expert + action adapter).
    TrainStage1 {
        /// Checkpoint directory to start from (default: <output_dir>/stage0).
        #[arg(long)]
        from: Option<PathBuf>,
    },
    /// Stage 2: instruction tuning (language adapter + gating head).
    TrainStage2 {
        /// Checkpoint directory to start from (default: <output_dir>/stage1).
        #[arg(long)]
        from: Option<PathBuf>,
    },
    /// Full-finetune baseline on the stage-2 mix.
    TrainFft {
        /// Checkpoint directory to start from (default: <output_dir>/stage0).
        #[arg(long)]
        from: Option<PathBuf>,
    },
    /// Run the benchmark suites (and the VQA holdout) on a checkpoint.
    Eval {
        /// Checkpoint directory.
        #[arg(long)]
        model: PathBuf,
        /// Label used in the report (default: checkpoint dir name).
        #[arg(long)]
        name: Option<String>,
        /// Evaluate with test-time thinking enabled.
        #[arg(long)]
        think: bool,
        /// Skip the VQA holdout measurement.
        #[arg(long)]
        no_vqa: bool,
    },
    /// Sweep the latent refresh ratio on the atomic suite.
    SweepDualfreq {
        #[arg(long)]
        model: PathBuf,
    },
    /// Retrain stage 1 at nested data fractions and evaluate each.
    ScaleData {
        /// Stage-0 checkpoint to start each run from.
        #[arg(long)]
        from: Option<PathBuf>,
        /// Nested fractions of the episode set.
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.25, 0.5, 1.0])]
        fractions: Vec<f64>,
    },
    /// Run one benchmark trial and print its trace as JSON.
    Rollout {
        #[arg(long)]
        model: PathBuf,
        /// Benchmark task id (see eval output); defaults to the first task.
        #[arg(long)]
        task_id: Option<String>,
        #[arg(long, default_value_t = 0)]
        trial: usize,
    },
    /// Merge evaluation artifacts in output_dir into one report.
    Report,
}

enum CliError {
    Validation(String),
    Runtime(String),
}

impl<E: std::error::Error> From<E> for CliError {
    fn from(e: E) -> Self {
        CliError::Runtime(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

const ALL_TASK_TYPES: [TaskType; 6] = [
    TaskType::Pick,
    TaskType::MoveNear,
    TaskType::PutOn,
    TaskType::PutInDrawer,
    TaskType::OpenDrawer,
    TaskType::CloseDrawer,
];

struct Ctx {
    cfg: RunConfig,
    registry: AttributeRegistry,
    bank: microvla::corpus::TemplateBank,
}

impl Ctx {
    fn out(&self, name: &str) -> PathBuf {
        self.cfg.output_dir.join(name)
    }

    fn require_file(&self, name: &str, produced_by: &str) -> Result<PathBuf, CliError> {
        let p = self.out(name);
        if !p.is_file() {
            return Err(CliError::Validation(format!(
                "missing input {}: run `microvla {produced_by}` first",
                p.display()
            )));
        }
        Ok(p)
    }
}

fn load_ctx(cli: &Cli) -> Result<Ctx, CliError> {
    let mut cfg = load_config(cli.config.as_deref())
        .map_err(|e| CliError::Validation(e.to_string()))?;
    if let Some(seed) = cli.seed {
        cfg.master_seed = seed;
    }
    if let Some(dir) = &cli.output_dir {
        cfg.output_dir = dir.clone();
    }
    cfg.validate().map_err(|e| CliError::Validation(e.to_string()))?;
    Ok(Ctx {
        cfg,
        registry: AttributeRegistry::builtin(),
        bank: microvla::corpus::TemplateBank::builtin(),
    })
}

fn load_bundle(path: &Path) -> Result<ModelBundle, CliError> {
    if !path.join("params.ckpt").is_file() {
        return Err(CliError::Validation(format!(
            "checkpoint not found at {} (expected params.ckpt + meta.json)",
            path.display()
        )));
    }
    ModelBundle::load(path).map_err(|e| CliError::Runtime(e.to_string()))
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, CliError> {
    let file = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for line in std::io::BufReader::new(file).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

fn print_stage_report(stage: &str, report: &StageReport) {
    println!(
        "{stage}: {} steps, loss {:.4} -> {:.4}",
        report.steps_run, report.first_loss, report.final_loss
    );
}

/// Per-record artifact of the `eval` subcommand; `report` merges these.
#[derive(Serialize, Deserialize)]
struct EvalArtifact {
    name: String,
    think: bool,
    report: BenchReport,
    vqa: Option<f64>,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let ctx = load_ctx(&cli)?;
    let cfg = &ctx.cfg;
    match &cli.cmd {
        Cmd::GenDemos { episodes } => {
            let n = episodes.unwrap_or(cfg.data.episodes);
            let env_cfg = cfg.env_config();
            let sampler = SceneSampler::training(&ctx.registry);
            let mut eps = Vec::with_capacity(n);
            for i in 0..n {
                let seed = derive_rng(cfg.master_seed, 0xDE30 + i as u64).next_u64();
                let (scene, _state, task) = sampler
                    .sample_scene_and_task(&ctx.registry, seed, &ALL_TASK_TYPES)
                    .map_err(|e| CliError::Runtime(e.to_string()))?;
                eps.push(generate_episode(&scene, &task, seed, &env_cfg, &ctx.registry)?);
            }
            let path = ctx.out("episodes.jsonl");
            save_episodes(&eps, &path, None)?;
            write_run_artifacts(cfg, &[&path])?;
            let ok = eps.iter().filter(|e| e.success).count();
            println!("wrote {} episodes ({ok} successful) to {}", eps.len(), path.display());
        }
        Cmd::Annotate => {
            let input = ctx.require_file("episodes.jsonl", "gen-demos")?;
            let eps: Vec<Episode> = load_episodes(&input)?;
            let mcfg = cfg.motion_config();
            #[derive(Serialize)]
            struct Labels {
                episode_id: String,
                labels: Vec<String>,
            }
            let mut rows = Vec::new();
            for ep in &eps {
                if let Ok(labels) = annotate_language_motion(ep, &mcfg) {
                    rows.push(Labels {
                        episode_id: ep.id.clone(),
                        labels,
                    });
                }
            }
            let path = ctx.out("motion_labels.jsonl");
            write_jsonl(&path, &rows)?;
            write_run_artifacts(cfg, &[&input, &path])?;
            println!("annotated {}/{} episodes to {}", rows.len(), eps.len(), path.display());
        }
        Cmd::GenVlait => {
            let input = ctx.require_file("episodes.jsonl", "gen-demos")?;
            let eps: Vec<Episode> = load_episodes(&input)?;
            let mut records = Vec::new();
            for (i, ep) in eps.iter().enumerate() {
                let seed = cfg.master_seed.wrapping_add(i as u64);
                records.extend(generate_vla_it(ep, &ctx.registry, &ctx.bank, seed)?);
            }
            let path = ctx.out("vlait.jsonl");
            write_jsonl(&path, &records)?;
            write_run_artifacts(cfg, &[&input, &path])?;
            println!("wrote {} instruction-tuning records to {}", records.len(), path.display());
        }
        Cmd::GenMm { size } => {
            let n = size.unwrap_or(cfg.data.mm_size);
            let sampler = SceneSampler::training(&ctx.registry);
            let dialogues =
                generate_multimodal_corpus(&sampler, &ctx.registry, &ctx.bank, n, cfg.master_seed)?;
            let path = ctx.out("mm.jsonl");
            write_jsonl(&path, &dialogues)?;
            write_run_artifacts(cfg, &[&path])?;
            println!("wrote {} dialogues to {}", dialogues.len(), path.display());
        }
        Cmd::Pretrain => {
            let mm_path = ctx.require_file("mm.jsonl", "gen-mm")?;
            let mut dialogues: Vec<DialogueSample> = read_jsonl(&mm_path)?;
            let mut chunks = template_realizations(&ctx.registry, &ctx.bank);
            for d in &dialogues {
                chunks.extend(d.turns.iter().map(|t| t.text.clone()));
            }
            let vlait_path = ctx.out("vlait.jsonl");
            if vlait_path.is_file() {
                let records: Vec<VlaItRecord> = read_jsonl(&vlait_path)?;
                for r in records {
                    chunks.push(r.instruction_text);
                    chunks.push(r.response_text);
                }
            }
            let tok = build_tokenizer(chunks.iter().map(String::as_str))?;
            let vlm = cfg.backbone_config(tok.vocab_size());
            let expert = cfg.expert_config(vlm.hidden_d);
            let mut bundle =
                ModelBundle::init(vlm, expert, cfg.moe_config(), tok, cfg.master_seed);
            for d in &mut dialogues {
                d.encode(&bundle.tokenizer);
            }
            let items = language_items(&dialogues, &HashMap::new(), &ctx.registry, bundle.image_side())?;
            let train = &items[..items.len() - cfg.data.vqa_holdout.min(items.len() - 1)];
            let dir = ctx.out("stage0");
            std::fs::create_dir_all(&dir)?;
            let mut plan = cfg.stage_plan("stage0");
            plan.log_path = Some(dir.join("metrics.jsonl"));
            let report = run_stage0(&mut bundle, train, &plan)?;
            bundle.save(&dir)?;
            write_run_artifacts(cfg, &[&mm_path])?;
            print_stage_report("stage0", &report);
            println!("saved checkpoint to {}", dir.display());
        }
        Cmd::TrainStage1 { from } => {
            let start = from.clone().unwrap_or_else(|| ctx.out("stage0"));
            let mut bundle = load_bundle(&start)?;
            let ep_path = ctx.require_file("episodes.jsonl", "gen-demos")?;
            let eps: Vec<Episode> = load_episodes(&ep_path)?;
            let eps = nested_fraction(&eps, cfg.data.data_fraction, cfg.master_seed);
            bundle.normalizer = fit_normalizer(&eps);
            let manip = atomic_manip_items(
                &eps,
                &bundle.tokenizer,
                &cfg.motion_config(),
                &bundle.normalizer,
                bundle.expert.horizon_h,
                bundle.image_side(),
                cfg.data.use_motion_labels,
                cfg.data.samples_per_episode,
                cfg.master_seed,
            )?;
            let dir = ctx.out("stage1");
            std::fs::create_dir_all(&dir)?;
            let mut plan = cfg.stage_plan("stage1");
            plan.log_path = Some(dir.join("metrics.jsonl"));
            let report = run_stage1(&mut bundle, &manip, &plan)?;
            bundle.save(&dir)?;
            write_run_artifacts(cfg, &[&ep_path])?;
            print_stage_report("stage1", &report);
            println!("saved checkpoint to {}", dir.display());
        }
        Cmd::TrainStage2 { from } => {
            let start = from.clone().unwrap_or_else(|| ctx.out("stage1"));
            let (report, dir) = run_mixed_stage(&ctx, &start, "stage2")?;
            print_stage_report("stage2", &report);
            println!("saved checkpoint to {}", dir.display());
        }
        Cmd::TrainFft { from } => {
            let start = from.clone().unwrap_or_else(|| ctx.out("stage0"));
            let (report, dir) = run_mixed_stage(&ctx, &start, "fft")?;
            print_stage_report("fft", &report);
            println!("saved checkpoint to {}", dir.display());
        }
        Cmd::Eval {
            model,
            name,
            think,
            no_vqa,
        } => {
            let bundle = load_bundle(model)?;
            let label = name.clone().unwrap_or_else(|| {
                model
                    .file_name()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| "model".to_string())
            });
            let suites = build_suites(&ctx.registry, &ctx.bank, &cfg.bench_config())
                .map_err(|e| CliError::Runtime(e.to_string()))?;
            let mut loop_cfg = cfg.control_config();
            loop_cfg.think_mode = *think || loop_cfg.think_mode;
            let report = evaluate(&bundle, &suites, &ctx.registry, &cfg.env_config(), &loop_cfg);
            let vqa = if *no_vqa {
                None
            } else {
                Some(holdout_vqa(&ctx, &bundle)?)
            };
            let artifact = EvalArtifact {
                name: label.clone(),
                think: loop_cfg.think_mode,
                report,
                vqa,
            };
            let suffix = if artifact.think { "-think" } else { "" };
            let path = ctx.out(&format!("eval-{label}{suffix}.json"));
            std::fs::create_dir_all(&cfg.output_dir)?;
            std::fs::write(&path, serde_json::to_string_pretty(&artifact)?)?;
            write_run_artifacts(cfg, &[model.join("params.ckpt").as_path()])?;
            for (suite, rate) in &artifact.report.suites {
                println!("{label} {suite}: {}/{}", rate.successes, rate.trials);
            }
            if let Some(acc) = artifact.vqa {
                println!("{label} vqa: {acc:.3}");
            }
            println!("wrote {}", path.display());
        }
        Cmd::SweepDualfreq { model } => {
            let bundle = load_bundle(model)?;
            let suites = build_suites(&ctx.registry, &ctx.bank, &cfg.bench_config())
                .map_err(|e| CliError::Runtime(e.to_string()))?;
            let tasks: Vec<SweepTask> = suites
                .iter()
                .filter(|t| t.suite == microvla::bench::Suite::Atomic)
                .map(|t| SweepTask {
                    scene: t.scene.clone(),
                    task: t.task.clone(),
                    instruction: t.instruction.clone(),
                })
                .collect();
            let table = dual_frequency_sweep(
                &bundle,
                &tasks,
                &cfg.control.sweep_ratios,
                cfg.bench.trials_per_task,
                &ctx.registry,
                &cfg.env_config(),
                &cfg.control_config(),
                cfg.master_seed,
            );
            let points: Vec<DualFreqPoint> = table
                .iter()
                .map(|&(ratio, successes, trials)| DualFreqPoint {
                    ratio,
                    successes,
                    trials,
                })
                .collect();
            let path = ctx.out("dual_frequency.json");
            std::fs::create_dir_all(&cfg.output_dir)?;
            std::fs::write(&path, serde_json::to_string_pretty(&points)?)?;
            for p in &points {
                println!("k={}: {}/{}", p.ratio, p.successes, p.trials);
            }
            println!("wrote {}", path.display());
        }
        Cmd::ScaleData { from, fractions } => {
            let start = from.clone().unwrap_or_else(|| ctx.out("stage0"));
            let base = load_bundle(&start)?;
            let ep_path = ctx.require_file("episodes.jsonl", "gen-demos")?;
            let eps: Vec<Episode> = load_episodes(&ep_path)?;
            let suites = build_suites(&ctx.registry, &ctx.bank, &cfg.bench_config())
                .map_err(|e| CliError::Runtime(e.to_string()))?;
            let atomic: Vec<_> = suites
                .into_iter()
                .filter(|t| t.suite == microvla::bench::Suite::Atomic)
                .collect();
            let mut points = Vec::new();
            for &f in fractions {
                if !(0.0 < f && f <= 1.0) {
                    return Err(CliError::Validation(format!(
                        "fraction {f} outside (0, 1]"
                    )));
                }
                let subset = nested_fraction(&eps, f, cfg.master_seed);
                let mut bundle = base.clone();
                bundle.normalizer = fit_normalizer(&subset);
                let manip = atomic_manip_items(
                    &subset,
                    &bundle.tokenizer,
                    &cfg.motion_config(),
                    &bundle.normalizer,
                    bundle.expert.horizon_h,
                    bundle.image_side(),
                    cfg.data.use_motion_labels,
                    cfg.data.samples_per_episode,
                    cfg.master_seed,
                )?;
                let plan = cfg.stage_plan("stage1");
                run_stage1(&mut bundle, &manip, &plan)?;
                let report = evaluate(
                    &bundle,
                    &atomic,
                    &ctx.registry,
                    &cfg.env_config(),
                    &cfg.control_config(),
                );
                let rate = report.suites["atomic"];
                points.push(ScalePoint {
                    episodes: subset.len(),
                    successes: rate.successes,
                    trials: rate.trials,
                });
                println!(
                    "{} episodes: {}/{}",
                    subset.len(),
                    rate.successes,
                    rate.trials
                );
            }
            let path = ctx.out("data_scaling.json");
            std::fs::write(&path, serde_json::to_string_pretty(&points)?)?;
            println!("wrote {}", path.display());
        }
        Cmd::Rollout {
            model,
            task_id,
            trial,
        } => {
            let bundle = load_bundle(model)?;
            let suites = build_suites(&ctx.registry, &ctx.bank, &cfg.bench_config())
                .map_err(|e| CliError::Runtime(e.to_string()))?;
            let task = match task_id {
                Some(id) => suites
                    .iter()
                    .find(|t| &t.id == id)
                    .ok_or_else(|| CliError::Validation(format!("unknown task id '{id}'")))?,
                None => &suites[0],
            };
            if *trial >= task.reset_seeds.len() {
                return Err(CliError::Validation(format!(
                    "trial {trial} out of range (task has {})",
                    task.reset_seeds.len()
                )));
            }
            let trace = rollout(
                &bundle,
                &task.scene,
                &task.task,
                &task.instruction,
                &ctx.registry,
                &cfg.env_config(),
                &cfg.control_config(),
                task.reset_seeds[*trial],
            );
            println!("{}", serde_json::to_string_pretty(&trace)?);
        }
        Cmd::Report => {
            let dir = &cfg.output_dir;
            let mut summary = ReportSummary::default();
            if dir.is_dir() {
                for entry in std::fs::read_dir(dir)? {
                    let path = entry?.path();
                    let fname = path.file_name().unwrap_or_default().to_string_lossy();
                    if fname.starts_with("eval-") && fname.ends_with(".json") {
                        let art: EvalArtifact = serde_json::from_str(&std::fs::read_to_string(&path)?)?;
                        if art.think {
                            summary
                                .think_mode
                                .get_or_insert_with(BTreeMap::new)
                                .insert(art.name.clone(), art.report.clone());
                        } else {
                            summary.benchmarks.insert(art.name.clone(), art.report.clone());
                        }
                        if let Some(acc) = art.vqa {
                            summary
                                .forgetting
                                .get_or_insert_with(BTreeMap::new)
                                .insert(art.name.clone(), acc);
                        }
                    }
                }
                let dual = dir.join("dual_frequency.json");
                if dual.is_file() {
                    summary.dual_frequency =
                        Some(serde_json::from_str(&std::fs::read_to_string(&dual)?)?);
                }
                let scaling = dir.join("data_scaling.json");
                if scaling.is_file() {
                    summary.data_scaling =
                        Some(serde_json::from_str(&std::fs::read_to_string(&scaling)?)?);
                }
            }
            if summary == ReportSummary::default() {
                return Err(CliError::Runtime(format!(
                    "no traces found in {}",
                    dir.display()
                )));
            }
            let text = microvla::bench::render_report(&summary);
            std::fs::write(dir.join("summary.json"), summary_json(&summary))?;
            std::fs::write(dir.join("report.txt"), &text)?;
            print!("{text}");
        }
    }
    Ok(())
}

/// Shared body of `train-stage2` and `train-fft`: both consume the
/// instruction-tuning mix (atomic + rewritten manipulation samples plus
/// caption/QA language samples).
fn run_mixed_stage(ctx: &Ctx, start: &Path, stage: &str) -> Result<(StageReport, PathBuf), CliError> {
    let cfg = &ctx.cfg;
    let mut bundle = load_bundle(start)?;
    let ep_path = ctx.require_file("episodes.jsonl", "gen-demos")?;
    let vl_path = ctx.require_file("vlait.jsonl", "gen-vlait")?;
    let eps: Vec<Episode> = load_episodes(&ep_path)?;
    let eps = nested_fraction(&eps, cfg.data.data_fraction, cfg.master_seed);
    let records: Vec<VlaItRecord> = read_jsonl(&vl_path)?;
    if stage == "fft" {
        // FFT starts from a stage-0 bundle, which has no action statistics.
        bundle.normalizer = fit_normalizer(&eps);
    }
    let by_id: HashMap<String, &Episode> = eps.iter().map(|e| (e.id.clone(), e)).collect();
    let records: Vec<VlaItRecord> = records
        .into_iter()
        .filter(|r| by_id.contains_key(&r.episode_id))
        .collect();
    let (mut manip, lang) = vlait_items(
        &records,
        &by_id,
        &ctx.registry,
        &bundle.tokenizer,
        &bundle.normalizer,
        bundle.expert.horizon_h,
        bundle.image_side(),
        cfg.data.dialogue_mode,
        cfg.master_seed,
    )?;
    manip.extend(atomic_manip_items(
        &eps,
        &bundle.tokenizer,
        &cfg.motion_config(),
        &bundle.normalizer,
        bundle.expert.horizon_h,
        bundle.image_side(),
        cfg.data.use_motion_labels,
        cfg.data.samples_per_episode,
        cfg.master_seed,
    )?);
    let dir = ctx.out(stage);
    std::fs::create_dir_all(&dir)?;
    let mut plan = cfg.stage_plan(stage);
    plan.log_path = Some(dir.join("metrics.jsonl"));
    let report = if stage == "fft" {
        run_fft_baseline(&mut bundle, &lang, &manip, &plan)?
    } else {
        run_stage2(&mut bundle, &lang, &manip, &plan)?
    };
    bundle.save(&dir)?;
    write_run_artifacts(cfg, &[&ep_path, &vl_path])?;
    Ok((report, dir))
}

/// Exact-match accuracy on the reserved tail of the multimodal corpus.
fn holdout_vqa(ctx: &Ctx, bundle: &ModelBundle) -> Result<f64, CliError> {
    let mm_path = ctx.require_file("mm.jsonl", "gen-mm")?;
    let mut dialogues: Vec<DialogueSample> = read_jsonl(&mm_path)?;
    for d in &mut dialogues {
        d.encode(&bundle.tokenizer);
    }
    let items: Vec<LanguageItem> =
        language_items(&dialogues, &HashMap::new(), &ctx.registry, bundle.image_side())?;
    let holdout = ctx.cfg.data.vqa_holdout.min(items.len());
    let probes: Vec<_> = items[items.len() - holdout..]
        .iter()
        .filter_map(|it| qa_probe(it, &bundle.tokenizer))
        .collect();
    if probes.is_empty() {
        return Err(CliError::Runtime("no VQA probes in holdout".to_string()));
    }
    Ok(vqa_accuracy(bundle, &probes)?)
}
