//! Instruction-generalization benchmark. Three suites: atomic (in-domain
//! phrasings), instruction aggregation (held-out rewrites, held-out synonyms,
//! held-out object kinds) and situated reasoning (held-out indirect
//! phrasings that need scene attributes to resolve). Every task stores the
//! exact reset seeds used for its trials, so evaluation is reproducible, and
//! a scripted-expert ceiling certifies each suite is physically solvable.

use crate::corpus::resolver::{resolve_target, Semantics};
use crate::corpus::templates::{task_key, SemanticsSpec, TemplateBank};
use crate::corpus::CorpusError;
use crate::env::{
    atomic_instruction, check_success, reset, scripted_expert, step, EnvConfig, EnvError,
    PutInDrawerRule, SceneConfig, ScenePlacement, TaskSpec, TaskType,
};
use crate::infer::{rollout, ControlLoopConfig};
use crate::nn::derive_rng;
use crate::recipes::{vqa_accuracy, ModelBundle, QaProbe, RecipeError};
use crate::registry::AttributeRegistry;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("benchmark build failed: {0}")]
    Build(String),
    #[error("held-out material leaks into training data: {0:?}")]
    Overlap(Vec<String>),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Recipe(#[from] RecipeError),
    #[error("report parse failed: {0}")]
    Report(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Atomic,
    InstructionAggregation,
    SituatedReasoning,
}

impl Suite {
    pub fn key(self) -> &'static str {
        match self {
            Suite::Atomic => "atomic",
            Suite::InstructionAggregation => "instruction_aggregation",
            Suite::SituatedReasoning => "situated_reasoning",
        }
    }
}

/// One benchmark task: a frozen scene recipe, a ground-truth task spec, the
/// instruction text the model sees, and the reset seeds of its trials.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchTask {
    pub id: String,
    pub suite: Suite,
    pub scene: SceneConfig,
    pub task: TaskSpec,
    pub instruction: String,
    /// Which template produced the instruction, for overlap accounting.
    pub template_id: String,
    pub tags: Vec<String>,
    /// One environment reset seed per trial.
    pub reset_seeds: Vec<u64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BenchConfig {
    pub atomic_tasks: usize,
    pub aggregation_tasks: usize,
    pub reasoning_tasks: usize,
    pub trials_per_task: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            atomic_tasks: 12,
            aggregation_tasks: 25,
            reasoning_tasks: 15,
            trials_per_task: 12,
            seed: 17,
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

fn scene_of(kinds: &[&str], drawer_open_frac: f64) -> SceneConfig {
    SceneConfig {
        placements: kinds
            .iter()
            .map(|k| ScenePlacement {
                kind: k.to_string(),
                position: None,
            })
            .collect(),
        drawer_open_frac,
        ..SceneConfig::default()
    }
}

fn object_id(kind: &str, idx: usize) -> String {
    format!("{kind}#{idx}")
}

fn kind_name(registry: &AttributeRegistry, kind: &str) -> Result<String, BenchError> {
    Ok(registry
        .get(kind)
        .map_err(|e| BenchError::Build(e.to_string()))?
        .name
        .clone())
}

/// Draws reset seeds under which the scene places successfully, the task is
/// solvable, and (when present) the semantics resolve to the intended target.
fn find_reset_seeds(
    scene: &SceneConfig,
    task: &TaskSpec,
    semantics: Option<&Semantics>,
    registry: &AttributeRegistry,
    trials: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<Vec<u64>, BenchError> {
    let mut seeds = Vec::with_capacity(trials);
    for _ in 0..200 {
        if seeds.len() == trials {
            break;
        }
        let candidate: u64 = rng.gen();
        let Ok(state) = reset(scene, candidate, registry) else {
            continue;
        };
        if !crate::env::is_solvable(&state, task) {
            continue;
        }
        if let Some(sem) = semantics {
            match resolve_target(sem, &state, registry) {
                Ok(id) if id == task.target_id => {}
                _ => continue,
            }
        }
        seeds.push(candidate);
    }
    if seeds.len() < trials {
        return Err(BenchError::Build(format!(
            "only {}/{} viable reset seeds for task {:?}",
            seeds.len(),
            trials,
            task
        )));
    }
    Ok(seeds)
}

fn fill_rewrite(template: &str, a: &str, b: Option<&str>) -> String {
    template
        .replace("{name}", a)
        .replace("{a}", a)
        .replace("{b}", b.unwrap_or(""))
}

/// Applies the held-out synonym map to an instruction. Returns the rewritten
/// text and whether anything changed.
pub fn apply_synonyms(instruction: &str, synonyms: &BTreeMap<String, String>) -> (String, bool) {
    let mut out = instruction.to_string();
    let mut changed = false;
    for (word, syn) in synonyms {
        if out.contains(word.as_str()) {
            out = out.replace(word.as_str(), syn);
            changed = true;
        }
    }
    (out, changed)
}

/// Every string a train-split template could produce for this task in this
/// scene; bench instructions must not collide with any of them.
fn train_realizations(
    bank: &TemplateBank,
    task: &TaskSpec,
    target_name: &str,
    reference_name: Option<&str>,
) -> Vec<String> {
    let mut out = Vec::new();
    for t in &bank.rewrite_bank(task.task_type).train {
        out.push(fill_rewrite(t, target_name, reference_name));
    }
    for ctx in bank.contexts_for(task.task_type) {
        out.extend(ctx.train.iter().cloned());
    }
    out
}

fn build_atomic(
    registry: &AttributeRegistry,
    cfg: &BenchConfig,
) -> Result<Vec<BenchTask>, BenchError> {
    let pool: Vec<String> = registry.training_kinds().map(|k| k.kind.clone()).collect();
    let mut tasks = Vec::new();
    for i in 0..cfg.atomic_tasks {
        let mut rng = derive_rng(cfg.seed, 0xBE_A000 + i as u64);
        let task_type = ALL_TASK_TYPES[i % ALL_TASK_TYPES.len()];
        let mut kinds = pool.clone();
        kinds.shuffle(&mut rng);
        kinds.truncate(3);
        let drawer = match task_type {
            TaskType::CloseDrawer | TaskType::PutInDrawer => 1.0,
            _ => 0.0,
        };
        let kind_refs: Vec<&str> = kinds.iter().map(|s| s.as_str()).collect();
        let scene = scene_of(&kind_refs, drawer);
        let task = match task_type {
            TaskType::OpenDrawer | TaskType::CloseDrawer => {
                TaskSpec::new(task_type, "drawer", None)
            }
            TaskType::MoveNear | TaskType::PutOn => TaskSpec::new(
                task_type,
                &object_id(&kinds[0], 0),
                Some(&object_id(&kinds[1], 1)),
            ),
            _ => TaskSpec::new(task_type, &object_id(&kinds[0], 0), None),
        };
        let reset_seeds =
            find_reset_seeds(&scene, &task, None, registry, cfg.trials_per_task, &mut rng)?;
        let state = reset(&scene, reset_seeds[0], registry)?;
        let instruction = atomic_instruction(&task, &state, registry);
        tasks.push(BenchTask {
            id: format!("atomic-{i:02}"),
            suite: Suite::Atomic,
            scene,
            task,
            instruction,
            template_id: format!("atomic.{}", task_key(task_type)),
            tags: vec!["canonical".to_string()],
            reset_seeds,
        });
    }
    Ok(tasks)
}

fn build_aggregation(
    registry: &AttributeRegistry,
    bank: &TemplateBank,
    cfg: &BenchConfig,
) -> Result<Vec<BenchTask>, BenchError> {
    let pool: Vec<String> = registry.training_kinds().map(|k| k.kind.clone()).collect();
    let novel: Vec<String> = registry
        .kinds
        .iter()
        .filter(|k| k.held_out)
        .map(|k| k.kind.clone())
        .collect();
    let synonym_targets = ["lemon", "apple", "sponge"];
    let mut tasks = Vec::new();
    for i in 0..cfg.aggregation_tasks {
        let mut rng = derive_rng(cfg.seed, 0xBE_6000 + i as u64);
        let task_type = ALL_TASK_TYPES[i % ALL_TASK_TYPES.len()];
        let mut kinds = pool.clone();
        kinds.shuffle(&mut rng);
        kinds.truncate(3);
        let mut tags = vec!["held_out_rewrite".to_string()];
        let has_target = !matches!(task_type, TaskType::OpenDrawer | TaskType::CloseDrawer);
        if has_target {
            if i % 5 == 2 {
                // Swap in an object kind never seen in training scenes.
                kinds[0] = novel[(i / 5) % novel.len()].clone();
                tags.push("novel_object".to_string());
            } else if i % 3 == 0 {
                // Force a target whose name has a held-out synonym.
                let forced = synonym_targets[(i / 3) % synonym_targets.len()];
                if !kinds.contains(&forced.to_string()) {
                    kinds[0] = forced.to_string();
                }
                let pos = kinds.iter().position(|k| k == forced).unwrap();
                kinds.swap(0, pos);
            }
        }
        kinds.dedup();
        let drawer = match task_type {
            TaskType::CloseDrawer | TaskType::PutInDrawer => 1.0,
            _ => 0.0,
        };
        let kind_refs: Vec<&str> = kinds.iter().map(|s| s.as_str()).collect();
        let scene = scene_of(&kind_refs, drawer);
        let task = match task_type {
            TaskType::OpenDrawer | TaskType::CloseDrawer => {
                TaskSpec::new(task_type, "drawer", None)
            }
            TaskType::MoveNear | TaskType::PutOn => TaskSpec::new(
                task_type,
                &object_id(&kinds[0], 0),
                Some(&object_id(&kinds[1], 1)),
            ),
            _ => TaskSpec::new(task_type, &object_id(&kinds[0], 0), None),
        };
        let target_name = kind_name(registry, &kinds[0])?;
        let reference_name = match task.reference_id {
            Some(_) => Some(kind_name(registry, &kinds[1])?),
            None => None,
        };
        let held_out = &bank.rewrite_bank(task_type).held_out;
        let t_idx = rng.gen_range(0..held_out.len());
        let mut instruction =
            fill_rewrite(&held_out[t_idx], &target_name, reference_name.as_deref());
        if i % 3 == 0 {
            let (rewritten, changed) = apply_synonyms(&instruction, &bank.held_out_synonyms);
            if changed {
                instruction = rewritten;
                tags.push("synonym_language".to_string());
            }
        }
        let reset_seeds =
            find_reset_seeds(&scene, &task, None, registry, cfg.trials_per_task, &mut rng)?;
        tasks.push(BenchTask {
            id: format!("aggregation-{i:02}"),
            suite: Suite::InstructionAggregation,
            scene,
            task,
            instruction,
            template_id: format!("rewrite.{}.held_out.{t_idx}", task_key(task_type)),
            tags,
            reset_seeds,
        });
    }
    Ok(tasks)
}

/// One fixed situated-reasoning scenario; the suite cycles through these.
struct ReasonVariant {
    name: &'static str,
    kinds: &'static [&'static str],
    drawer: f64,
    task_type: TaskType,
    /// Index into `kinds` for the target, or None for the drawer fixture.
    target_idx: Option<usize>,
    matcher: fn(&SemanticsSpec) -> bool,
    glyph: Option<char>,
    color: &'static str,
    category: &'static str,
    tags: &'static [&'static str],
}

const REASON_VARIANTS: [ReasonVariant; 10] = [
    ReasonVariant {
        name: "superlative_max",
        kinds: &["lemon", "apple", "blue_block"],
        drawer: 0.0,
        task_type: TaskType::Pick,
        target_idx: Some(0),
        matcher: |s| matches!(s, SemanticsSpec::Superlative { maximize: true, .. }),
        glyph: None,
        color: "",
        category: "",
        tags: &["implicit_goal"],
    },
    ReasonVariant {
        name: "superlative_min",
        kinds: &["lemon", "apple", "blue_block"],
        drawer: 0.0,
        task_type: TaskType::Pick,
        target_idx: Some(1),
        matcher: |s| matches!(s, SemanticsSpec::Superlative { maximize: false, .. }),
        glyph: None,
        color: "",
        category: "",
        tags: &["implicit_goal"],
    },
    ReasonVariant {
        name: "tag_fizzy",
        kinds: &["coke_can", "water_can", "sponge"],
        drawer: 0.0,
        task_type: TaskType::Pick,
        target_idx: Some(0),
        matcher: |s| matches!(s, SemanticsSpec::TagRequest { tag } if tag == "fizzy"),
        glyph: None,
        color: "",
        category: "",
        tags: &["implicit_goal"],
    },
    ReasonVariant {
        name: "tag_fizzy_novel",
        kinds: &["grape_soda_can", "water_can", "apple"],
        drawer: 0.0,
        task_type: TaskType::Pick,
        target_idx: Some(0),
        matcher: |s| matches!(s, SemanticsSpec::TagRequest { tag } if tag == "fizzy"),
        glyph: None,
        color: "",
        category: "",
        tags: &["implicit_goal", "novel_object"],
    },
    ReasonVariant {
        name: "tag_cleaning",
        kinds: &["sponge", "apple", "coke_can"],
        drawer: 0.0,
        task_type: TaskType::Pick,
        target_idx: Some(0),
        matcher: |s| matches!(s, SemanticsSpec::TagRequest { tag } if tag == "cleaning_tool"),
        glyph: None,
        color: "",
        category: "",
        tags: &["tool_use"],
    },
    ReasonVariant {
        name: "negation",
        kinds: &["apple", "lime", "coke_can"],
        drawer: 0.0,
        task_type: TaskType::Pick,
        target_idx: Some(1),
        matcher: |s| matches!(s, SemanticsSpec::Negation { .. }),
        glyph: None,
        color: "",
        category: "",
        tags: &["negation"],
    },
    ReasonVariant {
        name: "glyph",
        kinds: &["tile_a", "tile_b", "apple"],
        drawer: 0.0,
        task_type: TaskType::Pick,
        target_idx: Some(1),
        matcher: |s| matches!(s, SemanticsSpec::Glyph),
        glyph: Some('B'),
        color: "",
        category: "",
        tags: &["glyph_ref"],
    },
    ReasonVariant {
        name: "attribute_ref",
        kinds: &["red_block", "green_block", "orange"],
        drawer: 0.0,
        task_type: TaskType::Pick,
        target_idx: Some(1),
        matcher: |s| matches!(s, SemanticsSpec::AttributeRef),
        glyph: None,
        color: "green",
        category: "block",
        tags: &["attribute_ref"],
    },
    ReasonVariant {
        name: "fixture_open",
        kinds: &["apple"],
        drawer: 0.0,
        task_type: TaskType::OpenDrawer,
        target_idx: None,
        matcher: |s| matches!(s, SemanticsSpec::Fixture),
        glyph: None,
        color: "",
        category: "",
        tags: &["implicit_goal"],
    },
    ReasonVariant {
        name: "fixture_close",
        kinds: &["apple"],
        drawer: 1.0,
        task_type: TaskType::CloseDrawer,
        target_idx: None,
        matcher: |s| matches!(s, SemanticsSpec::Fixture),
        glyph: None,
        color: "",
        category: "",
        tags: &["implicit_goal"],
    },
];

fn build_reasoning(
    registry: &AttributeRegistry,
    bank: &TemplateBank,
    cfg: &BenchConfig,
) -> Result<Vec<BenchTask>, BenchError> {
    // One extra variant beyond the table: stow with the drawer shut, so the
    // policy must open it first.
    let n_variants = REASON_VARIANTS.len() + 1;
    let mut tasks = Vec::new();
    for i in 0..cfg.reasoning_tasks {
        let mut rng = derive_rng(cfg.seed, 0xBE_5000 + i as u64);
        let v = i % n_variants;
        if v == REASON_VARIANTS.len() {
            let kinds = ["lemon", "coke_can"];
            let scene = scene_of(&kinds, 0.0);
            let mut task = TaskSpec::new(TaskType::PutInDrawer, &object_id("lemon", 0), None);
            task.drawer_rule = PutInDrawerRule::RequireOpen;
            let held_out = &bank.rewrite_bank(TaskType::PutInDrawer).held_out;
            let t_idx = rng.gen_range(0..held_out.len());
            let instruction = fill_rewrite(&held_out[t_idx], "lemon", None);
            let reset_seeds =
                find_reset_seeds(&scene, &task, None, registry, cfg.trials_per_task, &mut rng)?;
            tasks.push(BenchTask {
                id: format!("reasoning-{i:02}-stow_closed"),
                suite: Suite::SituatedReasoning,
                scene,
                task,
                instruction,
                template_id: format!("rewrite.put_in_drawer.held_out.{t_idx}"),
                tags: vec!["subtask_chain".to_string()],
                reset_seeds,
            });
            continue;
        }
        let var = &REASON_VARIANTS[v];
        let ctx = bank
            .contexts_for(var.task_type)
            .find(|c| (var.matcher)(&c.semantics))
            .ok_or_else(|| {
                BenchError::Build(format!("no context bank for variant {}", var.name))
            })?;
        let scene = scene_of(var.kinds, var.drawer);
        let target_id = match var.target_idx {
            Some(idx) => object_id(var.kinds[idx], idx),
            None => "drawer".to_string(),
        };
        let task = TaskSpec::new(var.task_type, &target_id, None);
        let semantics = ctx
            .semantics
            .bind(var.glyph, var.color, var.category, var.task_type);
        let t_idx = rng.gen_range(0..ctx.held_out.len());
        let instruction = ctx.held_out[t_idx]
            .replace("{glyph}", &var.glyph.map(String::from).unwrap_or_default())
            .replace("{color}", var.color)
            .replace("{category_word}", var.category);
        let reset_seeds = find_reset_seeds(
            &scene,
            &task,
            Some(&semantics),
            registry,
            cfg.trials_per_task,
            &mut rng,
        )?;
        tasks.push(BenchTask {
            id: format!("reasoning-{i:02}-{}", var.name),
            suite: Suite::SituatedReasoning,
            scene,
            task,
            instruction,
            template_id: format!("context.{}.{}.held_out.{t_idx}", task_key(var.task_type), var.name),
            tags: var.tags.iter().map(|s| s.to_string()).collect(),
            reset_seeds,
        });
    }
    Ok(tasks)
}

/// Builds all three suites deterministically from the config seed and checks
/// that no held-out instruction could have been produced by a train template.
pub fn build_suites(
    registry: &AttributeRegistry,
    bank: &TemplateBank,
    cfg: &BenchConfig,
) -> Result<Vec<BenchTask>, BenchError> {
    let mut tasks = build_atomic(registry, cfg)?;
    tasks.extend(build_aggregation(registry, bank, cfg)?);
    tasks.extend(build_reasoning(registry, bank, cfg)?);

    let mut offenders = Vec::new();
    // Synonyms are benchmark-only words; they must not appear anywhere in the
    // train splits or caption prompts.
    for syn in bank.held_out_synonyms.values() {
        let leak = bank
            .rewrites
            .values()
            .flat_map(|r| r.train.iter())
            .chain(bank.contexts.iter().flat_map(|c| c.train.iter()))
            .chain(bank.caption_prompts.iter())
            .any(|t| t.contains(syn.as_str()));
        if leak {
            offenders.push(format!("synonym '{syn}' appears in a train template"));
        }
    }
    for task in tasks.iter().filter(|t| t.suite != Suite::Atomic) {
        let state = reset(&task.scene, task.reset_seeds[0], registry)?;
        let name = |id: &str| {
            state
                .object(id)
                .and_then(|o| registry.get(&o.kind).ok())
                .map(|k| k.name.clone())
                .unwrap_or_else(|| id.to_string())
        };
        let target_name = name(&task.task.target_id);
        let reference_name = task.task.reference_id.as_deref().map(name);
        let mut rivals =
            train_realizations(bank, &task.task, &target_name, reference_name.as_deref());
        rivals.push(atomic_instruction(&task.task, &state, registry));
        if rivals.iter().any(|r| r == &task.instruction) {
            offenders.push(format!(
                "{}: '{}' reproducible from a train template",
                task.id, task.instruction
            ));
        }
    }
    if !offenders.is_empty() {
        return Err(BenchError::Overlap(offenders));
    }
    Ok(tasks)
}

/// Confirms that no held-out suite instruction string occurs verbatim in the
/// training corpus. The atomic suite is in-domain by design and exempt.
pub fn verify_disjoint(
    tasks: &[BenchTask],
    training_instructions: &BTreeSet<String>,
) -> Result<(), BenchError> {
    let offenders: Vec<String> = tasks
        .iter()
        .filter(|t| t.suite != Suite::Atomic)
        .filter(|t| training_instructions.contains(&t.instruction))
        .map(|t| format!("{}: '{}'", t.id, t.instruction))
        .collect();
    if offenders.is_empty() {
        Ok(())
    } else {
        Err(BenchError::Overlap(offenders))
    }
}

/// Rolls the scripted expert on one trial; success means the benchmark task
/// is physically solvable, independent of any learned policy.
pub fn scripted_success(
    scene: &SceneConfig,
    reset_seed: u64,
    task: &TaskSpec,
    registry: &AttributeRegistry,
    env_cfg: &EnvConfig,
) -> Result<bool, EnvError> {
    let mut state = reset(scene, reset_seed, registry)?;
    for _ in 0..env_cfg.max_episode_steps {
        if check_success(&state, task) {
            return Ok(true);
        }
        let action = scripted_expert(&state, task, env_cfg)?;
        let (next, _info) = step(&state, &action, env_cfg)?;
        state = next;
    }
    Ok(check_success(&state, task))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rate {
    pub successes: usize,
    pub trials: usize,
}

impl Rate {
    pub fn frac(&self) -> f64 {
        if self.trials == 0 {
            0.0
        } else {
            self.successes as f64 / self.trials as f64
        }
    }

    fn add(&mut self, other: Rate) {
        self.successes += other.successes;
        self.trials += other.trials;
    }
}

/// Per-suite solvability ceiling of the scripted expert.
pub fn scripted_ceiling(
    tasks: &[BenchTask],
    registry: &AttributeRegistry,
    env_cfg: &EnvConfig,
) -> Result<BTreeMap<String, Rate>, BenchError> {
    let mut out: BTreeMap<String, Rate> = BTreeMap::new();
    for task in tasks {
        let entry = out.entry(task.suite.key().to_string()).or_default();
        for &seed in &task.reset_seeds {
            entry.trials += 1;
            if scripted_success(&task.scene, seed, &task.task, registry, env_cfg)? {
                entry.successes += 1;
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub id: String,
    pub suite: Suite,
    pub tags: Vec<String>,
    pub rate: Rate,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub suites: BTreeMap<String, Rate>,
    pub tags: BTreeMap<String, Rate>,
    pub tasks: Vec<TaskResult>,
}

/// Folds per-task results into suite and tag rates. A task may carry several
/// tags, so tag rates overlap; suite rates partition the tasks.
pub fn aggregate(tasks: Vec<TaskResult>) -> BenchReport {
    let mut suites: BTreeMap<String, Rate> = BTreeMap::new();
    let mut tags: BTreeMap<String, Rate> = BTreeMap::new();
    for t in &tasks {
        suites.entry(t.suite.key().to_string()).or_default().add(t.rate);
        for tag in &t.tags {
            tags.entry(tag.clone()).or_default().add(t.rate);
        }
    }
    BenchReport {
        suites,
        tags,
        tasks,
    }
}

/// Evaluates a trained model over every task and trial with closed-loop
/// environment rollouts.
pub fn evaluate(
    bundle: &ModelBundle,
    tasks: &[BenchTask],
    registry: &AttributeRegistry,
    env_cfg: &EnvConfig,
    loop_cfg: &ControlLoopConfig,
) -> BenchReport {
    let mut results = Vec::with_capacity(tasks.len());
    for task in tasks {
        let mut rate = Rate::default();
        for &seed in &task.reset_seeds {
            let trace = rollout(
                bundle,
                &task.scene,
                &task.task,
                &task.instruction,
                registry,
                env_cfg,
                loop_cfg,
                seed,
            );
            rate.trials += 1;
            if trace.success() {
                rate.successes += 1;
            }
        }
        results.push(TaskResult {
            id: task.id.clone(),
            suite: task.suite,
            tags: task.tags.clone(),
            rate,
        });
    }
    aggregate(results)
}

/// Exact-match VQA accuracy of several checkpoints on a shared probe set;
/// used to measure how much language ability each recipe retains.
pub fn evaluate_forgetting(
    models: &[(&str, &ModelBundle)],
    probes: &[QaProbe],
) -> Result<BTreeMap<String, f64>, RecipeError> {
    let mut out = BTreeMap::new();
    for (name, bundle) in models {
        out.insert(name.to_string(), vqa_accuracy(bundle, probes)?);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DualFreqPoint {
    /// Expert calls per fresh latent refresh.
    pub ratio: usize,
    pub successes: usize,
    pub trials: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScalePoint {
    pub episodes: usize,
    pub successes: usize,
    pub trials: usize,
}

/// Everything a full evaluation run can produce. Sections are optional;
/// a study that was not run is absent, never reported as zero.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub benchmarks: BTreeMap<String, BenchReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub forgetting: Option<BTreeMap<String, f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub think_mode: Option<BTreeMap<String, BenchReport>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dual_frequency: Option<Vec<DualFreqPoint>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_scaling: Option<Vec<ScalePoint>>,
}

pub fn summary_json(summary: &ReportSummary) -> String {
    serde_json::to_string_pretty(summary).expect("summary serializes")
}

pub fn summary_from_json(text: &str) -> Result<ReportSummary, BenchError> {
    serde_json::from_str(text).map_err(|e| BenchError::Report(e.to_string()))
}

fn fmt_rate(r: &Rate) -> String {
    format!("{}/{} ({:.1}%)", r.successes, r.trials, 100.0 * r.frac())
}

fn render_bench_table(out: &mut String, reports: &BTreeMap<String, BenchReport>) {
    let mut suite_keys: BTreeSet<&str> = BTreeSet::new();
    for rep in reports.values() {
        suite_keys.extend(rep.suites.keys().map(|s| s.as_str()));
    }
    for (model, rep) in reports {
        out.push_str(&format!("  {model}\n"));
        for key in &suite_keys {
            match rep.suites.get(*key) {
                Some(rate) => out.push_str(&format!("    {key:<26} {}\n", fmt_rate(rate))),
                None => out.push_str(&format!("    {key:<26} -\n")),
            }
        }
        for (tag, rate) in &rep.tags {
            out.push_str(&format!("    tag:{tag:<22} {}\n", fmt_rate(rate)));
        }
    }
}

/// Human-readable report. Sections mirror the JSON summary; missing studies
/// render as "not run".
pub fn render_report(summary: &ReportSummary) -> String {
    let mut out = String::new();
    out.push_str("== suite success rates ==\n");
    if summary.benchmarks.is_empty() {
        out.push_str("  not run\n");
    } else {
        render_bench_table(&mut out, &summary.benchmarks);
    }
    out.push_str("== language retention (VQA exact match) ==\n");
    match &summary.forgetting {
        None => out.push_str("  not run\n"),
        Some(map) => {
            for (model, acc) in map {
                out.push_str(&format!("  {model:<28} {acc:.3}\n"));
            }
        }
    }
    out.push_str("== think mode ==\n");
    match &summary.think_mode {
        None => out.push_str("  not run\n"),
        Some(map) => render_bench_table(&mut out, map),
    }
    out.push_str("== latent refresh sweep ==\n");
    match &summary.dual_frequency {
        None => out.push_str("  not run\n"),
        Some(points) => {
            for p in points {
                let rate = Rate {
                    successes: p.successes,
                    trials: p.trials,
                };
                out.push_str(&format!("  refresh every {:<2} chunks  {}\n", p.ratio, fmt_rate(&rate)));
            }
        }
    }
    out.push_str("== demonstration scaling ==\n");
    match &summary.data_scaling {
        None => out.push_str("  not run\n"),
        Some(points) => {
            for p in points {
                let rate = Rate {
                    successes: p.successes,
                    trials: p.trials,
                };
                out.push_str(&format!("  {:>6} episodes  {}\n", p.episodes, fmt_rate(&rate)));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::TemplateBank;

    fn small_cfg() -> BenchConfig {
        BenchConfig {
            atomic_tasks: 6,
            aggregation_tasks: 10,
            reasoning_tasks: 11,
            trials_per_task: 3,
            seed: 17,
        }
    }

    #[test]
    fn suites_build_deterministically_with_expected_sizes() {
        let registry = AttributeRegistry::builtin();
        let bank = TemplateBank::builtin();
        let cfg = small_cfg();
        let a = build_suites(&registry, &bank, &cfg).unwrap();
        let b = build_suites(&registry, &bank, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(
            a.iter().filter(|t| t.suite == Suite::Atomic).count(),
            cfg.atomic_tasks
        );
        assert_eq!(
            a.iter()
                .filter(|t| t.suite == Suite::InstructionAggregation)
                .count(),
            cfg.aggregation_tasks
        );
        assert_eq!(
            a.iter()
                .filter(|t| t.suite == Suite::SituatedReasoning)
                .count(),
            cfg.reasoning_tasks
        );
        for t in &a {
            assert_eq!(t.reset_seeds.len(), cfg.trials_per_task);
            assert!(!t.instruction.is_empty());
        }
        // All three generalization axes are present.
        let tags: BTreeSet<&str> = a
            .iter()
            .flat_map(|t| t.tags.iter().map(|s| s.as_str()))
            .collect();
        for needed in [
            "held_out_rewrite",
            "synonym_language",
            "novel_object",
            "implicit_goal",
            "negation",
            "glyph_ref",
            "attribute_ref",
            "tool_use",
            "subtask_chain",
        ] {
            assert!(tags.contains(needed), "missing tag {needed}");
        }
    }

    #[test]
    fn held_out_instructions_disjoint_from_training_material() {
        let registry = AttributeRegistry::builtin();
        let bank = TemplateBank::builtin();
        let tasks = build_suites(&registry, &bank, &small_cfg()).unwrap();
        // Simulated training corpus: every train template realized with every
        // registry name, plus canonical atomic phrasings for the bench tasks.
        let mut corpus: BTreeSet<String> = BTreeSet::new();
        let names: Vec<String> = registry.kinds.iter().map(|k| k.name.clone()).collect();
        for rb in bank.rewrites.values() {
            for t in &rb.train {
                for a in &names {
                    for b in &names {
                        corpus.insert(fill_rewrite(t, a, Some(b)));
                    }
                }
            }
        }
        for ctx in &bank.contexts {
            corpus.extend(ctx.train.iter().cloned());
        }
        for task in &tasks {
            let state = reset(&task.scene, task.reset_seeds[0], &registry).unwrap();
            corpus.insert(atomic_instruction(&task.task, &state, &registry));
        }
        verify_disjoint(&tasks, &corpus).unwrap();
        // Leaking one held-out instruction gets reported with the task id.
        let leaked = tasks
            .iter()
            .find(|t| t.suite == Suite::InstructionAggregation)
            .unwrap();
        corpus.insert(leaked.instruction.clone());
        match verify_disjoint(&tasks, &corpus) {
            Err(BenchError::Overlap(offenders)) => {
                assert!(offenders.iter().any(|o| o.contains(&leaked.id)));
            }
            other => panic!("expected overlap error, got {other:?}"),
        }
    }

    #[test]
    fn scripted_expert_ceiling_certifies_solvability() {
        let registry = AttributeRegistry::builtin();
        let bank = TemplateBank::builtin();
        let tasks = build_suites(&registry, &bank, &small_cfg()).unwrap();
        let ceiling = scripted_ceiling(&tasks, &registry, &EnvConfig::default()).unwrap();
        let atomic = &ceiling["atomic"];
        assert_eq!(atomic.successes, atomic.trials, "atomic ceiling below 100%");
        for key in ["instruction_aggregation", "situated_reasoning"] {
            let r = &ceiling[key];
            assert!(
                r.frac() >= 0.95,
                "{key} ceiling {}/{} under 95%",
                r.successes,
                r.trials
            );
        }
    }

    #[test]
    fn task_rates_aggregate_to_suite_totals() {
        let results = vec![
            TaskResult {
                id: "a".into(),
                suite: Suite::Atomic,
                tags: vec!["canonical".into()],
                rate: Rate {
                    successes: 3,
                    trials: 4,
                },
            },
            TaskResult {
                id: "b".into(),
                suite: Suite::Atomic,
                tags: vec!["canonical".into()],
                rate: Rate {
                    successes: 1,
                    trials: 4,
                },
            },
            TaskResult {
                id: "c".into(),
                suite: Suite::SituatedReasoning,
                tags: vec!["negation".into(), "implicit_goal".into()],
                rate: Rate {
                    successes: 2,
                    trials: 4,
                },
            },
        ];
        let report = aggregate(results);
        assert_eq!(
            report.suites["atomic"],
            Rate {
                successes: 4,
                trials: 8
            }
        );
        assert_eq!(
            report.suites["situated_reasoning"],
            Rate {
                successes: 2,
                trials: 4
            }
        );
        // A multi-tagged task counts once per tag.
        assert_eq!(report.tags["negation"].trials, 4);
        assert_eq!(report.tags["implicit_goal"].trials, 4);
        // Suite totals equal the sum over member tasks.
        let atomic_sum: usize = report
            .tasks
            .iter()
            .filter(|t| t.suite == Suite::Atomic)
            .map(|t| t.rate.successes)
            .sum();
        assert_eq!(atomic_sum, report.suites["atomic"].successes);
    }

    #[test]
    fn report_summary_round_trips_and_omits_absent_sections() {
        let mut summary = ReportSummary::default();
        summary.benchmarks.insert(
            "generalist".into(),
            aggregate(vec![TaskResult {
                id: "a".into(),
                suite: Suite::Atomic,
                tags: vec!["canonical".into()],
                rate: Rate {
                    successes: 3,
                    trials: 4,
                },
            }]),
        );
        summary.forgetting = Some(BTreeMap::from([
            ("stage0".to_string(), 0.9375),
            ("generalist".to_string(), 0.875),
        ]));
        let json = summary_json(&summary);
        let parsed = summary_from_json(&json).unwrap();
        assert_eq!(parsed, summary);
        assert_eq!(summary_json(&parsed), json, "round trip must be byte-identical");
        // Studies that were not run are absent from the JSON, not zeroed.
        assert!(!json.contains("dual_frequency"));
        assert!(!json.contains("data_scaling"));
        assert!(!json.contains("think_mode"));
        let text = render_report(&summary);
        assert!(text.contains("not run"));
        assert!(text.contains("3/4 (75.0%)"));
        assert!(text.contains("0.938") || text.contains("0.937"));
    }
}
