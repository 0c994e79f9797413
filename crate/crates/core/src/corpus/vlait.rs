//! Instruction-tuning records derived from demonstration episodes: captions,
//! QA pairs, instruction rewrites and indirect situated instructions. Every
//! rewrite and indirect record carries explicit semantics and is checked to
//! resolve back to the source task before it is emitted.

use super::resolver::{resolve_target, Semantics};
use super::templates::TemplateBank;
use super::CorpusError;
use crate::env::{EnvState, Episode, TaskSpec, TaskType};
use crate::nn::derive_rng;
use crate::registry::AttributeRegistry;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordKind {
    Caption,
    Qa,
    CommandRewrite,
    ContextCreate,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VlaItRecord {
    pub kind: RecordKind,
    pub instruction_text: String,
    pub response_text: String,
    pub episode_id: String,
    pub frame_indices: [usize; 3],
    /// Present on command_rewrite and context_create records.
    pub semantics: Option<Semantics>,
    pub source_task: Option<TaskSpec>,
}

fn with_article(name: &str) -> String {
    let vowel = name.starts_with(['a', 'e', 'i', 'o', 'u']);
    format!("{} {name}", if vowel { "an" } else { "a" })
}

fn number_word(n: usize) -> &'static str {
    ["Zero", "One", "Two", "Three", "Four", "Five", "Six"]
        .get(n)
        .copied()
        .unwrap_or("Many")
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().collect::<String>() + c.as_str(),
        None => String::new(),
    }
}

/// Deterministic scene description in object id order.
pub fn caption_text(state: &EnvState, registry: &AttributeRegistry) -> String {
    let names: Vec<String> = state
        .objects
        .iter()
        .map(|o| {
            let k = registry.get(&o.kind).expect("scene kinds are registered");
            with_article(&format!("{} {}", k.color.word(), k.name))
        })
        .collect();
    let listing = match names.len() {
        0 => "The table is empty".to_string(),
        1 => format!("On the table there is {}", names[0]),
        _ => format!(
            "On the table there are {} and {}",
            names[..names.len() - 1].join(", "),
            names[names.len() - 1]
        ),
    };
    let drawer = if state.drawer_open_frac > 0.5 {
        "open"
    } else {
        "closed"
    };
    format!("{listing}. The drawer is {drawer}.")
}

/// Display name for an object id in the scene.
fn name_of(state: &EnvState, id: &str, registry: &AttributeRegistry) -> String {
    let obj = state.object(id).expect("target exists in scene");
    registry.get(&obj.kind).expect("registered").name.clone()
}

fn fill(template: &str, pairs: &[(&str, &str)]) -> String {
    let mut out = template.to_string();
    for (k, v) in pairs {
        out = out.replace(&format!("{{{k}}}"), v);
    }
    out
}

fn qa_candidates(
    episode: &Episode,
    frames: [usize; 3],
    registry: &AttributeRegistry,
) -> Vec<(String, String)> {
    let states: Vec<&EnvState> = frames.iter().map(|&f| &episode.states[f]).collect();
    let first = states[0];
    let mut out = Vec::new();

    // Quantitative: object counts never change within an episode.
    out.push((
        "How many objects are on the table?".to_string(),
        format!("{}.", number_word(first.objects.len())),
    ));
    for cat in ["fruit", "can", "block"] {
        let count = first
            .objects
            .iter()
            .filter(|o| registry.get(&o.kind).unwrap().category.word() == cat)
            .count();
        if count > 0 {
            out.push((
                format!("How many {cat}s are on the table?"),
                format!("{}.", number_word(count)),
            ));
        }
    }

    // Visual: color of a named object.
    for obj in &first.objects {
        let k = registry.get(&obj.kind).unwrap();
        out.push((
            format!("What color is the {}?", k.name),
            format!("{}.", capitalize(k.color.word())),
        ));
    }

    // State: drawer pose, kept only when stable across the three frames.
    let drawer_words: Vec<&str> = states
        .iter()
        .map(|s| if s.drawer_open_frac > 0.5 { "Open" } else { "Closed" })
        .collect();
    if drawer_words.iter().all(|w| *w == drawer_words[0]) {
        out.push((
            "Is the drawer open or closed?".to_string(),
            format!("{}.", drawer_words[0]),
        ));
    }

    // Spatial: left/right between two objects, kept only when the relation
    // holds with margin in all three frames.
    if first.objects.len() >= 2 {
        for i in 0..first.objects.len() {
            for j in 0..first.objects.len() {
                if i == j {
                    continue;
                }
                let rel: Vec<i32> = states
                    .iter()
                    .map(|s| {
                        let dx = s.objects[i].position[0] - s.objects[j].position[0];
                        if dx < -0.03 {
                            -1
                        } else if dx > 0.03 {
                            1
                        } else {
                            0
                        }
                    })
                    .collect();
                if rel[0] != 0 && rel.iter().all(|r| *r == rel[0]) {
                    let a = registry.get(&first.objects[i].kind).unwrap().name.clone();
                    let b = registry.get(&first.objects[j].kind).unwrap().name.clone();
                    out.push((
                        format!("Is the {a} to the left or the right of the {b}?"),
                        format!("{}.", if rel[0] < 0 { "Left" } else { "Right" }),
                    ));
                }
            }
        }
    }

    // Commonsense: edibility from the food tag.
    for obj in &first.objects {
        let k = registry.get(&obj.kind).unwrap();
        out.push((
            format!("Can you eat the {}?", k.name),
            if k.has_tag("food") { "Yes." } else { "No." }.to_string(),
        ));
    }
    out
}

fn context_records(
    episode: &Episode,
    frames: [usize; 3],
    bank: &TemplateBank,
    registry: &AttributeRegistry,
    rng: &mut impl Rng,
) -> Vec<VlaItRecord> {
    let state = &episode.states[0];
    let task = &episode.task;
    let target_kind = state
        .object(&task.target_id)
        .map(|o| registry.get(&o.kind).unwrap().clone());
    let mut out = Vec::new();

    for ctx in bank.contexts_for(task.task_type) {
        let (glyph, color, category) = match &target_kind {
            Some(k) => (k.glyph, k.color.word(), k.category.word()),
            None => (None, "", ""),
        };
        let sem = ctx.semantics.bind(glyph, color, category, task.task_type);
        // Keep only templates whose semantics select exactly the source target.
        match resolve_target(&sem, state, registry) {
            Ok(id) if id == task.target_id => {}
            _ => continue,
        }
        let template = ctx.train.choose(rng).unwrap();
        let text = fill(
            template,
            &[
                ("glyph", &glyph.map(|g| g.to_string()).unwrap_or_default()),
                ("color", color),
                ("category_word", category),
            ],
        );
        out.push(record(
            RecordKind::ContextCreate,
            text,
            confirmation(task, state, registry),
            episode,
            frames,
            Some(sem),
        ));
    }

    // Fallback keeps at least one indirect record per episode: refer to the
    // target by color and category when that is unambiguous in the scene.
    if out.is_empty() {
        if let Some(k) = &target_kind {
            let sem = Semantics::AttributeRef {
                color: k.color.word().to_string(),
                category: k.category.word().to_string(),
            };
            if matches!(resolve_target(&sem, state, registry), Ok(id) if id == task.target_id) {
                let desc = format!("{} {}", k.color.word(), k.category.word());
                let template = bank.rewrite_bank(task.task_type).train.choose(rng).unwrap();
                let reference = task
                    .reference_id
                    .as_deref()
                    .map(|r| name_of(state, r, registry))
                    .unwrap_or_default();
                let text = fill(template, &[("name", desc.as_str()), ("a", &desc), ("b", &reference)]);
                out.push(record(
                    RecordKind::ContextCreate,
                    text,
                    confirmation(task, state, registry),
                    episode,
                    frames,
                    Some(sem),
                ));
            }
        }
    }
    out.truncate(3);
    out
}

/// Assistant-side response for instruction records: a short confirmation that
/// restates the resolved task in plain words.
pub fn confirmation(task: &TaskSpec, state: &EnvState, registry: &AttributeRegistry) -> String {
    let name = |id: &str| name_of(state, id, registry);
    match task.task_type {
        TaskType::Pick => format!("I will pick up the {}.", name(&task.target_id)),
        TaskType::MoveNear => format!(
            "I will move the {} near the {}.",
            name(&task.target_id),
            name(task.reference_id.as_deref().unwrap())
        ),
        TaskType::PutOn => format!(
            "I will put the {} on the {}.",
            name(&task.target_id),
            name(task.reference_id.as_deref().unwrap())
        ),
        TaskType::PutInDrawer => {
            format!("I will put the {} into the drawer.", name(&task.target_id))
        }
        TaskType::OpenDrawer => "I will open the drawer.".to_string(),
        TaskType::CloseDrawer => "I will close the drawer.".to_string(),
    }
}

fn record(
    kind: RecordKind,
    instruction: String,
    response: String,
    episode: &Episode,
    frames: [usize; 3],
    semantics: Option<Semantics>,
) -> VlaItRecord {
    VlaItRecord {
        kind,
        instruction_text: instruction,
        response_text: response,
        episode_id: episode.id.clone(),
        frame_indices: frames,
        semantics,
        source_task: Some(episode.task.clone()),
    }
}

/// All four record kinds for one episode. Episodes without an instruction are
/// skipped (empty result).
pub fn generate_vla_it(
    episode: &Episode,
    registry: &AttributeRegistry,
    bank: &TemplateBank,
    seed: u64,
) -> Result<Vec<VlaItRecord>, CorpusError> {
    if episode.instruction.trim().is_empty() {
        return Ok(Vec::new());
    }
    let mut rng = derive_rng(seed, 0x1A17);
    let n = episode.states.len();
    let frames = [0, n / 2, n - 1];
    let state0 = &episode.states[0];
    let mut out = Vec::new();

    // Caption over the first frame.
    let prompt = bank.caption_prompts[(rng.gen::<u32>() as usize) % bank.caption_prompts.len()].clone();
    out.push(record(
        RecordKind::Caption,
        prompt,
        caption_text(state0, registry),
        episode,
        frames,
        None,
    ));

    // Up to three QA pairs, each already frame-consistent by construction.
    let mut qa = qa_candidates(episode, frames, registry);
    qa.shuffle(&mut rng);
    for (q, a) in qa.into_iter().take(3) {
        out.push(record(RecordKind::Qa, q, a, episode, frames, None));
    }

    // One to three rewrites of the atomic instruction.
    let task = &episode.task;
    let rewrite_bank = bank.rewrite_bank(task.task_type);
    let n_rw = rng.gen_range(1..=3.min(rewrite_bank.train.len()));
    let mut templates = rewrite_bank.train.clone();
    templates.shuffle(&mut rng);
    let sem = match task.task_type {
        TaskType::OpenDrawer | TaskType::CloseDrawer => Semantics::Fixture {
            task: super::templates::task_key(task.task_type).to_string(),
        },
        _ => Semantics::Direct {
            kind: state0.object(&task.target_id).unwrap().kind.clone(),
        },
    };
    for template in templates.into_iter().take(n_rw) {
        let target = if task.task_type.needs_target() {
            name_of(state0, &task.target_id, registry)
        } else {
            String::new()
        };
        let reference = task
            .reference_id
            .as_deref()
            .map(|r| name_of(state0, r, registry))
            .unwrap_or_default();
        let text = fill(
            &template,
            &[("name", target.as_str()), ("a", &target), ("b", &reference)],
        );
        out.push(record(
            RecordKind::CommandRewrite,
            text,
            confirmation(task, state0, registry),
            episode,
            frames,
            Some(sem.clone()),
        ));
    }

    out.extend(context_records(episode, frames, bank, registry, &mut rng));
    Ok(out)
}
