//! Caption and QA dialogues over freshly sampled scenes. These carry no
//! action tail and keep the backbone's language side exercised during action
//! finetuning.

use super::dialogue::{DialogueSample, ImageSource, Role, Turn};
use super::templates::TemplateBank;
use super::vlait::caption_text;
use super::CorpusError;
use crate::env::{reset, EnvState, SceneSampler};
use crate::nn::derive_rng;
use crate::registry::AttributeRegistry;
use rand::Rng;

fn qa_for_scene(
    state: &EnvState,
    registry: &AttributeRegistry,
    rng: &mut impl Rng,
) -> (String, String) {
    let number = |n: usize| {
        ["Zero", "One", "Two", "Three", "Four", "Five", "Six"]
            .get(n)
            .copied()
            .unwrap_or("Many")
            .to_string()
    };
    match rng.gen_range(0..9) {
        0 => (
            "How many objects are on the table?".to_string(),
            format!("{}.", number(state.objects.len())),
        ),
        1 if !state.objects.is_empty() => {
            let obj = &state.objects[rng.gen_range(0..state.objects.len())];
            let k = registry.get(&obj.kind).unwrap();
            let mut color = k.color.word().to_string();
            color[..1].make_ascii_uppercase();
            (format!("What color is the {}?", k.name), format!("{color}."))
        }
        2 => (
            "Is the drawer open or closed?".to_string(),
            format!(
                "{}.",
                if state.drawer_open_frac > 0.5 {
                    "Open"
                } else {
                    "Closed"
                }
            ),
        ),
        3 | 4 if state.objects.len() >= 2 => {
            let i = rng.gen_range(0..state.objects.len());
            let mut j = rng.gen_range(0..state.objects.len() - 1);
            if j >= i {
                j += 1;
            }
            let (a, b) = (&state.objects[i], &state.objects[j]);
            let (ka, kb) = (registry.get(&a.kind).unwrap(), registry.get(&b.kind).unwrap());
            let answer = if a.position[0] < b.position[0] {
                "Left"
            } else {
                "Right"
            };
            (
                format!("Is the {} left or right of the {}?", ka.name, kb.name),
                format!("{answer}."),
            )
        }
        5 => (
            "Is the gripper open or closed?".to_string(),
            format!(
                "{}.",
                if state.gripper_closed { "Closed" } else { "Open" }
            ),
        ),
        _ if !state.objects.is_empty() => {
            let obj = &state.objects[rng.gen_range(0..state.objects.len())];
            let k = registry.get(&obj.kind).unwrap();
            (
                format!("Which way is the {} from the gripper?", k.name),
                format!("{}.", direction_phrase(state.gripper_pose, obj.position)),
            )
        }
        _ => (
            "How many objects are on the table?".to_string(),
            format!("{}.", number(state.objects.len())),
        ),
    }
}

/// Relative direction from `from` to `to`, in the same axis vocabulary as the
/// motion annotator: +x is "right", +y is "forward".
fn direction_phrase(from: [f64; 3], to: [f64; 3]) -> String {
    let mut parts: Vec<&str> = Vec::new();
    let t = 0.03;
    let dx = to[0] - from[0];
    let dy = to[1] - from[1];
    if dx > t {
        parts.push("move right");
    } else if dx < -t {
        parts.push("move left");
    }
    if dy > t {
        parts.push("move forward");
    } else if dy < -t {
        parts.push("move backward");
    }
    let dz = to[2] - from[2];
    if dz > t {
        parts.push("move up");
    } else if dz < -t {
        parts.push("move down");
    }
    if parts.is_empty() {
        return "It is close".to_string();
    }
    let mut s = parts.join(" and ");
    s[..1].make_ascii_uppercase();
    s
}

/// `size` dialogues, alternating captions and QA, over scenes sampled from
/// `sampler`. Pure function of (sampler, size, seed).
pub fn generate_multimodal_corpus(
    sampler: &SceneSampler,
    registry: &AttributeRegistry,
    bank: &TemplateBank,
    size: usize,
    seed: u64,
) -> Result<Vec<DialogueSample>, CorpusError> {
    let mut out = Vec::with_capacity(size);
    for i in 0..size {
        let mut rng = derive_rng(seed, 0x3131 + i as u64);
        let scene_seed = rng.gen::<u64>();
        let config = sampler.sample_config(&mut rng);
        let state = reset(&config, scene_seed, registry)
            .map_err(|e| CorpusError::Resolution(e.to_string()))?;
        let (question, answer) = if i % 2 == 0 {
            let prompt =
                bank.caption_prompts[rng.gen_range(0..bank.caption_prompts.len())].clone();
            (prompt, caption_text(&state, registry))
        } else {
            qa_for_scene(&state, registry, &mut rng)
        };
        let turns = vec![
            Turn {
                role: Role::User,
                text: question,
                image: Some(ImageSource::Scene {
                    config,
                    seed: scene_seed,
                }),
            },
            Turn {
                role: Role::Assistant,
                text: answer,
                image: None,
            },
        ];
        out.push(DialogueSample {
            turns,
            has_action_tail: false,
            token_ids: Vec::new(),
            loss_mask: Vec::new(),
            action_source: None,
        });
    }
    Ok(out)
}
