use super::expert::scripted_expert;
use super::render::render;
use super::types::*;
use super::world::{check_success, reset, step, EnvError, SceneConfig};
use crate::registry::AttributeRegistry;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::Path;

/// One executed step: the action taken from `state` plus bookkeeping for the
/// line-delimited episode serialization.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u32,
    pub action: [f64; 7],
    pub gripper_pose: [f64; 3],
    pub gripper_closed: bool,
    pub held: Option<String>,
    pub drawer_open_frac: f64,
    #[serde(default)]
    pub image_path: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Episode {
    pub id: String,
    pub instruction: String,
    pub task: TaskSpec,
    pub scene_config: SceneConfig,
    pub seed: u64,
    pub success: bool,
    /// States has one more entry than steps (initial state included).
    pub states: Vec<EnvState>,
    pub steps: Vec<StepRecord>,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Re-render the observation at a step (observations are derivable from
    /// states, so episodes stay light on disk).
    pub fn render_step(&self, t: usize, width: usize, height: usize) -> super::Image {
        render(&self.states[t], width, height)
    }
}

/// Rolls the scripted expert until success or max_episode_steps.
pub fn generate_episode(
    scene_config: &SceneConfig,
    task: &TaskSpec,
    seed: u64,
    cfg: &EnvConfig,
    registry: &AttributeRegistry,
) -> Result<Episode, EnvError> {
    let mut state = reset(scene_config, seed, registry)?;
    let instruction = super::scenes::atomic_instruction(task, &state, registry);
    let mut states = vec![state.clone()];
    let mut steps = Vec::new();
    let mut success = false;
    for t in 0..cfg.max_episode_steps {
        if check_success(&state, task) {
            success = true;
            break;
        }
        let action = scripted_expert(&state, task, cfg)?;
        let (next, _info) = step(&state, &action, cfg)?;
        steps.push(StepRecord {
            step: t,
            action: action.to_vec7(),
            gripper_pose: state.gripper_pose,
            gripper_closed: state.gripper_closed,
            held: state.held_object.clone(),
            drawer_open_frac: state.drawer_open_frac,
            image_path: String::new(),
        });
        state = next;
        states.push(state.clone());
    }
    if !success {
        success = check_success(&state, task);
    }
    Ok(Episode {
        id: format!("ep-{seed}"),
        instruction,
        task: task.clone(),
        scene_config: scene_config.clone(),
        seed,
        success,
        states,
        steps,
    })
}

/// Writes episodes as line-delimited JSON; optionally dumps every frame as a
/// binary PPM next to the episode file and records the image paths.
pub fn save_episodes(
    episodes: &[Episode],
    path: &Path,
    with_images: Option<(usize, usize)>,
) -> std::io::Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for ep in episodes {
        let mut ep = ep.clone();
        if let Some((w, h)) = with_images {
            let dir = path.with_extension("frames");
            std::fs::create_dir_all(&dir)?;
            for (t, rec) in ep.steps.iter_mut().enumerate() {
                let img_path = dir.join(format!("{}_{t:04}.ppm", ep.id));
                render(&ep.states[t], w, h).write_ppm(&img_path)?;
                rec.image_path = img_path.to_string_lossy().into_owned();
            }
        }
        serde_json::to_writer(&mut out, &ep)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn load_episodes(path: &Path) -> std::io::Result<Vec<Episode>> {
    let f = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(f);
    let mut eps = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ep: Episode = serde_json::from_str(&line)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
        eps.push(ep);
    }
    Ok(eps)
}
