use super::types::*;
use super::world::{reset, EnvError, SceneConfig, ScenePlacement};
use crate::registry::AttributeRegistry;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Samples random scenes and tasks over the training portion of the
/// registry. Benchmark suites use their own samplers with held-out kinds.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SceneSampler {
    /// Kinds eligible for sampling.
    pub pool: Vec<String>,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Allow scenes that start with the drawer partially open.
    pub random_drawer: bool,
}

impl SceneSampler {
    pub fn training(registry: &AttributeRegistry) -> Self {
        Self {
            pool: registry
                .training_kinds()
                .map(|k| k.kind.clone())
                .collect(),
            min_objects: 2,
            max_objects: 4,
            random_drawer: true,
        }
    }

    /// Draws a scene config; distinct (category, color, shape) triples are
    /// kept unique by sampling kinds without replacement.
    pub fn sample_config(&self, rng: &mut ChaCha8Rng) -> SceneConfig {
        let n = rng.gen_range(self.min_objects..=self.max_objects);
        let mut kinds = self.pool.clone();
        kinds.shuffle(rng);
        kinds.truncate(n);
        SceneConfig {
            placements: kinds
                .into_iter()
                .map(|kind| ScenePlacement {
                    kind,
                    position: None,
                })
                .collect(),
            drawer_open_frac: if self.random_drawer && rng.gen_bool(0.25) {
                1.0
            } else {
                0.0
            },
            ..SceneConfig::default()
        }
    }

    /// Samples (scene, task) pairs until the task is solvable.
    pub fn sample_scene_and_task(
        &self,
        registry: &AttributeRegistry,
        seed: u64,
        task_types: &[TaskType],
    ) -> Result<(SceneConfig, EnvState, TaskSpec), EnvError> {
        let mut rng = crate::nn::derive_rng(seed, 0x5CE);
        for attempt in 0..32u64 {
            let config = self.sample_config(&mut rng);
            let state = reset(&config, seed.wrapping_add(attempt), registry)?;
            let task_type = *task_types
                .get(rng.gen_range(0..task_types.len()))
                .unwrap();
            let task = match task_type {
                TaskType::OpenDrawer => {
                    if state.drawer_open_frac > 0.5 {
                        continue;
                    }
                    TaskSpec::new(task_type, "drawer", None)
                }
                TaskType::CloseDrawer => {
                    if state.drawer_open_frac < 0.5 {
                        continue;
                    }
                    TaskSpec::new(task_type, "drawer", None)
                }
                TaskType::Pick | TaskType::PutInDrawer => {
                    if state.objects.is_empty() {
                        continue;
                    }
                    let obj = &state.objects[rng.gen_range(0..state.objects.len())];
                    TaskSpec::new(task_type, &obj.id, None)
                }
                TaskType::MoveNear | TaskType::PutOn => {
                    if state.objects.len() < 2 {
                        continue;
                    }
                    let a = rng.gen_range(0..state.objects.len());
                    let mut b = rng.gen_range(0..state.objects.len());
                    while b == a {
                        b = rng.gen_range(0..state.objects.len());
                    }
                    TaskSpec::new(task_type, &state.objects[a].id, Some(&state.objects[b].id))
                }
            };
            if super::world::is_solvable(&state, &task) {
                return Ok((config, state, task));
            }
        }
        Err(EnvError::Planning("no solvable scene in 32 attempts".into()))
    }
}

/// Canonical atomic instruction for a task in a scene.
pub fn atomic_instruction(task: &TaskSpec, state: &EnvState, registry: &AttributeRegistry) -> String {
    let name = |id: &str| -> String {
        state
            .object(id)
            .and_then(|o| registry.get(&o.kind).ok())
            .map(|k| k.name.clone())
            .unwrap_or_else(|| id.to_string())
    };
    match task.task_type {
        TaskType::Pick => format!("pick up the {}", name(&task.target_id)),
        TaskType::MoveNear => format!(
            "move the {} near the {}",
            name(&task.target_id),
            name(task.reference_id.as_deref().unwrap_or(""))
        ),
        TaskType::PutOn => format!(
            "put the {} on the {}",
            name(&task.target_id),
            name(task.reference_id.as_deref().unwrap_or(""))
        ),
        TaskType::PutInDrawer => format!("put the {} into the drawer", name(&task.target_id)),
        TaskType::OpenDrawer => "open the drawer".to_string(),
        TaskType::CloseDrawer => "close the drawer".to_string(),
    }
}
