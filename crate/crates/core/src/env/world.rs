use super::types::*;
use crate::registry::AttributeRegistry;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum EnvError {
    #[error("unknown object category or kind: {0}")]
    Configuration(String),
    #[error("could not place {0} without overlap after {1} rejection samples")]
    Placement(String, usize),
    #[error("action contains non-finite components")]
    InvalidAction,
    #[error("task is not solvable: {0}")]
    Planning(String),
}

/// One object request in a scene: registry kind plus an optional pinned
/// position (sampled when absent).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenePlacement {
    pub kind: String,
    #[serde(default)]
    pub position: Option<[f64; 3]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub placements: Vec<ScenePlacement>,
    /// Initial drawer opening fraction.
    #[serde(default)]
    pub drawer_open_frac: f64,
    /// Sampling region for free placements (x range then y range).
    pub region_x: (f64, f64),
    pub region_y: (f64, f64),
    /// Minimum center distance between placed objects.
    pub min_separation: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            placements: Vec::new(),
            drawer_open_frac: 0.0,
            region_x: (0.10, 0.90),
            region_y: (0.10, 0.62),
            min_separation: 0.16,
        }
    }
}

const PLACEMENT_ATTEMPTS: usize = 100;

/// Deterministic reset: identical (config, seed) pairs produce identical
/// states.
pub fn reset(
    config: &SceneConfig,
    seed: u64,
    registry: &AttributeRegistry,
) -> Result<EnvState, EnvError> {
    let mut rng = crate::nn::derive_rng(seed, 0xEC0);
    let mut objects: Vec<ObjectInstance> = Vec::new();
    for (idx, placement) in config.placements.iter().enumerate() {
        let kind = registry
            .get(&placement.kind)
            .map_err(|e| EnvError::Configuration(e.to_string()))?;
        let position = match placement.position {
            Some(p) => {
                if p.iter().any(|v| !(0.0..=1.0).contains(v)) {
                    return Err(EnvError::Configuration(format!(
                        "pinned position out of workspace for {}",
                        placement.kind
                    )));
                }
                p
            }
            None => {
                let mut found = None;
                for _ in 0..PLACEMENT_ATTEMPTS {
                    let x = rng.gen_range(config.region_x.0..config.region_x.1);
                    let y = rng.gen_range(config.region_y.0..config.region_y.1);
                    let cand = [x, y, OBJ_REST_Z];
                    let clear = objects
                        .iter()
                        .all(|o| dist_xy(&o.position, &cand) >= config.min_separation);
                    if clear {
                        found = Some(cand);
                        break;
                    }
                }
                found.ok_or_else(|| {
                    EnvError::Placement(placement.kind.clone(), PLACEMENT_ATTEMPTS)
                })?
            }
        };
        objects.push(ObjectInstance {
            id: format!("{}#{}", kind.kind, idx),
            kind: kind.kind.clone(),
            category: kind.category,
            color: kind.color,
            shape: kind.shape,
            attributes: kind.tags.clone(),
            position,
            held: false,
        });
    }
    Ok(EnvState {
        objects,
        gripper_pose: [0.5, 0.30, 0.20],
        gripper_closed: false,
        wrist_angle: 0.0,
        drawer_open_frac: config.drawer_open_frac.clamp(0.0, 1.0),
        held_object: None,
        rng_seed: seed,
        step_count: 0,
    })
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepInfo {
    pub grasped: Option<String>,
    pub released: Option<String>,
    pub drawer_delta: f64,
}

fn clamp01(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

/// Pure kinematic step. Components are clipped to +-max_step before
/// application; grasp engages on an open->closed transition within
/// grasp_radius of an object.
pub fn step(
    state: &EnvState,
    action: &Action7,
    cfg: &EnvConfig,
) -> Result<(EnvState, StepInfo), EnvError> {
    if !action.is_finite() {
        return Err(EnvError::InvalidAction);
    }
    let mut next = state.clone();
    let mut info = StepInfo::default();
    let clip = |v: f64| v.clamp(-cfg.max_step, cfg.max_step);

    let old_pose = state.gripper_pose;
    let d = [
        clip(action.delta_position[0]),
        clip(action.delta_position[1]),
        clip(action.delta_position[2]),
    ];
    next.gripper_pose = [
        clamp01(old_pose[0] + d[0]),
        clamp01(old_pose[1] + d[1]),
        clamp01(old_pose[2] + d[2]),
    ];
    next.wrist_angle += clip(action.delta_rotation[2]);

    // Drawer drag: gripper motion inside the handle zone moves the tray.
    if drawer::in_handle_zone(&old_pose, state.drawer_open_frac) {
        let dy = next.gripper_pose[1] - old_pose[1];
        let new_frac = clamp01(state.drawer_open_frac - dy / drawer::TRAVEL);
        info.drawer_delta = new_frac - state.drawer_open_frac;
        next.drawer_open_frac = new_frac;
    }

    // Held object tracks the gripper.
    if let Some(held_id) = next.held_object.clone() {
        let pose = next.gripper_pose;
        if let Some(obj) = next.object_mut(&held_id) {
            obj.position = pose;
        }
    }

    // Gripper transitions.
    if action.gripper > 0.0 && !state.gripper_closed {
        next.gripper_closed = true;
        let pose = next.gripper_pose;
        let nearest = next
            .objects
            .iter()
            .filter(|o| !o.held)
            .map(|o| (o.id.clone(), dist3(&o.position, &pose)))
            .filter(|(_, d)| *d <= cfg.grasp_radius)
            .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
        if let Some((id, _)) = nearest {
            if let Some(obj) = next.object_mut(&id) {
                obj.held = true;
                obj.position = pose;
            }
            info.grasped = Some(id.clone());
            next.held_object = Some(id);
        }
    } else if action.gripper < 0.0 && state.gripper_closed {
        next.gripper_closed = false;
        if let Some(held_id) = next.held_object.take() {
            if let Some(obj) = next.object_mut(&held_id) {
                obj.held = false;
                obj.position[2] = OBJ_REST_Z;
            }
            info.released = Some(held_id);
        }
    } else if action.gripper > 0.0 {
        next.gripper_closed = true;
    }

    for obj in &mut next.objects {
        for v in &mut obj.position {
            *v = clamp01(*v);
        }
    }
    next.step_count = state.step_count.wrapping_add(1);
    Ok((next, info))
}

/// Pure success predicate.
pub fn check_success(state: &EnvState, task: &TaskSpec) -> bool {
    match task.task_type {
        TaskType::Pick => {
            state.held_object.as_deref() == Some(task.target_id.as_str())
                && state.gripper_pose[2] >= LIFT_Z
        }
        TaskType::MoveNear | TaskType::PutOn => {
            let (Some(target), Some(reference)) = (
                state.object(&task.target_id),
                task.reference_id
                    .as_deref()
                    .and_then(|r| state.object(r)),
            ) else {
                return false;
            };
            state.held_object.is_none()
                && dist_xy(&target.position, &reference.position) <= task.success_radius
        }
        TaskType::PutInDrawer => {
            let Some(target) = state.object(&task.target_id) else {
                return false;
            };
            let contained = drawer::contains_xy(target.position[0], target.position[1])
                && state.held_object.as_deref() != Some(task.target_id.as_str());
            match task.drawer_rule {
                PutInDrawerRule::ContainmentOnly => contained,
                PutInDrawerRule::RequireOpen => contained && state.drawer_open_frac >= 0.5,
                PutInDrawerRule::RequireClosedAfter => {
                    contained && state.drawer_open_frac <= 0.1
                }
            }
        }
        TaskType::OpenDrawer => state.drawer_open_frac >= 0.9,
        TaskType::CloseDrawer => state.drawer_open_frac <= 0.1,
    }
}

/// Oracle check that the scripted expert can in principle solve the task.
pub fn is_solvable(state: &EnvState, task: &TaskSpec) -> bool {
    if task.task_type.needs_target() && state.object(&task.target_id).is_none() {
        return false;
    }
    if task.task_type.needs_reference() {
        match task.reference_id.as_deref() {
            Some(r) if state.object(r).is_some() => {}
            _ => return false,
        }
    }
    true
}
