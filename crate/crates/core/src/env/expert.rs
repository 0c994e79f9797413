use super::types::*;
use super::world::{check_success, is_solvable, EnvError};

const HOVER_Z: f64 = 0.18;
const XY_TOL: f64 = 0.02;
const DROP_Z: f64 = 0.10;

/// Proportional move toward a waypoint; full error, clipped by the env at
/// max_step. `grip` is a hold command (+1 stay closed, -1 stay open).
fn goto(pose: &[f64; 3], target: &[f64; 3], grip: f64) -> Action7 {
    Action7 {
        delta_position: [
            target[0] - pose[0],
            target[1] - pose[1],
            target[2] - pose[2],
        ],
        delta_rotation: [0.0; 3],
        gripper: grip,
    }
}

fn stop(grip: f64) -> Action7 {
    Action7 {
        delta_position: [0.0; 3],
        delta_rotation: [0.0; 3],
        gripper: grip,
    }
}

/// Approach-descend-grasp toward an object that is not yet held.
fn grasp_phase(state: &EnvState, target_pos: &[f64; 3], cfg: &EnvConfig) -> Action7 {
    let pose = &state.gripper_pose;
    if dist3(pose, target_pos) <= 0.8 * cfg.grasp_radius {
        return stop(1.0);
    }
    if dist_xy(pose, target_pos) > XY_TOL {
        goto(pose, &[target_pos[0], target_pos[1], HOVER_Z], -1.0)
    } else {
        goto(pose, target_pos, -1.0)
    }
}

/// Carry the held object toward a drop point, then release.
fn transport_phase(state: &EnvState, dest_xy: &[f64; 2]) -> Action7 {
    let pose = &state.gripper_pose;
    if dist_xy(pose, &[dest_xy[0], dest_xy[1], 0.0]) > XY_TOL * 1.2 {
        goto(pose, &[dest_xy[0], dest_xy[1], HOVER_Z], 1.0)
    } else if pose[2] > DROP_Z + 0.01 {
        goto(pose, &[dest_xy[0], dest_xy[1], DROP_Z], 1.0)
    } else {
        stop(-1.0)
    }
}

fn drawer_plan(state: &EnvState, open: bool) -> Action7 {
    let frac = state.drawer_open_frac;
    let done = if open { frac >= 0.93 } else { frac <= 0.05 };
    if done {
        return stop(-1.0);
    }
    let handle = drawer::handle_pos(frac);
    let pose = &state.gripper_pose;
    if !drawer::in_handle_zone(pose, frac) {
        return goto(pose, &handle, -1.0);
    }
    // Drag the tray: -y opens, +y closes.
    let dy = if open {
        -(1.0 - frac) * drawer::TRAVEL - 0.01
    } else {
        frac * drawer::TRAVEL + 0.01
    };
    Action7 {
        delta_position: [handle[0] - pose[0], dy, 0.0],
        delta_rotation: [0.0; 3],
        gripper: -1.0,
    }
}

/// Next scripted-expert action along a waypoint plan. Stateless: the phase
/// is derived from the current state, so replay stays deterministic.
pub fn scripted_expert(
    state: &EnvState,
    task: &TaskSpec,
    cfg: &EnvConfig,
) -> Result<Action7, EnvError> {
    if !is_solvable(state, task) {
        return Err(EnvError::Planning(format!(
            "target {} absent",
            task.target_id
        )));
    }
    if check_success(state, task) {
        return Ok(stop(if state.gripper_closed { 1.0 } else { -1.0 }));
    }
    let pose = &state.gripper_pose;
    match task.task_type {
        TaskType::Pick => {
            match state.held_object.as_deref() {
                Some(id) if id == task.target_id => {
                    // Lift straight up.
                    Ok(goto(pose, &[pose[0], pose[1], LIFT_Z + 0.05], 1.0))
                }
                Some(_) => Ok(stop(-1.0)),
                None => {
                    let target = state.object(&task.target_id).unwrap();
                    Ok(grasp_phase(state, &target.position, cfg))
                }
            }
        }
        TaskType::MoveNear | TaskType::PutOn => {
            let reference = state
                .object(task.reference_id.as_deref().unwrap())
                .unwrap();
            let target = state.object(&task.target_id).unwrap();
            match state.held_object.as_deref() {
                Some(id) if id == task.target_id => {
                    let dest = if task.task_type == TaskType::PutOn {
                        [reference.position[0], reference.position[1]]
                    } else {
                        // Land inside the success radius, offset from the
                        // reference along the approach direction.
                        let dx = pose[0] - reference.position[0];
                        let dy = pose[1] - reference.position[1];
                        let norm = (dx * dx + dy * dy).sqrt().max(1e-6);
                        let off = 0.55 * task.success_radius;
                        [
                            reference.position[0] + dx / norm * off,
                            reference.position[1] + dy / norm * off,
                        ]
                    };
                    Ok(transport_phase(state, &dest))
                }
                Some(_) => Ok(stop(-1.0)),
                None => Ok(grasp_phase(state, &target.position, cfg)),
            }
        }
        TaskType::PutInDrawer => {
            let must_open = !matches!(task.drawer_rule, PutInDrawerRule::ContainmentOnly);
            match state.held_object.as_deref() {
                Some(id) if id == task.target_id => {
                    let dest = [
                        (drawer::INTERIOR_X.0 + drawer::INTERIOR_X.1) / 2.0,
                        (drawer::INTERIOR_Y.0 + drawer::INTERIOR_Y.1) / 2.0,
                    ];
                    Ok(transport_phase(state, &dest))
                }
                Some(_) => Ok(stop(-1.0)),
                None => {
                    let target = state.object(&task.target_id).unwrap();
                    let contained =
                        drawer::contains_xy(target.position[0], target.position[1]);
                    if contained {
                        // Only the drawer state is left to fix.
                        let open = task.drawer_rule == PutInDrawerRule::RequireOpen;
                        return Ok(drawer_plan(state, open));
                    }
                    if must_open && state.drawer_open_frac < 0.93 {
                        return Ok(drawer_plan(state, true));
                    }
                    Ok(grasp_phase(state, &target.position, cfg))
                }
            }
        }
        TaskType::OpenDrawer => Ok(drawer_plan(state, true)),
        TaskType::CloseDrawer => Ok(drawer_plan(state, false)),
    }
}
