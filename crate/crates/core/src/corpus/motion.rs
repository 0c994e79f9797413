//! Motion phrases from proprioception: compare the end-effector pose W steps
//! ahead against per-axis thresholds and emit a conjunction in the fixed
//! order x, y, z, gripper.

use super::CorpusError;
use crate::env::Episode;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MotionAnnotatorConfig {
    pub window_w: usize,
    pub axis_threshold: f64,
    pub gripper_threshold: f64,
}

impl Default for MotionAnnotatorConfig {
    fn default() -> Self {
        MotionAnnotatorConfig {
            window_w: 8,
            axis_threshold: 0.03,
            gripper_threshold: 0.5,
        }
    }
}

/// Phrase for one displacement window. The y axis points away from the robot,
/// so positive y displacement reads "move forward".
pub fn motion_phrase(
    displacement: [f64; 3],
    gripper_before: bool,
    gripper_after: bool,
    cfg: &MotionAnnotatorConfig,
) -> String {
    let mut parts: Vec<&str> = Vec::new();
    let t = cfg.axis_threshold;
    if displacement[0] > t {
        parts.push("move right");
    } else if displacement[0] < -t {
        parts.push("move left");
    }
    if displacement[1] > t {
        parts.push("move forward");
    } else if displacement[1] < -t {
        parts.push("move backward");
    }
    if displacement[2] > t {
        parts.push("move up");
    } else if displacement[2] < -t {
        parts.push("move down");
    }
    let flip = (gripper_after as i32 - gripper_before as i32).abs() as f64;
    if flip > cfg.gripper_threshold {
        parts.push(if gripper_after {
            "close gripper"
        } else {
            "open gripper"
        });
    }
    if parts.is_empty() {
        "stop".to_string()
    } else {
        parts.join(" and ")
    }
}

/// One phrase per step t in `0 .. len - W`, derived from states t and t+W.
pub fn annotate_language_motion(
    episode: &Episode,
    cfg: &MotionAnnotatorConfig,
) -> Result<Vec<String>, CorpusError> {
    if cfg.window_w == 0 || cfg.axis_threshold <= 0.0 || cfg.gripper_threshold <= 0.0 {
        return Err(CorpusError::Annotation(
            "window and thresholds must be positive".into(),
        ));
    }
    let n = episode.states.len();
    if n <= cfg.window_w {
        return Err(CorpusError::Annotation(format!(
            "episode has {n} states, need more than window {}",
            cfg.window_w
        )));
    }
    Ok((0..n - cfg.window_w)
        .map(|t| {
            let a = &episode.states[t];
            let b = &episode.states[t + cfg.window_w];
            let d = [
                b.gripper_pose[0] - a.gripper_pose[0],
                b.gripper_pose[1] - a.gripper_pose[1],
                b.gripper_pose[2] - a.gripper_pose[2],
            ];
            motion_phrase(d, a.gripper_closed, b.gripper_closed, cfg)
        })
        .collect())
}
