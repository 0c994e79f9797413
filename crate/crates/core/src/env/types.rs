use crate::registry::{Category, Color, Shape};
use serde::{Deserialize, Serialize};

/// Drawer fixture geometry, in workspace units. The drawer body sits at the
/// top edge of the table; the tray front slides toward -y as it opens.
pub mod drawer {
    pub const BODY_X: (f64, f64) = (0.60, 0.95);
    pub const BODY_Y: (f64, f64) = (0.82, 0.98);
    pub const INTERIOR_X: (f64, f64) = (0.63, 0.92);
    pub const INTERIOR_Y: (f64, f64) = (0.84, 0.96);
    pub const TRAVEL: f64 = 0.20;
    pub const HANDLE_X: f64 = 0.775;
    pub const HANDLE_Z: f64 = 0.05;
    /// Zone around the handle within which gripper motion drags the tray.
    pub const HANDLE_DX: f64 = 0.07;
    pub const HANDLE_DY: f64 = 0.05;
    pub const HANDLE_MAX_Z: f64 = 0.14;
    /// Bounding region of everything the drawer draws (for pixel-diff masks).
    pub const REGION_X: (f64, f64) = (0.56, 0.99);
    pub const REGION_Y: (f64, f64) = (0.55, 1.0);

    pub fn front_y(open_frac: f64) -> f64 {
        BODY_Y.0 - TRAVEL * open_frac
    }

    pub fn handle_pos(open_frac: f64) -> [f64; 3] {
        [HANDLE_X, front_y(open_frac), HANDLE_Z]
    }

    pub fn contains_xy(x: f64, y: f64) -> bool {
        x >= INTERIOR_X.0 && x <= INTERIOR_X.1 && y >= INTERIOR_Y.0 && y <= INTERIOR_Y.1
    }

    pub fn in_handle_zone(pose: &[f64; 3], open_frac: f64) -> bool {
        let h = handle_pos(open_frac);
        (pose[0] - h[0]).abs() <= HANDLE_DX
            && (pose[1] - h[1]).abs() <= HANDLE_DY
            && pose[2] <= HANDLE_MAX_Z
    }
}

/// Resting height of objects on the table surface.
pub const OBJ_REST_Z: f64 = 0.02;
/// Gripper height above which a held object counts as lifted.
pub const LIFT_Z: f64 = 0.15;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectInstance {
    pub id: String,
    /// Registry key, e.g. "coke_can".
    pub kind: String,
    pub category: Category,
    pub color: Color,
    pub shape: Shape,
    /// Semantic tags copied from the registry entry.
    pub attributes: Vec<String>,
    pub position: [f64; 3],
    pub held: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub objects: Vec<ObjectInstance>,
    pub gripper_pose: [f64; 3],
    pub gripper_closed: bool,
    pub wrist_angle: f64,
    pub drawer_open_frac: f64,
    pub held_object: Option<String>,
    pub rng_seed: u64,
    pub step_count: u32,
}

impl EnvState {
    pub fn object(&self, id: &str) -> Option<&ObjectInstance> {
        self.objects.iter().find(|o| o.id == id)
    }

    pub fn object_mut(&mut self, id: &str) -> Option<&mut ObjectInstance> {
        self.objects.iter_mut().find(|o| o.id == id)
    }

    /// 8-dim proprioception: pose(3), wrist, gripper_closed, drawer frac,
    /// two zero pads. Values already in [0,1]-ish range; the expert
    /// normalizes to [-1, 1].
    pub fn proprio(&self) -> [f64; 8] {
        [
            self.gripper_pose[0],
            self.gripper_pose[1],
            self.gripper_pose[2],
            self.wrist_angle,
            if self.gripper_closed { 1.0 } else { 0.0 },
            self.drawer_open_frac,
            0.0,
            0.0,
        ]
    }
}

/// 7-dim action: position delta (3), rotation delta (3, applied to a scalar
/// wrist angle), gripper command (>0 close, <0 open, 0 hold).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Action7 {
    pub delta_position: [f64; 3],
    pub delta_rotation: [f64; 3],
    pub gripper: f64,
}

impl Action7 {
    pub fn zero() -> Self {
        Self {
            delta_position: [0.0; 3],
            delta_rotation: [0.0; 3],
            gripper: 0.0,
        }
    }

    pub fn to_vec7(&self) -> [f64; 7] {
        [
            self.delta_position[0],
            self.delta_position[1],
            self.delta_position[2],
            self.delta_rotation[0],
            self.delta_rotation[1],
            self.delta_rotation[2],
            self.gripper,
        ]
    }

    pub fn from_vec7(v: &[f64]) -> Self {
        Self {
            delta_position: [v[0], v[1], v[2]],
            delta_rotation: [v[3], v[4], v[5]],
            gripper: v[6],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_vec7().iter().all(|v| v.is_finite())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskType {
    Pick,
    MoveNear,
    PutOn,
    PutInDrawer,
    OpenDrawer,
    CloseDrawer,
}

impl TaskType {
    pub fn needs_target(self) -> bool {
        !matches!(self, TaskType::OpenDrawer | TaskType::CloseDrawer)
    }

    pub fn needs_reference(self) -> bool {
        matches!(self, TaskType::MoveNear | TaskType::PutOn)
    }

    pub fn default_success_radius(self) -> f64 {
        match self {
            TaskType::Pick => 0.06,
            TaskType::MoveNear => 0.14,
            TaskType::PutOn => 0.08,
            TaskType::PutInDrawer | TaskType::OpenDrawer | TaskType::CloseDrawer => 0.06,
        }
    }
}

/// How put-in-drawer success treats the drawer state.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PutInDrawerRule {
    /// Containment only (default).
    #[default]
    ContainmentOnly,
    /// Drawer must be open at success time (subtask-chain tasks).
    RequireOpen,
    /// Drawer must be closed again after containment.
    RequireClosedAfter,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_type: TaskType,
    pub target_id: String,
    pub reference_id: Option<String>,
    pub success_radius: f64,
    #[serde(default)]
    pub drawer_rule: PutInDrawerRule,
}

impl TaskSpec {
    pub fn new(task_type: TaskType, target_id: &str, reference_id: Option<&str>) -> Self {
        Self {
            task_type,
            target_id: target_id.to_string(),
            reference_id: reference_id.map(|s| s.to_string()),
            success_radius: task_type.default_success_radius(),
            drawer_rule: PutInDrawerRule::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub max_step: f64,
    pub grasp_radius: f64,
    pub max_episode_steps: u32,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            max_step: 0.05,
            grasp_radius: 0.06,
            max_episode_steps: 120,
        }
    }
}

pub fn dist3(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

pub fn dist_xy(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}
