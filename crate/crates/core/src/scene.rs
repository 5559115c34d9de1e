//! Kinematic bin world. Objects rest on the tray floor and never move unless
//! grasped; the gripper is a free-floating tooltip frame. Grasp success is
//! decided geometrically by a capture cylinder around the tool axis.

use nalgebra::{UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{CoreError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    /// Tray interior half sizes and wall height (m). The floor is at z = 0.
    pub tray_half: [f64; 2],
    pub tray_height: f64,
    pub tray_wall: f64,
    /// Workspace box for the tooltip: centre and half extents (m).
    pub workspace_center: [f64; 3],
    pub workspace_half: [f64; 3],
    pub max_step_translation: f64,
    pub max_step_rotation: f64,
    pub z_initiate: f64,
    pub capture_radius: f64,
    pub capture_half_height: f64,
    pub max_opening: f64,
    pub max_objects: usize,
    pub gripper_start: [f64; 3],
    /// Characteristic object half-size ranges (m); kept disjoint.
    pub train_size: [f64; 2],
    pub test_size: [f64; 2],
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            tray_half: [0.3, 0.2],
            tray_height: 0.1,
            tray_wall: 0.01,
            workspace_center: [0.0, 0.0, 0.25],
            workspace_half: [0.4, 0.3, 0.25],
            max_step_translation: 0.05,
            max_step_rotation: 0.25,
            z_initiate: 0.07,
            capture_radius: 0.03,
            capture_half_height: 0.04,
            max_opening: 0.08,
            max_objects: 5,
            gripper_start: [0.0, 0.0, 0.3],
            train_size: [0.015, 0.028],
            test_size: [0.029, 0.036],
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoreError::Config(m));
        if self.train_size[0] >= self.train_size[1] || self.test_size[0] >= self.test_size[1] {
            return bad("scene: size ranges must be non-empty".into());
        }
        if self.train_size[1] > self.test_size[0] && self.test_size[1] > self.train_size[0] {
            return bad("scene: train_size and test_size must be disjoint".into());
        }
        if self.max_objects == 0 {
            return bad("scene.max_objects must be >= 1".into());
        }
        if self.max_step_translation <= 0.0 || self.max_step_rotation <= 0.0 {
            return bad("scene: per-step limits must be positive".into());
        }
        if self.workspace_half.iter().any(|&h| h <= 0.0) {
            return bad("scene.workspace_half must be positive".into());
        }
        Ok(())
    }

    pub fn workspace_lo(&self) -> Vector3<f64> {
        Vector3::from(self.workspace_center) - Vector3::from(self.workspace_half)
    }

    pub fn workspace_hi(&self) -> Vector3<f64> {
        Vector3::from(self.workspace_center) + Vector3::from(self.workspace_half)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectSet {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tray {
    pub half_x: f64,
    pub half_y: f64,
    pub height: f64,
    pub wall: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ObjectKind {
    Sphere { radius: f64 },
    Cuboid { half: [f64; 3] },
    Cylinder { radius: f64, half_height: f64 },
}

impl ObjectKind {
    /// Height of the centroid when resting on the floor.
    pub fn rest_height(&self) -> f64 {
        match *self {
            ObjectKind::Sphere { radius } => radius,
            ObjectKind::Cuboid { half } => half[2],
            ObjectKind::Cylinder { half_height, .. } => half_height,
        }
    }

    /// Radius of the bounding circle in the floor plane.
    pub fn footprint_radius(&self) -> f64 {
        match *self {
            ObjectKind::Sphere { radius } => radius,
            ObjectKind::Cuboid { half } => half[0].hypot(half[1]),
            ObjectKind::Cylinder { radius, .. } => radius,
        }
    }

    pub fn bounding_radius(&self) -> f64 {
        match *self {
            ObjectKind::Sphere { radius } => radius,
            ObjectKind::Cuboid { half } => Vector3::from(half).norm(),
            ObjectKind::Cylinder { radius, half_height } => radius.hypot(half_height),
        }
    }

    pub fn min_dimension(&self) -> f64 {
        match *self {
            ObjectKind::Sphere { radius } => 2.0 * radius,
            ObjectKind::Cuboid { half } => 2.0 * half.iter().copied().fold(f64::INFINITY, f64::min),
            ObjectKind::Cylinder { radius, half_height } => 2.0 * radius.min(half_height),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Object {
    /// Instance id, starting at 1.
    pub id: u16,
    pub kind: ObjectKind,
    pub position: Vector3<f64>,
    pub yaw: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gripper {
    pub tooltip: Vector3<f64>,
    /// Tool frame; the approach axis is local -z.
    pub orientation: UnitQuaternion<f64>,
    pub opening: f64,
    pub attached: Option<u16>,
}

impl Gripper {
    pub fn approach_axis(&self) -> Vector3<f64> {
        self.orientation * Vector3::new(0.0, 0.0, -1.0)
    }

    /// `(x, y, z, sin a, cos a, sin b, cos b, sin c, cos c)` with `(a, b, c)`
    /// the roll/pitch/yaw of the tool frame.
    pub fn pose_vector(&self) -> [f64; 9] {
        let (a, b, c) = self.orientation.euler_angles();
        let t = self.tooltip;
        [t.x, t.y, t.z, a.sin(), a.cos(), b.sin(), b.cos(), c.sin(), c.cos()]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub tray: Tray,
    pub objects: Vec<Object>,
    pub gripper: Gripper,
    pub step_count: u32,
}

impl WorldState {
    pub fn object(&self, id: u16) -> Option<&Object> {
        self.objects.iter().find(|o| o.id == id)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("world serializes")
    }

    pub fn from_json(s: &str) -> Result<WorldState> {
        serde_json::from_str(s).map_err(|e| CoreError::Format(format!("world snapshot: {e}")))
    }
}

/// Tool pointing straight down: local -z along world -z.
pub fn top_down(yaw: f64) -> UnitQuaternion<f64> {
    UnitQuaternion::from_euler_angles(0.0, 0.0, yaw)
}

pub fn spawn(seed: u64, n_objects: usize, set: ObjectSet, cfg: &SceneConfig) -> Result<WorldState> {
    if n_objects == 0 || n_objects > cfg.max_objects {
        return Err(CoreError::Config(format!(
            "n_objects {n_objects} outside [1, {}]",
            cfg.max_objects
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size_range = match set {
        ObjectSet::Train => cfg.train_size,
        ObjectSet::Test => cfg.test_size,
    };
    let [hx, hy] = cfg.tray_half;
    let mut objects: Vec<Object> = Vec::with_capacity(n_objects);
    let mut tries = 0u32;
    while objects.len() < n_objects {
        let s = rng.random_range(size_range[0]..size_range[1]);
        let kind = match rng.random_range(0..3) {
            0 => ObjectKind::Sphere { radius: s },
            1 => ObjectKind::Cuboid {
                half: [s, s * rng.random_range(0.6..1.0), s * rng.random_range(0.6..1.0)],
            },
            _ => ObjectKind::Cylinder {
                radius: s,
                half_height: s * rng.random_range(0.7..1.3),
            },
        };
        let fr = kind.footprint_radius();
        let x = rng.random_range(-hx + fr..hx - fr);
        let y = rng.random_range(-hy + fr..hy - fr);
        let yaw = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
        let position = Vector3::new(x, y, kind.rest_height());
        let clear = objects.iter().all(|o| {
            (o.position - position).norm() > o.kind.bounding_radius() + kind.bounding_radius()
        });
        tries += 1;
        if clear {
            objects.push(Object {
                id: objects.len() as u16 + 1,
                kind,
                position,
                yaw,
            });
        } else if tries >= 10_000 {
            return Err(CoreError::Placement(format!(
                "could not place {n_objects} objects after 10000 attempts (tray too full)"
            )));
        }
    }
    Ok(WorldState {
        tray: Tray {
            half_x: hx,
            half_y: hy,
            height: cfg.tray_height,
            wall: cfg.tray_wall,
        },
        objects,
        gripper: Gripper {
            tooltip: Vector3::from(cfg.gripper_start),
            orientation: top_down(0.0),
            opening: cfg.max_opening,
            attached: None,
        },
        step_count: 0,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GripperAction {
    pub translation: [f64; 3],
    /// Euler deltas (roll, pitch, yaw) applied in the world frame.
    pub rotation: [f64; 3],
}

impl GripperAction {
    pub const ZERO: GripperAction = GripperAction {
        translation: [0.0; 3],
        rotation: [0.0; 3],
    };

    /// Map a squashed policy output in `[-1, 1]^d` (d = 6, or 4 for
    /// `(dx, dy, dz, dc)`) onto the per-step limits.
    pub fn from_unit(u: &[f64], cfg: &SceneConfig) -> GripperAction {
        let t = cfg.max_step_translation;
        let r = cfg.max_step_rotation;
        match u.len() {
            6 => GripperAction {
                translation: [u[0] * t, u[1] * t, u[2] * t],
                rotation: [u[3] * r, u[4] * r, u[5] * r],
            },
            4 => GripperAction {
                translation: [u[0] * t, u[1] * t, u[2] * t],
                rotation: [0.0, 0.0, u[3] * r],
            },
            n => panic!("gripper action must have 4 or 6 components, got {n}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dof {
    #[serde(rename = "4")]
    Four,
    #[serde(rename = "6")]
    Six,
}

impl Dof {
    pub fn action_dim(self) -> usize {
        match self {
            Dof::Four => 4,
            Dof::Six => 6,
        }
    }
}

/// Apply one clamped motion step. Returns the new state and whether any
/// clamping (limit or workspace) took place.
pub fn step_gripper(world: &WorldState, action: &GripperAction, dof: Dof, cfg: &SceneConfig) -> (WorldState, bool) {
    let mut next = world.clone();
    let mut clamped = false;
    let lim_t = cfg.max_step_translation;
    let lim_r = cfg.max_step_rotation;
    let mut d = [0.0; 3];
    for k in 0..3 {
        d[k] = action.translation[k].clamp(-lim_t, lim_t);
        clamped |= d[k] != action.translation[k];
    }
    let mut r = [0.0; 3];
    for k in 0..3 {
        r[k] = action.rotation[k].clamp(-lim_r, lim_r);
        clamped |= r[k] != action.rotation[k];
    }
    let lo = cfg.workspace_lo();
    let hi = cfg.workspace_hi();
    let mut tip = world.gripper.tooltip + Vector3::from(d);
    for k in 0..3 {
        let c = tip[k].clamp(lo[k], hi[k]);
        clamped |= c != tip[k];
        tip[k] = c;
    }
    next.gripper.tooltip = tip;
    next.gripper.orientation = match dof {
        Dof::Six => {
            let q = UnitQuaternion::from_euler_angles(r[0], r[1], r[2]) * world.gripper.orientation;
            UnitQuaternion::new_normalize(q.into_inner())
        }
        Dof::Four => {
            let (_, _, yaw) = world.gripper.orientation.euler_angles();
            top_down(wrap_angle(yaw + r[2]))
        }
    };
    next.step_count += 1;
    (next, clamped)
}

pub fn wrap_angle(a: f64) -> f64 {
    use std::f64::consts::PI;
    let w = (a + PI).rem_euclid(2.0 * PI) - PI;
    if w >= PI {
        -PI
    } else {
        w
    }
}

pub fn is_grasp_initiated(world: &WorldState, cfg: &SceneConfig) -> bool {
    world.gripper.tooltip.z < cfg.z_initiate
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraspOutcome {
    pub initiated: bool,
    pub lifted: bool,
    pub grasped_object: Option<u16>,
    pub tooltip_at_initiation: Vector3<f64>,
}

impl GraspOutcome {
    pub fn not_initiated(world: &WorldState) -> GraspOutcome {
        GraspOutcome {
            initiated: false,
            lifted: false,
            grasped_object: None,
            tooltip_at_initiation: world.gripper.tooltip,
        }
    }
}

/// Pure function of the world: which object (if any) the closing fingers capture.
pub fn attempt_grasp(world: &WorldState, cfg: &SceneConfig) -> GraspOutcome {
    let tip = world.gripper.tooltip;
    if !is_grasp_initiated(world, cfg) {
        return GraspOutcome::not_initiated(world);
    }
    let axis = world.gripper.approach_axis();
    let mut best: Option<(f64, u16)> = None;
    for obj in &world.objects {
        let d = obj.position - tip;
        let along = d.dot(&axis);
        let radial = (d - axis * along).norm();
        let inside = radial <= cfg.capture_radius && along.abs() <= cfg.capture_half_height;
        if inside && obj.kind.min_dimension() < world.gripper.opening.min(cfg.max_opening) {
            // nearest to the axis wins; equal distances go to the lower id
            if best.is_none_or(|(r, id)| radial < r || (radial == r && obj.id < id)) {
                best = Some((radial, obj.id));
            }
        }
    }
    GraspOutcome {
        initiated: true,
        lifted: best.is_some(),
        grasped_object: best.map(|(_, id)| id),
        tooltip_at_initiation: tip,
    }
}

/// Mark the grasped object as attached (the lift itself is not simulated).
pub fn apply_outcome(world: &mut WorldState, outcome: &GraspOutcome) {
    world.gripper.attached = outcome.grasped_object;
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_action_only_counts_a_step() {
        let cfg = SceneConfig::default();
        let w = spawn(1, 3, ObjectSet::Train, &cfg).unwrap();
        let (n, clamped) = step_gripper(&w, &GripperAction::ZERO, Dof::Six, &cfg);
        assert!(!clamped);
        assert_eq!(n.gripper.tooltip, w.gripper.tooltip);
        assert!(n.gripper.orientation.angle_to(&w.gripper.orientation) < 1e-12);
        assert_eq!(n.step_count, 1);
    }

    #[test]
    fn oversized_action_clamped() {
        let cfg = SceneConfig::default();
        let w = spawn(1, 1, ObjectSet::Train, &cfg).unwrap();
        let a = GripperAction {
            translation: [0.3, 0.0, 0.0],
            rotation: [0.0, 0.0, -2.0],
        };
        let (n, clamped) = step_gripper(&w, &a, Dof::Six, &cfg);
        assert!(clamped);
        assert!((n.gripper.tooltip.x - 0.05).abs() < 1e-12);
        let (_, _, yaw) = n.gripper.orientation.euler_angles();
        assert!((yaw + 0.25).abs() < 1e-12);
    }

    #[test]
    fn four_dof_keeps_axis_vertical() {
        let cfg = SceneConfig::default();
        let w = spawn(1, 1, ObjectSet::Train, &cfg).unwrap();
        let a = GripperAction {
            translation: [0.0; 3],
            rotation: [0.2, -0.2, 0.1],
        };
        let (n, _) = step_gripper(&w, &a, Dof::Four, &cfg);
        assert!((n.gripper.approach_axis() - Vector3::new(0.0, 0.0, -1.0)).norm() < 1e-12);
        let (_, _, yaw) = n.gripper.orientation.euler_angles();
        assert!((yaw - 0.1).abs() < 1e-12);
    }

    #[test]
    fn initiation_threshold_is_strict() {
        let cfg = SceneConfig::default();
        let mut w = spawn(1, 1, ObjectSet::Train, &cfg).unwrap();
        for (z, want) in [(0.30, false), (0.05, true), (0.07, false)] {
            w.gripper.tooltip.z = z;
            assert_eq!(is_grasp_initiated(&w, &cfg), want, "z = {z}");
        }
    }

    #[test]
    fn pose_vector_pairs_on_unit_circle() {
        let g = Gripper {
            tooltip: Vector3::new(0.1, 0.2, 0.3),
            orientation: UnitQuaternion::from_euler_angles(0.3, -0.4, 2.0),
            opening: 0.08,
            attached: None,
        };
        let p = g.pose_vector();
        for k in 0..3 {
            assert!((p[3 + 2 * k].powi(2) + p[4 + 2 * k].powi(2) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn wrap_angle_range() {
        use std::f64::consts::PI;
        assert_eq!(wrap_angle(PI), -PI);
        assert!((wrap_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-12);
        assert!((wrap_angle(0.5) - 0.5).abs() < 1e-15);
    }
}
