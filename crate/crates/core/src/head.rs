//! The camera head: a 6R serial arm described by a Denavit-Hartenberg table,
//! with forward kinematics, a damped least-squares IK solver and the
//! fixation-sphere viewpoint sampler.

use std::f64::consts::{FRAC_PI_2, PI};

use nalgebra::{Isometry3, Matrix6, Rotation3, Translation3, UnitQuaternion, Vector3, Vector6};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::raycam::{look_at, CameraPose};
use crate::scene::wrap_angle;
use crate::{CoreError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DhRow {
    pub a: f64,
    pub alpha: f64,
    pub d: f64,
    pub theta_offset: f64,
}

impl DhRow {
    const fn new(a: f64, alpha: f64, d: f64) -> DhRow {
        DhRow {
            a,
            alpha,
            d,
            theta_offset: 0.0,
        }
    }

    /// `Rz(theta) Tz(d) Tx(a) Rx(alpha)`.
    fn transform(&self, q: f64) -> Isometry3<f64> {
        let th = q + self.theta_offset;
        let rz = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), th);
        let rx = UnitQuaternion::from_axis_angle(&Vector3::x_axis(), self.alpha);
        let t = Vector3::new(self.a * th.cos(), self.a * th.sin(), self.d);
        Isometry3::from_parts(Translation3::from(t), rz * rx)
    }
}

pub type HeadJoints = [f64; 6];

/// Elbow arm with a spherical wrist and the camera 0.1 m past the wrist centre.
pub const DEFAULT_DH: [DhRow; 6] = [
    DhRow::new(0.0, FRAC_PI_2, 0.0),
    DhRow::new(1.0, 0.0, 0.0),
    DhRow::new(0.0, FRAC_PI_2, 0.0),
    DhRow::new(0.0, -FRAC_PI_2, 1.0),
    DhRow::new(0.0, FRAC_PI_2, 0.0),
    DhRow::new(0.0, 0.0, 0.1),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    /// Shoulder position in the world (m).
    pub base: [f64; 3],
    pub dh_table: Vec<DhRow>,
    pub yaw_range: [f64; 2],
    pub pitch_range: [f64; 2],
    pub distance_range: [f64; 2],
    pub ik_tol: f64,
    pub ik_max_iters: usize,
    pub damping: f64,
    pub max_resamples: usize,
    pub fov_y: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            base: [-0.6, 0.0, 0.9],
            dh_table: DEFAULT_DH.to_vec(),
            yaw_range: [-PI, PI],
            pitch_range: [30f64.to_radians(), 65f64.to_radians()],
            distance_range: [0.4, 0.7],
            ik_tol: 1e-3,
            ik_max_iters: 200,
            damping: 0.05,
            max_resamples: 20,
            fov_y: 60f64.to_radians(),
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CoreError::Config(format!("head.{m}")));
        if self.dh_table.len() != 6 {
            return bad("dh_table must have exactly 6 rows");
        }
        for (name, r) in [
            ("yaw_range", self.yaw_range),
            ("pitch_range", self.pitch_range),
            ("distance_range", self.distance_range),
        ] {
            if !(r[0] < r[1]) {
                return Err(CoreError::Config(format!("head.{name} must satisfy lo < hi, got {r:?}")));
            }
        }
        if self.distance_range[0] <= 0.0 {
            return bad("distance_range must be positive");
        }
        if self.pitch_range[0] <= 0.0 || self.pitch_range[1] >= FRAC_PI_2 {
            return bad("pitch_range must lie inside (0, pi/2)");
        }
        if self.ik_tol <= 0.0 || self.ik_max_iters == 0 {
            return bad("ik_tol and ik_max_iters must be positive");
        }
        if !(self.fov_y > 0.0 && self.fov_y < PI) {
            return bad("fov_y must lie in (0, pi)");
        }
        Ok(())
    }

    pub fn chain(&self) -> DhChain {
        DhChain {
            base: Vector3::from(self.base),
            rows: self.dh_table.clone().try_into().expect("validated: 6 rows"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DhChain {
    pub base: Vector3<f64>,
    pub rows: [DhRow; 6],
}

/// Camera frame relative to the last DH frame: optical axis along +z6,
/// so the camera's -z equals z6.
fn camera_mount() -> UnitQuaternion<f64> {
    UnitQuaternion::from_axis_angle(&Vector3::x_axis(), PI)
}

impl DhChain {
    /// Base frame followed by the frame after each joint (7 frames).
    pub fn frames(&self, q: &HeadJoints) -> [Isometry3<f64>; 7] {
        let mut out = [Isometry3::identity(); 7];
        out[0] = Isometry3::from_parts(Translation3::from(self.base), UnitQuaternion::identity());
        for i in 0..6 {
            out[i + 1] = out[i] * self.rows[i].transform(q[i]);
        }
        out
    }

    /// Camera pose in the world for joint vector `q`.
    pub fn fk_iso(&self, q: &HeadJoints) -> Isometry3<f64> {
        let f = self.frames(q)[6];
        Isometry3::from_parts(f.translation, f.rotation * camera_mount())
    }

    pub fn fk(&self, q: &HeadJoints, fov_y: f64, resolution: usize) -> CameraPose {
        let iso = self.fk_iso(q);
        CameraPose {
            position: iso.translation.vector,
            orientation: iso.rotation,
            fov_y,
            resolution,
        }
    }

    /// Geometric Jacobian at the camera origin: rows 0..3 linear, 3..6 angular.
    pub fn jacobian(&self, q: &HeadJoints) -> Matrix6<f64> {
        let frames = self.frames(q);
        let p = frames[6].translation.vector;
        let mut j = Matrix6::zeros();
        for i in 0..6 {
            let z = frames[i].rotation * Vector3::z();
            let o = frames[i].translation.vector;
            let lin = z.cross(&(p - o));
            for k in 0..3 {
                j[(k, i)] = lin[k];
                j[(k + 3, i)] = z[k];
            }
        }
        j
    }
}

/// Pose error `(target - current)`: translation and rotation vector, world frame.
pub fn pose_error(target: &Isometry3<f64>, current: &Isometry3<f64>) -> Vector6<f64> {
    let dp = target.translation.vector - current.translation.vector;
    let dr = (target.rotation * current.rotation.inverse()).scaled_axis();
    Vector6::new(dp.x, dp.y, dp.z, dr.x, dr.y, dr.z)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IkSolution {
    pub joints: HeadJoints,
    pub position_residual: f64,
    pub orientation_residual: f64,
    pub iterations: usize,
}

fn residuals(e: &Vector6<f64>) -> (f64, f64) {
    (e.fixed_rows::<3>(0).norm(), e.fixed_rows::<3>(3).norm())
}

fn wrap_joints(q: &mut HeadJoints) {
    for v in q.iter_mut() {
        *v = wrap_angle(*v);
    }
}

/// Damped least squares from `seed`. The damping starts at `cfg.damping` and
/// adapts to the residual: halved after an improving step, raised fourfold
/// (and the step rejected) otherwise. Iterates past `ik_tol` to a tight
/// residual so the camera lands on the requested pose, not merely near it.
pub fn ik(chain: &DhChain, target: &Isometry3<f64>, seed: &HeadJoints, cfg: &HeadConfig) -> Result<IkSolution> {
    const TIGHT: f64 = 1e-11;
    let mut q = *seed;
    let mut e = pose_error(target, &chain.fk_iso(&q));
    let mut lambda = cfg.damping;
    let mut iterations = 0;
    while iterations < cfg.ik_max_iters {
        let (pr, or) = residuals(&e);
        if pr < TIGHT && or < TIGHT {
            break;
        }
        iterations += 1;
        let j = chain.jacobian(&q);
        let jjt = j * j.transpose() + Matrix6::identity() * (lambda * lambda);
        let Some(y) = jjt.lu().solve(&e) else {
            lambda *= 4.0;
            continue;
        };
        let dq = j.transpose() * y;
        let mut cand = q;
        for i in 0..6 {
            cand[i] += dq[i];
        }
        wrap_joints(&mut cand);
        let e_new = pose_error(target, &chain.fk_iso(&cand));
        if e_new.norm() < e.norm() {
            q = cand;
            e = e_new;
            lambda = (lambda * 0.5).max(1e-9);
        } else {
            lambda *= 4.0;
            if lambda > 1e4 {
                break;
            }
        }
    }
    let (position_residual, orientation_residual) = residuals(&e);
    if position_residual < cfg.ik_tol && orientation_residual < cfg.ik_tol {
        Ok(IkSolution {
            joints: q,
            position_residual,
            orientation_residual,
            iterations,
        })
    } else {
        Err(CoreError::Ik {
            position_residual,
            orientation_residual,
        })
    }
}

/// Closed-form starting points for an elbow arm with spherical wrist
/// (the layout of `DEFAULT_DH`): shoulder/elbow from the wrist centre,
/// wrist angles from a ZYZ decomposition. Other tables still get these as
/// initial guesses; DLS does the rest.
pub fn geometric_seeds(chain: &DhChain, target: &Isometry3<f64>) -> Vec<HeadJoints> {
    let l1 = chain.rows[1].a;
    let l2 = chain.rows[3].d;
    let d6 = chain.rows[5].d;
    let r06 = target.rotation * camera_mount().inverse();
    let z6 = r06 * Vector3::z();
    let pw = target.translation.vector - z6 * d6 - chain.base;
    let mut seeds = Vec::new();
    let base_angle = pw.y.atan2(pw.x);
    let rho = pw.x.hypot(pw.y);
    for (t1, r) in [(base_angle, rho), (base_angle + PI, -rho)] {
        let c = ((r * r + pw.z * pw.z - l1 * l1 - l2 * l2) / (2.0 * l1 * l2)).clamp(-1.0, 1.0);
        for elbow in [1.0, -1.0] {
            let qrel = elbow * c.acos();
            let t2 = pw.z.atan2(r) - (l2 * qrel.sin()).atan2(l1 + l2 * qrel.cos());
            let t3 = qrel + FRAC_PI_2;
            let mut q = [t1, t2, t3, 0.0, 0.0, 0.0];
            for i in 0..3 {
                q[i] -= chain.rows[i].theta_offset;
            }
            let r03 = chain.frames(&q)[3].rotation;
            let m = Rotation3::from(r03.inverse() * r06).into_inner();
            let s5 = m[(0, 2)].hypot(m[(1, 2)]);
            for flip in [1.0, -1.0] {
                let t5 = (flip * s5).atan2(m[(2, 2)]);
                let (t4, t6) = if s5 > 1e-9 {
                    ((flip * m[(1, 2)]).atan2(flip * m[(0, 2)]), (flip * m[(2, 1)]).atan2(-flip * m[(2, 0)]))
                } else {
                    (0.0, m[(1, 0)].atan2(m[(0, 0)]))
                };
                let mut s = q;
                s[3] = t4 - chain.rows[3].theta_offset;
                s[4] = t5 - chain.rows[4].theta_offset;
                s[5] = t6 - chain.rows[5].theta_offset;
                wrap_joints(&mut s);
                seeds.push(s);
            }
        }
    }
    seeds
}

/// IK without a caller seed: try the geometric seeds in turn.
pub fn solve(chain: &DhChain, target: &Isometry3<f64>, cfg: &HeadConfig) -> Result<IkSolution> {
    let mut last = None;
    for seed in geometric_seeds(chain, target) {
        match ik(chain, target, &seed, cfg) {
            Ok(s) => return Ok(s),
            Err(e) => last = Some(e),
        }
    }
    Err(last.expect("at least one seed"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewSpec {
    pub fixation: Vector3<f64>,
    pub camera: CameraPose,
    pub joints: HeadJoints,
    pub yaw: f64,
    pub pitch: f64,
    pub distance: f64,
}

pub fn pose_iso(cam: &CameraPose) -> Isometry3<f64> {
    Isometry3::from_parts(Translation3::from(cam.position), cam.orientation)
}

/// Camera on the fixation sphere, aimed at `fixation`, realised by the arm.
/// The returned camera is `fk(joints)`, so the joint vector always reproduces it.
pub fn sample_viewpoint(
    chain: &DhChain,
    cfg: &HeadConfig,
    fixation: Vector3<f64>,
    resolution: usize,
    rng: &mut impl Rng,
) -> Result<ViewSpec> {
    let mut last_err = None;
    for _ in 0..cfg.max_resamples {
        let yaw = rng.random_range(cfg.yaw_range[0]..cfg.yaw_range[1]);
        let pitch = rng.random_range(cfg.pitch_range[0]..=cfg.pitch_range[1]);
        let distance = rng.random_range(cfg.distance_range[0]..=cfg.distance_range[1]);
        let offset = Vector3::new(pitch.cos() * yaw.cos(), pitch.cos() * yaw.sin(), pitch.sin()) * distance;
        let wanted = look_at(fixation + offset, fixation, Vector3::z(), cfg.fov_y, resolution)?;
        match solve(chain, &pose_iso(&wanted), cfg) {
            Ok(sol) => {
                return Ok(ViewSpec {
                    fixation,
                    camera: chain.fk(&sol.joints, cfg.fov_y, resolution),
                    joints: sol.joints,
                    yaw,
                    pitch,
                    distance,
                })
            }
            Err(e) => last_err = Some(e),
        }
    }
    Err(CoreError::Viewpoint(format!(
        "no reachable viewpoint around {:?} after {} samples (last: {})",
        fixation.as_slice(),
        cfg.max_resamples,
        last_err.map(|e| e.to_string()).unwrap_or_default()
    )))
}
