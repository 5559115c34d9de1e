//! Pinhole camera and a one-ray-per-pixel raycaster over analytic primitives.
//!
//! Camera frame follows the usual graphics convention: +x right, +y up, the
//! camera looks down its own -z axis.

use std::path::Path;

use nalgebra::{Matrix3, Point3, Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::fovea::{write_png, Image};
use crate::scene::{ObjectKind, WorldState};
use crate::{CoreError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    pub position: Vector3<f64>,
    pub orientation: UnitQuaternion<f64>,
    pub fov_y: f64,
    pub resolution: usize,
}

impl CameraPose {
    /// World-space direction of the optical axis.
    pub fn forward(&self) -> Vector3<f64> {
        self.orientation * Vector3::new(0.0, 0.0, -1.0)
    }

    /// Focal length in pixels.
    pub fn focal_px(&self) -> f64 {
        self.resolution as f64 * 0.5 / (self.fov_y * 0.5).tan()
    }

    pub fn with_resolution(&self, resolution: usize) -> CameraPose {
        CameraPose {
            resolution,
            ..self.clone()
        }
    }

    /// World-space unit ray through the centre of pixel `(row, col)`.
    pub fn ray_dir(&self, row: usize, col: usize) -> Vector3<f64> {
        let half = self.resolution as f64 * 0.5;
        let f = self.focal_px();
        let x = (col as f64 + 0.5 - half) / f;
        let y = -(row as f64 + 0.5 - half) / f;
        (self.orientation * Vector3::new(x, y, -1.0)).normalize()
    }
}

pub fn look_at(
    eye: Vector3<f64>,
    target: Vector3<f64>,
    up: Vector3<f64>,
    fov_y: f64,
    resolution: usize,
) -> Result<CameraPose> {
    let f = target - eye;
    if f.norm() < 1e-12 {
        return Err(CoreError::Geometry("look_at: eye coincides with target".into()));
    }
    let f = f.normalize();
    let right = f.cross(&up);
    if right.norm() < 1e-9 {
        return Err(CoreError::Geometry("look_at: up vector parallel to view direction".into()));
    }
    if !(fov_y > 0.0 && fov_y < std::f64::consts::PI) {
        return Err(CoreError::Geometry(format!("fov_y {fov_y} outside (0, pi)")));
    }
    let right = right.normalize();
    let cam_up = right.cross(&f);
    let m = Matrix3::from_columns(&[right, cam_up, -f]);
    Ok(CameraPose {
        position: eye,
        orientation: UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(m)),
        fov_y,
        resolution,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Projection {
    Pixel { px: f64, py: f64 },
    Behind,
}

/// Continuous pixel coordinates: `(0, 0)` is the top-left corner of the image,
/// `(res/2, res/2)` its centre.
pub fn project(point: &Vector3<f64>, cam: &CameraPose) -> Projection {
    let p = cam.orientation.inverse() * (point - cam.position);
    if p.z >= -1e-12 {
        return Projection::Behind;
    }
    let f = cam.focal_px();
    let half = cam.resolution as f64 * 0.5;
    let depth = -p.z;
    Projection::Pixel {
        px: half + f * p.x / depth,
        py: half - f * p.y / depth,
    }
}

pub const BACKGROUND_ID: u16 = 0;
/// Instance id reserved for all gripper parts.
pub const GRIPPER_ID: u16 = u16::MAX;

#[derive(Clone, Debug)]
pub enum Shape {
    Sphere { radius: f64 },
    /// Oriented box with half extents in its local frame.
    Cuboid { half: Vector3<f64> },
    /// Capped cylinder along local z.
    Cylinder { radius: f64, half_height: f64 },
}

#[derive(Clone, Debug)]
pub struct Primitive {
    pub shape: Shape,
    pub center: Vector3<f64>,
    pub rotation: UnitQuaternion<f64>,
    pub id: u16,
    pub albedo: [f32; 3],
}

const EPS: f64 = 1e-9;

impl Primitive {
    /// Nearest positive hit distance along the (unit) ray and the world normal there.
    pub fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<(f64, Vector3<f64>)> {
        match self.shape {
            Shape::Sphere { radius } => {
                let oc = origin - self.center;
                let b = oc.dot(dir);
                let c = oc.norm_squared() - radius * radius;
                let disc = b * b - c;
                if disc < 0.0 {
                    return None;
                }
                let sq = disc.sqrt();
                let t = if -b - sq > EPS { -b - sq } else { -b + sq };
                (t > EPS).then(|| (t, (origin + dir * t - self.center) / radius))
            }
            Shape::Cuboid { half } => {
                let inv = self.rotation.inverse();
                let o = inv * (origin - self.center);
                let d = inv * dir;
                let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
                let mut axis = 0;
                for k in 0..3 {
                    if d[k].abs() < 1e-15 {
                        if o[k].abs() > half[k] {
                            return None;
                        }
                        continue;
                    }
                    let a = (-half[k] - o[k]) / d[k];
                    let b = (half[k] - o[k]) / d[k];
                    let (near, far) = if a < b { (a, b) } else { (b, a) };
                    if near > t0 {
                        t0 = near;
                        axis = k;
                    }
                    t1 = t1.min(far);
                }
                if t0 > t1 || t1 <= EPS || t0 <= EPS {
                    // rays starting inside a box are not rendered
                    return None;
                }
                let mut n = Vector3::zeros();
                n[axis] = -d[axis].signum();
                Some((t0, self.rotation * n))
            }
            Shape::Cylinder { radius, half_height } => {
                let inv = self.rotation.inverse();
                let o = inv * (origin - self.center);
                let d = inv * dir;
                let mut best: Option<(f64, Vector3<f64>)> = None;
                let mut consider = |t: f64, n: Vector3<f64>| {
                    if t > EPS && best.is_none_or(|(bt, _)| t < bt) {
                        best = Some((t, n));
                    }
                };
                let a = d.x * d.x + d.y * d.y;
                if a > 1e-15 {
                    let b = o.x * d.x + o.y * d.y;
                    let c = o.x * o.x + o.y * o.y - radius * radius;
                    let disc = b * b - a * c;
                    if disc >= 0.0 {
                        let sq = disc.sqrt();
                        for t in [(-b - sq) / a, (-b + sq) / a] {
                            let z = o.z + t * d.z;
                            if z.abs() <= half_height {
                                let p = o + d * t;
                                consider(t, Vector3::new(p.x, p.y, 0.0) / radius);
                            }
                        }
                    }
                }
                if d.z.abs() > 1e-15 {
                    for s in [-1.0, 1.0] {
                        let t = (s * half_height - o.z) / d.z;
                        let p = o + d * t;
                        if p.x * p.x + p.y * p.y <= radius * radius {
                            consider(t, Vector3::new(0.0, 0.0, s));
                        }
                    }
                }
                best.map(|(t, n)| (t, self.rotation * n))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lighting {
    /// Direction the light travels (pointing away from the source).
    pub direction: [f64; 3],
    pub ambient: f32,
    pub diffuse: f32,
    pub background: [f32; 3],
}

impl Default for Lighting {
    fn default() -> Self {
        Lighting {
            direction: [0.3, 0.2, -1.0],
            ambient: 0.35,
            diffuse: 0.65,
            background: [0.55, 0.6, 0.65],
        }
    }
}

pub struct RenderOutput {
    pub rgb: Image,
    pub depth: Vec<f64>,
    pub instance: Vec<u16>,
    pub resolution: usize,
}

impl RenderOutput {
    pub fn mask_of(&self, id: u16) -> Vec<f32> {
        self.instance.iter().map(|&i| if i == id { 1.0 } else { 0.0 }).collect()
    }

    pub fn save_rgb(&self, path: impl AsRef<Path>) -> Result<()> {
        self.rgb.save_png(path)
    }

    /// Depth normalised to the finite range, misses drawn white.
    pub fn save_depth(&self, path: impl AsRef<Path>) -> Result<()> {
        let finite = self.depth.iter().copied().filter(|d| d.is_finite());
        let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), d| (a.min(d), b.max(d)));
        let span = (hi - lo).max(1e-9);
        let bytes: Vec<u8> = self
            .depth
            .iter()
            .map(|&d| if d.is_finite() { ((d - lo) / span * 230.0) as u8 } else { 255 })
            .collect();
        let n = self.resolution;
        write_png(path.as_ref(), n, n, png::ColorType::Grayscale, &bytes)
    }

    pub fn save_instance(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut bytes = Vec::with_capacity(self.instance.len() * 3);
        for &id in &self.instance {
            let c = id_color(id);
            bytes.extend(c.iter().map(|&v| (v * 255.0) as u8));
        }
        let n = self.resolution;
        write_png(path.as_ref(), n, n, png::ColorType::Rgb, &bytes)
    }
}

const PALETTE: [[f32; 3]; 10] = [
    [0.90, 0.25, 0.20],
    [0.20, 0.65, 0.30],
    [0.25, 0.40, 0.90],
    [0.95, 0.80, 0.20],
    [0.70, 0.30, 0.80],
    [0.20, 0.80, 0.80],
    [0.95, 0.55, 0.15],
    [0.55, 0.35, 0.20],
    [0.90, 0.45, 0.65],
    [0.50, 0.75, 0.15],
];

pub const TRAY_ALBEDO: [f32; 3] = [0.45, 0.45, 0.48];
pub const GRIPPER_ALBEDO: [f32; 3] = [0.15, 0.15, 0.15];

/// Fixed colour per object id.
pub fn id_color(id: u16) -> [f32; 3] {
    match id {
        BACKGROUND_ID => [0.0, 0.0, 0.0],
        GRIPPER_ID => [1.0, 1.0, 1.0],
        _ => PALETTE[(id as usize - 1) % PALETTE.len()],
    }
}

/// Everything the camera can see in `world`.
pub fn world_primitives(world: &WorldState) -> Vec<Primitive> {
    let mut prims = Vec::new();
    let tray = &world.tray;
    let (hx, hy, h, t) = (tray.half_x, tray.half_y, tray.height, tray.wall);
    let flat = UnitQuaternion::identity();
    let mut tray_box = |center: Vector3<f64>, half: Vector3<f64>| {
        prims.push(Primitive {
            shape: Shape::Cuboid { half },
            center,
            rotation: flat,
            id: BACKGROUND_ID,
            albedo: TRAY_ALBEDO,
        })
    };
    tray_box(Vector3::new(0.0, 0.0, -t * 0.5), Vector3::new(hx + t, hy + t, t * 0.5));
    tray_box(Vector3::new(hx + t * 0.5, 0.0, h * 0.5), Vector3::new(t * 0.5, hy + t, h * 0.5));
    tray_box(Vector3::new(-hx - t * 0.5, 0.0, h * 0.5), Vector3::new(t * 0.5, hy + t, h * 0.5));
    tray_box(Vector3::new(0.0, hy + t * 0.5, h * 0.5), Vector3::new(hx, t * 0.5, h * 0.5));
    tray_box(Vector3::new(0.0, -hy - t * 0.5, h * 0.5), Vector3::new(hx, t * 0.5, h * 0.5));

    for obj in &world.objects {
        let rotation = UnitQuaternion::from_euler_angles(0.0, 0.0, obj.yaw);
        let shape = match obj.kind {
            ObjectKind::Sphere { radius } => Shape::Sphere { radius },
            ObjectKind::Cuboid { half } => Shape::Cuboid { half: Vector3::from(half) },
            ObjectKind::Cylinder { radius, half_height } => Shape::Cylinder { radius, half_height },
        };
        prims.push(Primitive {
            shape,
            center: obj.position,
            rotation,
            id: obj.id,
            albedo: id_color(obj.id),
        });
    }
    prims.extend(gripper_primitives(world));
    prims
}

/// Palm plus two fingers, posed by the gripper's tooltip frame. The fingers
/// end at the tooltip and the palm sits above them along the tool axis.
pub fn gripper_primitives(world: &WorldState) -> Vec<Primitive> {
    let gr = &world.gripper;
    let q = gr.orientation;
    let finger_len = 0.05;
    let palm_half = Vector3::new(0.015, gr.opening * 0.5 + 0.01, 0.01);
    // tool axis points along local -z
    let local = |p: Vector3<f64>| gr.tooltip + q * p;
    let part = |center: Vector3<f64>, half: Vector3<f64>| Primitive {
        shape: Shape::Cuboid { half },
        center,
        rotation: q,
        id: GRIPPER_ID,
        albedo: GRIPPER_ALBEDO,
    };
    let finger_half = Vector3::new(0.01, 0.005, finger_len * 0.5);
    let y = gr.opening * 0.5 + finger_half.y;
    vec![
        part(local(Vector3::new(0.0, 0.0, finger_len + palm_half.z)), palm_half),
        part(local(Vector3::new(0.0, y, finger_len * 0.5)), finger_half),
        part(local(Vector3::new(0.0, -y, finger_len * 0.5)), finger_half),
    ]
}

pub fn render(world: &WorldState, cam: &CameraPose, light: &Lighting) -> RenderOutput {
    render_primitives(&world_primitives(world), cam, light)
}

pub fn render_primitives(prims: &[Primitive], cam: &CameraPose, light: &Lighting) -> RenderOutput {
    let n = cam.resolution;
    let mut rgb = Image::new(n, n, 3);
    let mut depth = vec![f64::INFINITY; n * n];
    let mut instance = vec![BACKGROUND_ID; n * n];
    let to_light = -Vector3::from(light.direction).normalize();
    let origin = cam.position;
    for row in 0..n {
        for col in 0..n {
            let dir = cam.ray_dir(row, col);
            let mut hit: Option<(f64, Vector3<f64>, &Primitive)> = None;
            for p in prims {
                if let Some((t, normal)) = p.intersect(&origin, &dir) {
                    if hit.is_none_or(|(bt, _, _)| t < bt) {
                        hit = Some((t, normal, p));
                    }
                }
            }
            let k = row * n + col;
            let color = match hit {
                Some((t, normal, p)) => {
                    depth[k] = t;
                    instance[k] = p.id;
                    // two-sided: a normal facing away from the camera is flipped
                    let normal = if normal.dot(&dir) > 0.0 { -normal } else { normal };
                    let shade = shade(light, normal.dot(&to_light));
                    p.albedo.map(|a| a * shade)
                }
                None => light.background,
            };
            for c in 0..3 {
                rgb.data[c * n * n + k] = color[c];
            }
        }
    }
    RenderOutput {
        rgb,
        depth,
        instance,
        resolution: n,
    }
}

#[inline]
pub fn shade(light: &Lighting, cos_incidence: f64) -> f32 {
    light.ambient + light.diffuse * cos_incidence.max(0.0) as f32
}

/// Point on the ray through pixel `(row, col)` at distance `t`.
pub fn ray_point(cam: &CameraPose, row: usize, col: usize, t: f64) -> Point3<f64> {
    Point3::from(cam.position + cam.ray_dir(row, col) * t)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cam_down() -> CameraPose {
        look_at(Vector3::new(0.0, 0.0, 1.0), Vector3::zeros(), Vector3::y(), 60f64.to_radians(), 64).unwrap()
    }

    #[test]
    fn axis_aligned_look_at_is_identity() {
        let cam = cam_down();
        assert!(cam.orientation.angle() < 1e-12);
        match project(&Vector3::zeros(), &cam) {
            Projection::Pixel { px, py } => assert!((px - 32.0).abs() < 1e-12 && (py - 32.0).abs() < 1e-12),
            Projection::Behind => panic!(),
        }
    }

    #[test]
    fn degenerate_up_rejected() {
        let r = look_at(Vector3::new(0.0, 0.0, 1.0), Vector3::zeros(), Vector3::z(), 1.0, 8);
        assert!(r.is_err());
    }

    #[test]
    fn half_fov_elevation_hits_top_edge() {
        let cam = cam_down();
        let a = cam.fov_y * 0.5;
        // camera looks along -z with +y up; one metre away, tan(a) up
        let p = Vector3::new(0.0, a.tan(), 0.0);
        match project(&p, &cam) {
            Projection::Pixel { py, .. } => assert!(py.abs() < 1e-9, "{py}"),
            Projection::Behind => panic!(),
        }
    }

    #[test]
    fn behind_is_flagged() {
        assert_eq!(project(&Vector3::new(0.0, 0.0, 2.0), &cam_down()), Projection::Behind);
    }

    #[test]
    fn cylinder_cap_and_side_hits() {
        let cyl = Primitive {
            shape: Shape::Cylinder { radius: 0.5, half_height: 1.0 },
            center: Vector3::zeros(),
            rotation: UnitQuaternion::identity(),
            id: 1,
            albedo: [1.0; 3],
        };
        let (t, n) = cyl.intersect(&Vector3::new(0.0, 0.0, 3.0), &-Vector3::z()).unwrap();
        assert!((t - 2.0).abs() < 1e-12 && (n - Vector3::z()).norm() < 1e-12);
        let (t, n) = cyl.intersect(&Vector3::new(3.0, 0.0, 0.0), &-Vector3::x()).unwrap();
        assert!((t - 2.5).abs() < 1e-12 && (n - Vector3::x()).norm() < 1e-12);
        assert!(cyl.intersect(&Vector3::new(3.0, 0.0, 1.5), &-Vector3::x()).is_none());
    }
}
