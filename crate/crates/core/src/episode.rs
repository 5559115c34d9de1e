//! One grasp attempt: initial look at the tray centre, a glimpse to a
//! fixation point, then up to `max_steps` gripper moves watched from views
//! aimed at that point.

use nalgebra::Vector3;
use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::fovea::{build_grid, build_uniform_grid, sample, Image, WarpGrid};
use crate::gqn::{MultimodalInput, G_DIM, V_DIM};
use crate::head::{sample_viewpoint, DhChain, HeadConfig, ViewSpec};
use crate::raycam::{look_at, render, CameraPose, Lighting};
use crate::sac::ReplayRecord;
use crate::scene::{attempt_grasp, is_grasp_initiated, step_gripper, Dof, GraspOutcome, GripperAction, SceneConfig, WorldState};
use crate::{CoreError, Result};

pub const VIEWS_PER_STEP: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReachShaping {
    /// `alpha * (d_{t-1} - d_t)`.
    Potential,
    /// `-alpha * d_t`.
    NegDistance,
    Off,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardSpec {
    pub fixation_radius: f64,
    pub reach_coefficient: f64,
    pub shaping: ReachShaping,
}

impl Default for RewardSpec {
    fn default() -> Self {
        RewardSpec {
            fixation_radius: 0.10,
            reach_coefficient: 1.0,
            shaping: ReachShaping::Potential,
        }
    }
}

/// 1 when an object was lifted with the tool within `radius` of the fixation
/// point at initiation; in targeted mode the lifted object must be the target.
pub fn compute_sparse_reward(outcome: &GraspOutcome, fixation: &Vector3<f64>, radius: f64, target: Option<u16>) -> f64 {
    let near = (outcome.tooltip_at_initiation - fixation).norm() <= radius;
    let right_object = target.is_none_or(|t| outcome.grasped_object == Some(t));
    if outcome.lifted && near && right_object {
        1.0
    } else {
        0.0
    }
}

pub fn compute_reach_reward(tip: &Vector3<f64>, prev: &Vector3<f64>, fixation: &Vector3<f64>, spec: &RewardSpec) -> f64 {
    let a = spec.reach_coefficient;
    match spec.shaping {
        ReachShaping::Potential => a * ((prev - fixation).norm() - (tip - fixation).norm()),
        ReachShaping::NegDistance => -a * (tip - fixation).norm(),
        ReachShaping::Off => 0.0,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ViewMode {
    /// Head camera aimed at the fixation point.
    Active,
    /// Three fixed cameras around the tray.
    Passive,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FixationSource {
    /// The environment picks a random object; its centroid is the fixation point.
    Target,
    /// The fixation policy chooses.
    Policy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EpisodeConfig {
    pub max_steps: usize,
    pub render_resolution: usize,
    pub image_size: usize,
    pub log_polar: bool,
    pub view_mode: ViewMode,
    pub fixation: FixationSource,
    /// Append a target-mask channel (requires `fixation = target`).
    pub target_mask: bool,
    pub dof: Dof,
    /// Context views for the glimpse decision (1 or 2).
    pub initial_views: usize,
    /// Fixation actions in `[-1, 1]^3` map linearly onto this box.
    pub fixation_lo: [f64; 3],
    pub fixation_hi: [f64; 3],
    /// Where the first look goes.
    pub initial_fixation: [f64; 3],
    pub passive_distance: f64,
    pub passive_pitch: f64,
    pub rewards: RewardSpec,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        EpisodeConfig {
            max_steps: 15,
            render_resolution: 256,
            image_size: 64,
            log_polar: true,
            view_mode: ViewMode::Active,
            fixation: FixationSource::Target,
            target_mask: true,
            dof: Dof::Six,
            initial_views: 2,
            fixation_lo: [-0.3, -0.2, 0.0],
            fixation_hi: [0.3, 0.2, 0.1],
            initial_fixation: [0.0, 0.0, 0.0],
            passive_distance: 1.0,
            passive_pitch: 45f64.to_radians(),
            rewards: RewardSpec::default(),
        }
    }
}

impl EpisodeConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoreError::Config(format!("episode.{m}")));
        if self.max_steps == 0 {
            return bad("max_steps must be positive".into());
        }
        if self.render_resolution < 2 || self.image_size < 2 {
            return bad("render_resolution and image_size must be >= 2".into());
        }
        if !(1..=2).contains(&self.initial_views) {
            return bad(format!("initial_views must be 1 or 2, got {}", self.initial_views));
        }
        if (0..3).any(|k| self.fixation_lo[k] >= self.fixation_hi[k]) {
            return bad("fixation_lo must be below fixation_hi on every axis".into());
        }
        if self.target_mask && self.fixation != FixationSource::Target {
            return bad("target_mask needs fixation = \"target\"".into());
        }
        if self.rewards.fixation_radius <= 0.0 {
            return bad("rewards.fixation_radius must be positive".into());
        }
        if self.passive_distance <= 0.0 {
            return bad("passive_distance must be positive".into());
        }
        Ok(())
    }

    pub fn image_channels(&self) -> usize {
        if self.target_mask {
            4
        } else {
            3
        }
    }

    pub fn fixation_from_unit(&self, u: &[f64]) -> Vector3<f64> {
        Vector3::from_fn(|k, _| {
            let t = 0.5 * (u[k].clamp(-1.0, 1.0) + 1.0);
            self.fixation_lo[k] + t * (self.fixation_hi[k] - self.fixation_lo[k])
        })
    }

    pub fn fixation_to_unit(&self, p: &Vector3<f64>) -> [f64; 3] {
        std::array::from_fn(|k| {
            let t = (p[k] - self.fixation_lo[k]) / (self.fixation_hi[k] - self.fixation_lo[k]);
            (2.0 * t - 1.0).clamp(-1.0, 1.0)
        })
    }
}

/// Static cameras for the passive variant: equal yaw spacing on one circle.
pub fn static_cameras(cfg: &EpisodeConfig, head: &HeadConfig) -> Result<Vec<(CameraPose, [f64; V_DIM])>> {
    let centre = Vector3::from(cfg.initial_fixation);
    (0..VIEWS_PER_STEP)
        .map(|k| {
            let yaw = k as f64 * std::f64::consts::TAU / VIEWS_PER_STEP as f64;
            let (d, p) = (cfg.passive_distance, cfg.passive_pitch);
            let eye = centre + Vector3::new(p.cos() * yaw.cos(), p.cos() * yaw.sin(), p.sin()) * d;
            let cam = look_at(eye, centre, Vector3::z(), head.fov_y, cfg.render_resolution)?;
            Ok((cam, [yaw, p, d, 0.0, 0.0, 0.0]))
        })
        .collect()
}

/// One observation: pixels are kept as bytes so replay stays small.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub pixels: Option<Vec<u8>>,
    pub v: [f64; V_DIM],
    pub g: [f64; G_DIM],
    /// Head view that produced it (absent for static cameras).
    pub view: Option<ViewSpec>,
}

impl Observation {
    pub fn image(&self, size: usize, channels: usize) -> Result<Image> {
        let px = self
            .pixels
            .as_ref()
            .ok_or_else(|| CoreError::Shape("observation was captured without images".into()))?;
        if px.len() != size * size * channels {
            return Err(CoreError::Shape(format!(
                "stored view has {} bytes, expected {size}x{size}x{channels}",
                px.len()
            )));
        }
        Ok(Image::from_u8(size, size, channels, px))
    }

    pub fn to_input(&self, size: usize, channels: usize) -> Result<MultimodalInput> {
        Ok(MultimodalInput {
            image: self.image(size, channels)?,
            v: self.v,
            g: self.g,
        })
    }
}

/// Renders and foveates views; holds the precomputed grid and head chain.
#[derive(Clone, Debug)]
pub struct Camera {
    pub cfg: EpisodeConfig,
    pub head: HeadConfig,
    chain: DhChain,
    grid: WarpGrid,
    statics: Vec<(CameraPose, [f64; V_DIM])>,
    pub light: Lighting,
}

impl Camera {
    pub fn new(cfg: &EpisodeConfig, head: &HeadConfig) -> Result<Camera> {
        cfg.validate()?;
        head.validate()?;
        let grid = if cfg.log_polar && cfg.view_mode == ViewMode::Active {
            build_grid(cfg.image_size)?
        } else {
            build_uniform_grid(cfg.image_size)?
        };
        Ok(Camera {
            cfg: cfg.clone(),
            head: head.clone(),
            chain: head.chain(),
            grid,
            statics: static_cameras(cfg, head)?,
            light: Lighting::default(),
        })
    }

    pub fn grid(&self) -> &WarpGrid {
        &self.grid
    }

    fn observe(&self, world: &WorldState, cam: &CameraPose, target: Option<u16>) -> Result<Vec<u8>> {
        let out = render(world, cam, &self.light);
        let mut img = out.rgb.clone();
        if self.cfg.target_mask {
            let id = target.ok_or_else(|| CoreError::Config("target mask requested without a target".into()))?;
            img.push_channel(&out.mask_of(id))?;
        }
        let mut small = sample(&img, &self.grid);
        if self.cfg.target_mask {
            small.binarize_channel(3);
        }
        Ok(small.to_u8())
    }

    /// Three views of the world aimed at `fixation` (or the static cameras in
    /// passive mode). With `images = false` only the poses are produced.
    pub fn collect_views(
        &self,
        world: &WorldState,
        fixation: &Vector3<f64>,
        target: Option<u16>,
        images: bool,
        rng: &mut impl Rng,
    ) -> Result<Vec<Observation>> {
        let g = world.gripper.pose_vector();
        let res = self.cfg.render_resolution;
        match self.cfg.view_mode {
            ViewMode::Active => (0..VIEWS_PER_STEP)
                .map(|_| {
                    let view = sample_viewpoint(&self.chain, &self.head, *fixation, res, rng)?;
                    let pixels = if images { Some(self.observe(world, &view.camera, target)?) } else { None };
                    Ok(Observation {
                        pixels,
                        v: view.joints,
                        g,
                        view: Some(view),
                    })
                })
                .collect(),
            ViewMode::Passive => self
                .statics
                .iter()
                .map(|(cam, v)| {
                    let pixels = if images { Some(self.observe(world, cam, target)?) } else { None };
                    Ok(Observation {
                        pixels,
                        v: *v,
                        g,
                        view: None,
                    })
                })
                .collect(),
        }
    }
}

/// What a controller sees at each decision.
pub struct Decision<'a> {
    pub world: &'a WorldState,
    /// The glimpse target (for the grasp decisions) or the initial look.
    pub fixation: Vector3<f64>,
    pub target: Option<u16>,
    pub views: &'a [Observation],
    pub step: usize,
}

pub trait Policy {
    /// Whether observations need rendered pixels.
    fn needs_images(&self) -> bool {
        true
    }

    /// Glimpse action in `[-1, 1]^3`.
    fn fixate(&mut self, d: &Decision, rng: &mut dyn rand::RngCore) -> Result<[f64; 3]>;

    /// Gripper action in `[-1, 1]^dof`.
    fn grasp(&mut self, d: &Decision, rng: &mut dyn rand::RngCore) -> Result<Vec<f64>>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub action: Vec<f64>,
    pub reach_reward: f64,
    /// Reach reward plus, on the final step, the sparse reward.
    pub reward: f64,
    pub done: bool,
    pub tooltip: Vector3<f64>,
    pub clamped: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub initial_world: WorldState,
    pub target: Option<u16>,
    pub initial_views: Vec<Observation>,
    pub fixation_action: [f64; 3],
    pub fixation: Vector3<f64>,
    /// `steps.len() + 1` triples; triple `t` is seen before action `t`.
    pub views: Vec<Vec<Observation>>,
    pub steps: Vec<StepRecord>,
    pub outcome: GraspOutcome,
    pub sparse_reward: f64,
    pub final_distance: f64,
    pub image_size: usize,
    pub image_channels: usize,
}

impl EpisodeRecord {
    pub fn success(&self) -> bool {
        self.sparse_reward > 0.5
    }

    pub fn total_reward(&self) -> f64 {
        self.steps.iter().map(|s| s.reward).sum()
    }

    pub fn has_images(&self) -> bool {
        self.views.iter().flatten().all(|o| o.pixels.is_some())
    }
}

impl ReplayRecord for EpisodeRecord {
    fn transitions(&self) -> usize {
        self.steps.len()
    }
}

pub struct EpisodeSetup<'a> {
    pub scene: &'a SceneConfig,
    pub camera: &'a Camera,
}

/// Run one episode on a freshly spawned `world`.
pub fn run_episode(
    setup: &EpisodeSetup,
    world: WorldState,
    policy: &mut dyn Policy,
    rng: &mut (impl Rng + rand::RngCore),
) -> Result<EpisodeRecord> {
    let cfg = &setup.camera.cfg;
    let scene = setup.scene;
    let images = policy.needs_images();
    let initial_world = world.clone();

    let target = match cfg.fixation {
        FixationSource::Target => {
            let obj = world
                .objects
                .choose(rng)
                .ok_or_else(|| CoreError::Config("targeted episode needs at least one object".into()))?;
            Some(obj.id)
        }
        FixationSource::Policy => None,
    };

    let centre = Vector3::from(cfg.initial_fixation);
    let mut initial_views = setup.camera.collect_views(&world, &centre, target, images, rng)?;
    initial_views.truncate(cfg.initial_views);

    let (fixation_action, fixation) = match target {
        Some(id) => {
            let p = world.object(id).expect("chosen from the world").position;
            (cfg.fixation_to_unit(&p), p)
        }
        None => {
            let d = Decision {
                world: &world,
                fixation: centre,
                target,
                views: &initial_views,
                step: 0,
            };
            let u = policy.fixate(&d, rng)?;
            (u, cfg.fixation_from_unit(&u))
        }
    };

    let mut world = world;
    let mut views = Vec::with_capacity(cfg.max_steps + 1);
    let mut steps = Vec::with_capacity(cfg.max_steps);
    views.push(setup.camera.collect_views(&world, &fixation, target, images, rng)?);
    for t in 0..cfg.max_steps {
        let d = Decision {
            world: &world,
            fixation,
            target,
            views: views.last().expect("pushed above"),
            step: t,
        };
        let action = policy.grasp(&d, rng)?;
        if action.len() != cfg.dof.action_dim() {
            return Err(CoreError::Shape(format!(
                "grasp policy returned {} components for a {}-dimensional action",
                action.len(),
                cfg.dof.action_dim()
            )));
        }
        let prev = world.gripper.tooltip;
        let (next, clamped) = step_gripper(&world, &GripperAction::from_unit(&action, scene), cfg.dof, scene);
        world = next;
        let reach = compute_reach_reward(&world.gripper.tooltip, &prev, &fixation, &cfg.rewards);
        let done = is_grasp_initiated(&world, scene) || t + 1 == cfg.max_steps;
        views.push(setup.camera.collect_views(&world, &fixation, target, images, rng)?);
        steps.push(StepRecord {
            action,
            reach_reward: reach,
            reward: reach,
            done,
            tooltip: world.gripper.tooltip,
            clamped,
        });
        if done {
            break;
        }
    }
    let outcome = attempt_grasp(&world, scene);
    let sparse = compute_sparse_reward(&outcome, &fixation, cfg.rewards.fixation_radius, target);
    if let Some(last) = steps.last_mut() {
        last.reward += sparse;
    }
    Ok(EpisodeRecord {
        initial_world,
        target,
        initial_views,
        fixation_action,
        fixation,
        views,
        steps,
        final_distance: (world.gripper.tooltip - fixation).norm(),
        outcome,
        sparse_reward: sparse,
        image_size: cfg.image_size,
        image_channels: cfg.image_channels(),
    })
}

/// Deterministic re-execution input: the world snapshot and what was done to it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeReplay {
    pub world: WorldState,
    pub target: Option<u16>,
    pub fixation: Vector3<f64>,
    pub dof: Dof,
    pub actions: Vec<Vec<f64>>,
    pub outcome: GraspOutcome,
    pub sparse_reward: f64,
}

impl EpisodeReplay {
    pub fn from_record(rec: &EpisodeRecord, dof: Dof) -> EpisodeReplay {
        EpisodeReplay {
            world: rec.initial_world.clone(),
            target: rec.target,
            fixation: rec.fixation,
            dof,
            actions: rec.steps.iter().map(|s| s.action.clone()).collect(),
            outcome: rec.outcome.clone(),
            sparse_reward: rec.sparse_reward,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("replay serializes")
    }

    pub fn from_json(s: &str) -> Result<EpisodeReplay> {
        serde_json::from_str(s).map_err(|e| CoreError::Format(format!("episode replay: {e}")))
    }

    /// Re-run the gripper motion and grasp check.
    pub fn execute(&self, scene: &SceneConfig, radius: f64) -> (WorldState, GraspOutcome, f64) {
        let mut world = self.world.clone();
        for a in &self.actions {
            world = step_gripper(&world, &GripperAction::from_unit(a, scene), self.dof, scene).0;
        }
        let outcome = attempt_grasp(&world, scene);
        let sparse = compute_sparse_reward(&outcome, &self.fixation, radius, self.target);
        (world, outcome, sparse)
    }
}

/// Uniform random actions.
pub struct RandomPolicy {
    pub dof: Dof,
}

impl Policy for RandomPolicy {
    fn needs_images(&self) -> bool {
        false
    }

    fn fixate(&mut self, _: &Decision, rng: &mut dyn rand::RngCore) -> Result<[f64; 3]> {
        Ok(std::array::from_fn(|_| rng.random_range(-1.0..=1.0)))
    }

    fn grasp(&mut self, _: &Decision, rng: &mut dyn rand::RngCore) -> Result<Vec<f64>> {
        Ok((0..self.dof.action_dim()).map(|_| rng.random_range(-1.0..=1.0)).collect())
    }
}

/// Reads the world state directly: looks at an object, moves over it, then
/// drops straight down. Used to check the task is solvable.
pub struct ScriptedOracle {
    pub dof: Dof,
    pub scene: SceneConfig,
    pub episode: EpisodeConfig,
    /// Height above the object centre at which to stop descending.
    pub grip_offset: f64,
    /// Distance from the fixation point at which the descent starts.
    pub align_tol: f64,
}

impl ScriptedOracle {
    pub fn new(dof: Dof, scene: &SceneConfig, episode: &EpisodeConfig) -> Self {
        ScriptedOracle {
            dof,
            scene: scene.clone(),
            episode: episode.clone(),
            grip_offset: 0.01,
            align_tol: 0.003,
        }
    }

    fn goal(&self, d: &Decision) -> Vector3<f64> {
        // grasp the object nearest the fixation point
        d.world
            .objects
            .iter()
            .min_by(|a, b| (a.position - d.fixation).norm().total_cmp(&(b.position - d.fixation).norm()))
            .map(|o| o.position)
            .unwrap_or(d.fixation)
    }
}

impl Policy for ScriptedOracle {
    fn needs_images(&self) -> bool {
        false
    }

    fn fixate(&mut self, d: &Decision, rng: &mut dyn rand::RngCore) -> Result<[f64; 3]> {
        let obj = d.world.objects.choose(rng).ok_or_else(|| CoreError::Config("no objects to look at".into()))?;
        Ok(self.episode.fixation_to_unit(&obj.position))
    }

    fn grasp(&mut self, d: &Decision, _: &mut dyn rand::RngCore) -> Result<Vec<f64>> {
        let goal = self.goal(d);
        let tip = d.world.gripper.tooltip;
        let lim = self.scene.max_step_translation;
        let off = goal - tip;
        let planar = (off.x * off.x + off.y * off.y).sqrt();
        let hover = self.scene.z_initiate + lim;
        let z_goal = if planar > self.align_tol { hover.max(goal.z + self.grip_offset) } else { goal.z + self.grip_offset };
        let unit = |x: f64| (x / lim).clamp(-1.0, 1.0);
        let mut a = vec![unit(off.x), unit(off.y), unit(z_goal - tip.z)];
        a.extend(std::iter::repeat_n(0.0, self.dof.action_dim() - 3));
        Ok(a)
    }
}
