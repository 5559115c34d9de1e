//! Reach-only sanity task for the SAC stack.
//!
//! The representation is replaced by the tooltip-to-fixation offset tiled
//! over a small grid, grasp initiation is switched off and the reward is the
//! negative distance. Rollouts go through the ordinary episode engine in
//! blind mode, so step limits, clamping and reward code are the real ones.

use apr_tensor::{Graph, Tensor};
use nalgebra::Vector3;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::episode::{run_episode, Camera, Decision, EpisodeConfig, EpisodeRecord, EpisodeSetup, Policy, ReachShaping};
use crate::head::HeadConfig;
use crate::sac::{NetConfig, RepSlot, ReplayBuffer, SacAgent, SacBatch, SacConfig};
use crate::scene::{spawn, Dof, ObjectSet, SceneConfig};
use crate::{CoreError, Result};

pub const GRID: usize = 4;
pub const CHANNELS: usize = 3;
/// Offsets are divided by this before entering the networks (m).
const OFFSET_SCALE: f64 = 0.3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReachConfig {
    pub seed: u64,
    pub env_steps: usize,
    pub warmup_transitions: usize,
    pub eval_every: usize,
    pub eval_episodes: usize,
    pub radius: f64,
    pub max_objects: usize,
    pub dof: Dof,
    pub sac: SacConfig,
}

impl Default for ReachConfig {
    fn default() -> Self {
        ReachConfig {
            seed: 0,
            env_steps: 30_000,
            warmup_transitions: 1_000,
            eval_every: 5_000,
            eval_episodes: 100,
            radius: 0.05,
            max_objects: 3,
            dof: Dof::Six,
            sac: SacConfig {
                gamma: 0.95,
                lr: 1e-3,
                alpha_lr: 1e-3,
                replay_capacity: 30_000,
                net: NetConfig {
                    channels: [16, 16, 16],
                    fc_hidden: 64,
                },
                ..SacConfig::default()
            },
        }
    }
}

impl ReachConfig {
    pub fn scene() -> SceneConfig {
        SceneConfig {
            // the tip never counts as initiating a grasp
            z_initiate: -1.0,
            ..SceneConfig::default()
        }
    }

    pub fn episode(&self) -> EpisodeConfig {
        let mut e = EpisodeConfig {
            dof: self.dof,
            ..EpisodeConfig::default()
        };
        e.rewards.shaping = ReachShaping::NegDistance;
        e
    }
}

/// `[1, 3, GRID, GRID]` tiling of the scaled offset from fixation to tooltip.
pub fn state_rep(tip: &Vector3<f64>, fixation: &Vector3<f64>) -> Vec<f32> {
    let d = (tip - fixation) / OFFSET_SCALE;
    let mut out = Vec::with_capacity(CHANNELS * GRID * GRID);
    for c in 0..CHANNELS {
        out.extend(std::iter::repeat_n(d[c] as f32, GRID * GRID));
    }
    out
}

fn batch_tensor(states: &[Vec<f32>]) -> Result<Tensor<f32>> {
    Ok(Tensor::new(vec![states.len(), CHANNELS, GRID, GRID], states.concat())?)
}

/// Tooltip positions before each step and after the last one.
fn tips(rec: &EpisodeRecord) -> Vec<Vector3<f64>> {
    std::iter::once(rec.initial_world.gripper.tooltip).chain(rec.steps.iter().map(|s| s.tooltip)).collect()
}

pub struct ReachPolicy<'a> {
    pub agent: &'a SacAgent<f32>,
    pub stochastic: bool,
}

impl Policy for ReachPolicy<'_> {
    fn needs_images(&self) -> bool {
        false
    }

    fn fixate(&mut self, _: &Decision, _: &mut dyn RngCore) -> Result<[f64; 3]> {
        Err(CoreError::Config("the reach task uses the target as fixation".into()))
    }

    fn grasp(&mut self, d: &Decision, mut rng: &mut dyn RngCore) -> Result<Vec<f64>> {
        let r = batch_tensor(&[state_rep(&d.world.gripper.tooltip, &d.fixation)])?;
        let (mut a, _) = self.agent.act(&r, self.stochastic, &mut rng)?;
        Ok(a.swap_remove(0))
    }
}

/// Moves straight at the fixation point at full speed.
pub struct StraightLine {
    pub dof: Dof,
}

impl Policy for StraightLine {
    fn needs_images(&self) -> bool {
        false
    }

    fn fixate(&mut self, _: &Decision, _: &mut dyn RngCore) -> Result<[f64; 3]> {
        Err(CoreError::Config("the reach task uses the target as fixation".into()))
    }

    fn grasp(&mut self, d: &Decision, _: &mut dyn RngCore) -> Result<Vec<f64>> {
        let delta = (d.fixation - d.world.gripper.tooltip) / ReachConfig::scene().max_step_translation;
        let mut a = vec![0.0; self.dof.action_dim()];
        for i in 0..3 {
            a[i] = delta[i].clamp(-1.0, 1.0);
        }
        Ok(a)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReachEval {
    pub episodes: usize,
    pub within_radius: f64,
    pub mean_final_distance: f64,
    pub failed: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReachPoint {
    pub env_steps: usize,
    pub eval: ReachEval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReachReport {
    pub config: ReachConfig,
    pub oracle: ReachEval,
    pub random: ReachEval,
    pub curve: Vec<ReachPoint>,
    pub final_eval: ReachEval,
    pub updates: u64,
    pub skipped_updates: u64,
}

pub struct ReachEnv {
    pub cfg: ReachConfig,
    pub scene: SceneConfig,
    camera: Camera,
}

impl ReachEnv {
    pub fn new(cfg: ReachConfig) -> Result<ReachEnv> {
        cfg.sac.validate("sac")?;
        let scene = ReachConfig::scene();
        scene.validate()?;
        let camera = Camera::new(&cfg.episode(), &HeadConfig::default())?;
        Ok(ReachEnv { cfg, scene, camera })
    }

    fn episode(&self, policy: &mut dyn Policy, rng: &mut ChaCha8Rng) -> Result<Option<EpisodeRecord>> {
        let n = rand::Rng::random_range(rng, 1..=self.cfg.max_objects);
        let world = spawn(rng.next_u64(), n, ObjectSet::Train, &self.scene)?;
        let setup = EpisodeSetup {
            scene: &self.scene,
            camera: &self.camera,
        };
        match run_episode(&setup, world, policy, rng) {
            Ok(r) => Ok(Some(r)),
            Err(CoreError::Viewpoint(_)) => Ok(None),
            Err(e) => Err(e),
        }
    }

    pub fn evaluate(&self, policy: &mut dyn Policy, episodes: usize, seed: u64) -> Result<ReachEval> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut hits, mut total_d, mut failed) = (0, 0.0, 0);
        for _ in 0..episodes {
            match self.episode(policy, &mut rng)? {
                Some(rec) => {
                    hits += (rec.final_distance < self.cfg.radius) as usize;
                    total_d += rec.final_distance;
                }
                None => failed += 1,
            }
        }
        let ok = (episodes - failed).max(1) as f64;
        Ok(ReachEval {
            episodes,
            within_radius: hits as f64 / ok,
            mean_final_distance: total_d / ok,
            failed,
        })
    }

    /// Train from scratch and report the learning curve next to the oracle
    /// and random baselines.
    pub fn train(&self) -> Result<ReachReport> {
        let cfg = &self.cfg;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let act_dim = cfg.dof.action_dim();
        let mut agent = SacAgent::<f32>::new(cfg.sac.clone(), CHANNELS, GRID, act_dim, &mut rng);
        let mut replay: ReplayBuffer<EpisodeRecord> = ReplayBuffer::new(cfg.sac.replay_capacity);
        let eval_seed = cfg.seed ^ 0xE7A1;
        let oracle = self.evaluate(&mut StraightLine { dof: cfg.dof }, cfg.eval_episodes, eval_seed)?;
        let random = self.evaluate(&mut crate::episode::RandomPolicy { dof: cfg.dof }, cfg.eval_episodes, eval_seed)?;
        let mut curve = Vec::new();
        let (mut env_steps, mut next_eval) = (0, cfg.eval_every);
        while env_steps < cfg.env_steps {
            let rec = {
                let mut p = ReachPolicy {
                    agent: &agent,
                    stochastic: true,
                };
                self.episode(&mut p, &mut rng)?
            };
            let Some(rec) = rec else { continue };
            let steps = rec.steps.len();
            env_steps += steps;
            replay.push(rec)?;
            if replay.len() >= cfg.warmup_transitions {
                for _ in 0..steps {
                    self.update(&mut agent, &mut replay, &mut rng)?;
                }
            }
            if env_steps >= next_eval {
                next_eval += cfg.eval_every;
                let mut p = ReachPolicy {
                    agent: &agent,
                    stochastic: false,
                };
                let eval = self.evaluate(&mut p, cfg.eval_episodes, eval_seed)?;
                curve.push(ReachPoint { env_steps, eval });
            }
        }
        let mut p = ReachPolicy {
            agent: &agent,
            stochastic: false,
        };
        let final_eval = self.evaluate(&mut p, cfg.eval_episodes, eval_seed)?;
        Ok(ReachReport {
            config: cfg.clone(),
            oracle,
            random,
            curve,
            final_eval,
            updates: agent.updates,
            skipped_updates: agent.skipped,
        })
    }

    fn update(&self, agent: &mut SacAgent<f32>, replay: &mut ReplayBuffer<EpisodeRecord>, rng: &mut ChaCha8Rng) -> Result<()> {
        let b = agent.cfg.batch_size;
        let d = agent.act_dim;
        let picks = replay.sample(b, rng)?;
        let (mut cur, mut next) = (Vec::with_capacity(b), Vec::with_capacity(b));
        let (mut actions, mut rewards, mut dones) = (Vec::with_capacity(b * d), Vec::with_capacity(b), Vec::with_capacity(b));
        for (rec, t) in &picks {
            let tips = tips(rec);
            cur.push(state_rep(&tips[*t], &rec.fixation));
            next.push(state_rep(&tips[t + 1], &rec.fixation));
            let st = &rec.steps[*t];
            actions.extend(st.action.iter().map(|&x| x as f32));
            // the shaped term only: the sparse grasp outcome is not part of this task
            rewards.push(st.reach_reward as f32);
            dones.push(if st.done { 1.0 } else { 0.0 });
        }
        let batch = SacBatch {
            actions: Tensor::new(vec![b, d], actions)?,
            rewards: Tensor::new(vec![b, 1], rewards)?,
            dones: Tensor::new(vec![b, 1], dones)?,
        };
        let (cur, next) = (batch_tensor(&cur)?, batch_tensor(&next)?);
        agent.update(
            &batch,
            |g: &mut Graph<f32>, slot| {
                Ok(g.constant(match slot {
                    RepSlot::Current => cur.clone(),
                    RepSlot::Next => next.clone(),
                }))
            },
            rng,
        )?;
        Ok(())
    }
}
