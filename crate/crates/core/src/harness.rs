//! Training loop, evaluation protocol, metrics and checkpoints.

use std::collections::VecDeque;
use std::path::{Path, PathBuf};
use std::time::Instant;

use apr_tensor::checkpoint::Checkpoint;
use apr_tensor::{adam_step, grad_norm, AdamConfig, AdamState, Graph, Tensor};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::episode::{run_episode, Camera, Decision, EpisodeRecord, EpisodeReplay, EpisodeSetup, FixationSource, Observation, Policy};
use crate::gqn::{GenMode, Generator, Gqn, MultimodalInput, ViewBatch};
use crate::sac::{RepSlot, ReplayBuffer, ReplayRecord, SacAgent, SacBatch, SacStats};
use crate::scene::{spawn, ObjectSet};
use crate::{CoreError, Result};

pub type F = f32;

pub fn view_batch(obs: &[&Observation], size: usize, channels: usize) -> Result<ViewBatch<F>> {
    let inputs = obs.iter().map(|o| o.to_input(size, channels)).collect::<Result<Vec<MultimodalInput>>>()?;
    ViewBatch::from_inputs(&inputs.iter().collect::<Vec<_>>())
}

/// Every learned component of the agent.
#[derive(Clone, Debug)]
pub struct Models {
    pub gqn: Gqn<F>,
    pub grasp: SacAgent<F>,
    pub fixation: Option<SacAgent<F>>,
}

impl Models {
    pub fn new(cfg: &RunConfig, rng: &mut impl Rng) -> Result<Models> {
        let gqn = Gqn::new(cfg.gqn.clone(), rng)?;
        let (ch, grid) = (cfg.gqn.r_channels, cfg.gqn.rep_size());
        let grasp = SacAgent::new(cfg.grasp_sac.clone(), ch, grid, cfg.episode.dof.action_dim(), rng);
        let fixation = (cfg.episode.fixation == FixationSource::Policy)
            .then(|| SacAgent::new(cfg.fixation_sac.clone(), ch, grid, 3, rng));
        Ok(Models { gqn, grasp, fixation })
    }

    /// Representation value (no gradients) of the summed context slots.
    pub fn rep_value(&self, context: &[ViewBatch<F>]) -> Result<Tensor<F>> {
        let mut g = Graph::new();
        let r = self.gqn.represent(&mut g, context)?;
        Ok(g.value(r).clone())
    }

    fn rep_of_views(&self, views: &[Observation], cfg: &RunConfig) -> Result<Tensor<F>> {
        let (s, c) = (cfg.episode.image_size, cfg.episode.image_channels());
        let ctx = views.iter().map(|o| view_batch(&[o], s, c)).collect::<Result<Vec<_>>>()?;
        self.rep_value(&ctx)
    }

    pub fn save_into(&self, ck: &mut Checkpoint) {
        ck.push_store("gqn.enc", &self.gqn.enc_params);
        ck.push_store("gqn.gen", &self.gqn.gen_params);
        self.grasp.save_into(ck, "grasp");
        if let Some(f) = &self.fixation {
            f.save_into(ck, "fixation");
        }
    }

    pub fn load_from(&mut self, ck: &Checkpoint) -> Result<()> {
        ck.load_store("gqn.enc", &mut self.gqn.enc_params)?;
        ck.load_store("gqn.gen", &mut self.gqn.gen_params)?;
        self.grasp.load_from(ck, "grasp")?;
        if let Some(f) = &mut self.fixation {
            f.load_from(ck, "fixation")?;
        }
        Ok(())
    }
}

/// Both policies acting on the representation of the current context views.
pub struct LearnedPolicy<'a> {
    pub models: &'a Models,
    pub cfg: &'a RunConfig,
    pub stochastic: bool,
}

impl Policy for LearnedPolicy<'_> {
    fn fixate(&mut self, d: &Decision, mut rng: &mut dyn RngCore) -> Result<[f64; 3]> {
        let agent = self
            .models
            .fixation
            .as_ref()
            .ok_or_else(|| CoreError::Config("this variant has no fixation policy".into()))?;
        let r = self.models.rep_of_views(d.views, self.cfg)?;
        let (a, _) = agent.act(&r, self.stochastic, &mut rng)?;
        Ok([a[0][0], a[0][1], a[0][2]])
    }

    fn grasp(&mut self, d: &Decision, mut rng: &mut dyn RngCore) -> Result<Vec<f64>> {
        let r = self.models.rep_of_views(&d.views[..2], self.cfg)?;
        let (mut a, _) = self.models.grasp.act(&r, self.stochastic, &mut rng)?;
        Ok(a.swap_remove(0))
    }
}

/// The glimpse as a one-step episode.
#[derive(Clone, Debug)]
pub struct GlimpseRecord {
    pub views: Vec<Observation>,
    pub action: [f64; 3],
    pub reward: f64,
}

impl ReplayRecord for GlimpseRecord {
    fn transitions(&self) -> usize {
        1
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub attempt: usize,
    pub env_steps: usize,
    pub success: u8,
    pub train_success: f64,
    pub eval_success: Option<f64>,
    pub elbo: Option<f64>,
    pub actor_loss: Option<f64>,
    pub critic_loss: Option<f64>,
    pub alpha: Option<f64>,
    pub fixation_critic_loss: Option<f64>,
    pub failed_episodes: usize,
    pub wall_clock_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub episodes: usize,
    pub successes: usize,
    pub failed: usize,
    pub rate: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

/// 95% Wilson score interval for `k` successes in `n` trials.
pub fn wilson_interval(k: usize, n: usize) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let z = 1.959_963_984_540_054;
    let (n, p) = (n as f64, k as f64 / n as f64);
    let denom = 1.0 + z * z / n;
    let centre = (p + z * z / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z * z / (4.0 * n * n)).sqrt() / denom;
    // clamp so the point estimate always lies inside despite round-off at k = 0 or n
    ((centre - half).clamp(0.0, p), (centre + half).clamp(p, 1.0))
}

/// Held-out objects, fixed object count, episodes seeded from `seed`.
pub fn evaluate_policy(cfg: &RunConfig, policy: &mut dyn Policy, episodes: usize, seed: u64) -> Result<EvalReport> {
    if episodes == 0 {
        return Err(CoreError::Config("evaluation needs at least one episode".into()));
    }
    let camera = Camera::new(&cfg.episode, &cfg.head)?;
    let setup = EpisodeSetup {
        scene: &cfg.scene,
        camera: &camera,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut successes, mut failed) = (0, 0);
    for _ in 0..episodes {
        let world = spawn(rng.next_u64(), cfg.train.eval_objects, ObjectSet::Test, &cfg.scene)?;
        match run_episode(&setup, world, policy, &mut rng) {
            Ok(rec) => successes += rec.success() as usize,
            Err(CoreError::Viewpoint(_)) => failed += 1,
            Err(e) => return Err(e),
        }
    }
    let (lo, hi) = wilson_interval(successes, episodes);
    Ok(EvalReport {
        episodes,
        successes,
        failed,
        rate: successes as f64 / episodes as f64,
        ci_low: lo,
        ci_high: hi,
    })
}

pub fn evaluate_models(cfg: &RunConfig, models: &Models, episodes: usize, seed: u64) -> Result<EvalReport> {
    let mut policy = LearnedPolicy {
        models,
        cfg,
        stochastic: false,
    };
    evaluate_policy(cfg, &mut policy, episodes, seed)
}

pub fn save_checkpoint(path: &Path, cfg: &RunConfig, models: &Models, attempts: usize) -> Result<()> {
    let mut ck = Checkpoint::default();
    ck.push_bytes("config", cfg.to_json().into_bytes());
    ck.push_bytes("attempts", attempts.to_string().into_bytes());
    models.save_into(&mut ck);
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    ck.save(path)?;
    Ok(())
}

/// Rebuild the models a checkpoint was written from.
pub fn load_checkpoint(path: &Path) -> Result<(RunConfig, Models)> {
    let ck = Checkpoint::load(path)?;
    let text = ck
        .bytes("config")
        .ok_or_else(|| CoreError::Format(format!("{}: checkpoint has no embedded config", path.display())))?;
    let cfg = RunConfig::from_json(&String::from_utf8_lossy(text))?;
    let mut models = Models::new(&cfg, &mut ChaCha8Rng::seed_from_u64(0))?;
    models.load_from(&ck)?;
    Ok((cfg, models))
}

#[derive(Clone, Debug, Default)]
pub struct GraspUpdateReport {
    pub stats: SacStats,
    /// Norm of the RL gradient that reached the encoder parameters.
    pub encoder_grad_norm: f64,
}

pub struct Trainer {
    pub cfg: RunConfig,
    pub models: Models,
    enc_opt: AdamState<F>,
    gen_opt: AdamState<F>,
    rl_enc_opt: AdamState<F>,
    pub replay: ReplayBuffer<EpisodeRecord>,
    pub glimpses: ReplayBuffer<GlimpseRecord>,
    camera: Camera,
    pub rng: ChaCha8Rng,
    pub attempts: usize,
    pub env_steps: usize,
    pub elbo_steps: usize,
    pub failed_episodes: usize,
    recent: VecDeque<f64>,
    last_eval: Option<f64>,
    last_grasp: Option<SacStats>,
    last_fix: Option<SacStats>,
    last_elbo: Option<f64>,
    run_dir: Option<PathBuf>,
    started: Instant,
    pub metrics: Vec<MetricsRow>,
}

impl Trainer {
    pub fn new(cfg: RunConfig) -> Result<Trainer> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let models = Models::new(&cfg, &mut rng)?;
        Ok(Trainer {
            camera: Camera::new(&cfg.episode, &cfg.head)?,
            enc_opt: AdamState::new(&models.gqn.enc_params),
            gen_opt: AdamState::new(&models.gqn.gen_params),
            rl_enc_opt: AdamState::new(&models.gqn.enc_params),
            replay: ReplayBuffer::new(cfg.grasp_sac.replay_capacity),
            glimpses: ReplayBuffer::new(cfg.fixation_sac.replay_capacity),
            models,
            rng,
            attempts: 0,
            env_steps: 0,
            elbo_steps: 0,
            failed_episodes: 0,
            recent: VecDeque::new(),
            last_eval: None,
            last_grasp: None,
            last_fix: None,
            last_elbo: None,
            run_dir: None,
            started: Instant::now(),
            metrics: Vec::new(),
            cfg,
        })
    }

    /// Write config, metrics, checkpoints and samples under `dir`.
    pub fn with_run_dir(mut self, dir: &Path) -> Result<Trainer> {
        std::fs::create_dir_all(dir.join("checkpoints"))?;
        std::fs::create_dir_all(dir.join("samples"))?;
        std::fs::write(dir.join("config.json"), self.cfg.to_json())?;
        let _ = std::fs::remove_file(dir.join("metrics.csv"));
        self.run_dir = Some(dir.to_path_buf());
        Ok(self)
    }

    fn dims(&self) -> (usize, usize) {
        (self.cfg.episode.image_size, self.cfg.episode.image_channels())
    }

    /// Collect one episode with the stochastic policies.
    pub fn collect(&mut self) -> Result<Option<EpisodeRecord>> {
        let n = self.rng.random_range(1..=self.cfg.train.max_objects);
        let world = spawn(self.rng.next_u64(), n, ObjectSet::Train, &self.cfg.scene)?;
        let setup = EpisodeSetup {
            scene: &self.cfg.scene,
            camera: &self.camera,
        };
        let mut policy = LearnedPolicy {
            models: &self.models,
            cfg: &self.cfg,
            stochastic: true,
        };
        match run_episode(&setup, world, &mut policy, &mut self.rng) {
            Ok(rec) => Ok(Some(rec)),
            // an unreachable viewpoint ends the attempt; it is counted, not replayed
            Err(CoreError::Viewpoint(_)) => {
                self.failed_episodes += 1;
                Ok(None)
            }
            Err(e) => Err(e),
        }
    }

    /// One SAC step for the grasp policy on a replay batch.
    pub fn grasp_update(&mut self) -> Result<GraspUpdateReport> {
        let (s, c) = self.dims();
        let b = self.cfg.grasp_sac.batch_size;
        let d = self.cfg.episode.dof.action_dim();
        let picks = self.replay.sample(b, &mut self.rng)?;
        let slot = |k: usize, next: bool| -> Result<ViewBatch<F>> {
            let obs: Vec<&Observation> = picks.iter().map(|(r, t)| &r.views[t + next as usize][k]).collect();
            view_batch(&obs, s, c)
        };
        let cur = [slot(0, false)?, slot(1, false)?];
        let next = [slot(0, true)?, slot(1, true)?];
        let mut actions = Vec::with_capacity(b * d);
        let mut rewards = Vec::with_capacity(b);
        let mut dones = Vec::with_capacity(b);
        for (rec, t) in &picks {
            let st = &rec.steps[*t];
            actions.extend(st.action.iter().map(|&x| x as F));
            rewards.push(st.reward as F);
            dones.push(if st.done { 1.0 } else { 0.0 });
        }
        drop(picks);
        let batch = SacBatch {
            actions: Tensor::new(vec![b, d], actions)?,
            rewards: Tensor::new(vec![b, 1], rewards)?,
            dones: Tensor::new(vec![b, 1], dones)?,
        };
        let train_encoder = self.cfg.variant.rl_trains_encoder();
        let Models { gqn, grasp, .. } = &mut self.models;
        let next_r = {
            let mut g = Graph::new();
            let r = gqn.represent(&mut g, &next)?;
            g.value(r).clone()
        };
        let mut cached: Option<Tensor<F>> = None;
        let out = grasp.update(
            &batch,
            |g, which| match which {
                RepSlot::Next => Ok(g.constant(next_r.clone())),
                RepSlot::Current => match &cached {
                    Some(r) => Ok(g.constant(r.clone())),
                    None => {
                        // first call feeds the critic: build the encoder in the graph
                        let r = gqn.represent(g, &cur)?;
                        cached = Some(g.value(r).clone());
                        Ok(if train_encoder { r } else { g.detach(r) })
                    }
                },
            },
            &mut self.rng,
        )?;
        let mut report = GraspUpdateReport {
            stats: out.stats,
            encoder_grad_norm: 0.0,
        };
        if let Some(grads) = out.critic_grads {
            let enc = grads.for_store(&gqn.enc_params);
            report.encoder_grad_norm = grad_norm(&enc);
            if train_encoder {
                adam_step(
                    &mut gqn.enc_params,
                    &enc,
                    &mut self.rl_enc_opt,
                    &AdamConfig::with_lr(self.cfg.grasp_sac.lr),
                )?;
            }
        }
        self.last_grasp = Some(report.stats.clone());
        Ok(report)
    }

    /// One generative step: two random views of a stored step are context,
    /// the third is the query.
    pub fn elbo_update(&mut self) -> Result<f64> {
        let (s, c) = self.dims();
        let b = self.cfg.train.gqn_batch;
        let picks = self.replay.sample(b, &mut self.rng)?;
        let mut roles = Vec::with_capacity(b);
        for _ in 0..b {
            let q = self.rng.random_range(0..3);
            roles.push([(q + 1) % 3, (q + 2) % 3, q]);
        }
        let slot = |k: usize| -> Result<ViewBatch<F>> {
            let obs: Vec<&Observation> = picks.iter().zip(&roles).map(|((r, t), role)| &r.views[*t][role[k]]).collect();
            view_batch(&obs, s, c)
        };
        let ctx = [slot(0)?, slot(1)?];
        let query = slot(2)?;
        drop(picks);
        let sigma = self.cfg.gqn.sigma_at(self.elbo_steps);
        let noise = Generator::noise(&self.cfg.gqn, b, &mut self.rng);
        let gqn = &mut self.models.gqn;
        let mut g = Graph::new();
        let terms = gqn.elbo_loss(&mut g, &ctx, &query, sigma, &noise)?;
        let loss = g.value(terms.loss).item() as f64;
        let grads = g.backward(terms.loss)?;
        let cfg = AdamConfig::with_lr(self.cfg.train.gqn_lr);
        let ge = grads.for_store(&gqn.enc_params);
        let gg = grads.for_store(&gqn.gen_params);
        adam_step(&mut gqn.enc_params, &ge, &mut self.enc_opt, &cfg)?;
        adam_step(&mut gqn.gen_params, &gg, &mut self.gen_opt, &cfg)?;
        self.elbo_steps += 1;
        self.last_elbo = Some(loss);
        Ok(loss)
    }

    /// Contextual-bandit update of the glimpse policy on the final sparse rewards.
    pub fn fixation_update(&mut self) -> Result<Option<SacStats>> {
        let Some(agent) = self.models.fixation.as_ref() else { return Ok(None) };
        let b = agent.cfg.batch_size;
        if self.glimpses.len() < b {
            return Ok(None);
        }
        let (s, c) = self.dims();
        let picks = self.glimpses.sample(b, &mut self.rng)?;
        let k = picks[0].0.views.len();
        let ctx = (0..k)
            .map(|i| view_batch(&picks.iter().map(|(r, _)| &r.views[i]).collect::<Vec<_>>(), s, c))
            .collect::<Result<Vec<_>>>()?;
        let actions: Vec<F> = picks.iter().flat_map(|(r, _)| r.action.map(|x| x as F)).collect();
        let rewards: Vec<F> = picks.iter().map(|(r, _)| r.reward as F).collect();
        drop(picks);
        let r = self.models.rep_value(&ctx)?;
        let batch = SacBatch {
            actions: Tensor::new(vec![b, 3], actions)?,
            rewards: Tensor::new(vec![b, 1], rewards)?,
            dones: Tensor::full(vec![b, 1], 1.0),
        };
        let agent = self.models.fixation.as_mut().expect("checked above");
        let out = agent.update(&batch, |g, _| Ok(g.constant(r.clone())), &mut self.rng)?;
        self.last_fix = Some(out.stats.clone());
        Ok(Some(out.stats))
    }

    /// Collect one episode, store it and run the updates it pays for.
    pub fn step(&mut self) -> Result<MetricsRow> {
        let rec = self.collect()?;
        let mut success = 0;
        if let Some(rec) = rec {
            success = rec.success() as u8;
            let steps = rec.steps.len();
            self.env_steps += steps;
            if let Some(dir) = &self.run_dir {
                if self.attempts < self.cfg.train.record_episodes {
                    let ep = dir.join("episodes");
                    std::fs::create_dir_all(&ep)?;
                    let replay = EpisodeReplay::from_record(&rec, self.cfg.episode.dof);
                    std::fs::write(ep.join(format!("episode_{:05}.json", self.attempts)), replay.to_json())?;
                }
            }
            if self.models.fixation.is_some() {
                self.glimpses.push(GlimpseRecord {
                    views: rec.initial_views.clone(),
                    action: rec.fixation_action,
                    reward: rec.sparse_reward,
                })?;
            }
            self.replay.push(rec)?;
            for _ in 0..steps * self.cfg.train.updates_per_step {
                if self.replay.len() < self.cfg.train.warmup_transitions.max(1) {
                    break;
                }
                self.grasp_update()?;
                if !self.cfg.variant.rl_trains_encoder() {
                    self.elbo_update()?;
                }
            }
            self.fixation_update()?;
        }
        self.recent.push_back(success as f64);
        if self.recent.len() > self.cfg.train.success_window {
            self.recent.pop_front();
        }
        self.attempts += 1;
        let t = &self.cfg.train;
        let mut eval = None;
        if self.attempts % t.eval_every == 0 || self.attempts == t.budget {
            let seed = self.cfg.seed ^ 0x5EED_0000_0000 ^ self.attempts as u64;
            let report = evaluate_models(&self.cfg, &self.models, t.eval_episodes, seed)?;
            self.last_eval = Some(report.rate);
            eval = Some(report.rate);
        }
        if let Some(dir) = self.run_dir.clone() {
            if self.attempts % t.checkpoint_every == 0 || self.attempts == t.budget {
                let ck = dir.join("checkpoints").join(format!("ckpt_{:06}.apr", self.attempts));
                save_checkpoint(&ck, &self.cfg, &self.models, self.attempts)?;
                save_checkpoint(&dir.join("checkpoints").join("latest.apr"), &self.cfg, &self.models, self.attempts)?;
                self.write_samples(&dir.join("samples"))?;
            }
        }
        let g = self.last_grasp.as_ref();
        let row = MetricsRow {
            attempt: self.attempts,
            env_steps: self.env_steps,
            success,
            train_success: self.recent.iter().sum::<f64>() / self.recent.len() as f64,
            eval_success: eval,
            elbo: self.last_elbo,
            actor_loss: g.map(|s| s.actor_loss),
            critic_loss: g.map(|s| s.critic_loss),
            alpha: g.map(|s| s.alpha),
            fixation_critic_loss: self.last_fix.as_ref().map(|s| s.critic_loss),
            failed_episodes: self.failed_episodes,
            wall_clock_s: self.started.elapsed().as_secs_f64(),
        };
        if let Some(dir) = &self.run_dir {
            append_metrics(&dir.join("metrics.csv"), &row)?;
        }
        self.metrics.push(row.clone());
        Ok(row)
    }

    pub fn run(&mut self) -> Result<()> {
        while self.attempts < self.cfg.train.budget {
            self.step()?;
        }
        Ok(())
    }

    /// Query view next to the generator's mean prediction for one stored step.
    fn write_samples(&mut self, dir: &Path) -> Result<()> {
        let (s, c) = self.dims();
        let Some(rec) = self.replay.records().last() else { return Ok(()) };
        let triple = &rec.views[0];
        let ctx = [view_batch(&[&triple[0]], s, c)?, view_batch(&[&triple[1]], s, c)?];
        let q = view_batch(&[&triple[2]], s, c)?;
        let truth = triple[2].image(s, c)?;
        let r = self.models.rep_value(&ctx)?;
        let pred = self.models.gqn.generate(&r, &q.v, &q.g, GenMode::Mean, &mut self.rng)?;
        let pred = crate::fovea::Image {
            height: s,
            width: s,
            channels: c,
            data: pred.data().to_vec(),
        };
        truth.save_png(dir.join(format!("query_{:06}.png", self.attempts)))?;
        pred.save_png(dir.join(format!("predicted_{:06}.png", self.attempts)))?;
        Ok(())
    }
}

pub fn append_metrics(path: &Path, row: &MetricsRow) -> Result<()> {
    let exists = path.exists();
    let file = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    let mut w = csv::WriterBuilder::new().has_headers(!exists).from_writer(file);
    w.serialize(row).map_err(|e| CoreError::Format(format!("metrics: {e}")))?;
    w.flush()?;
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| CoreError::Format(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .map(|row| row.map_err(|e| CoreError::Format(format!("{}: {e}", path.display()))))
        .collect()
}
