//! Soft actor-critic on top of a spatial representation `r`: squashed-Gaussian
//! actor, twin Q critics with Polyak targets, an auxiliary state-value head and
//! automatic temperature tuning. Also the episode replay buffer.

use std::collections::VecDeque;

use apr_tensor::dist::standard_normal;
use apr_tensor::nn::{rescale, Conv2d, Linear};
use apr_tensor::{adam_step, grad_norm, AdamConfig, AdamState, Gradients, Graph, ParamStore, Real, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{CoreError, Result};

pub const LOG_STD_MIN: f64 = -10.0;
pub const LOG_STD_MAX: f64 = 2.0;
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    /// Widths of the three 3x3 stride-2 convolutions.
    pub channels: [usize; 3],
    pub fc_hidden: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        // reference 128 / 64 / 32 divided by 4
        NetConfig {
            channels: [32, 16, 8],
            fc_hidden: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SacConfig {
    pub gamma: f64,
    pub tau: f64,
    pub batch_size: usize,
    pub replay_capacity: usize,
    pub lr: f64,
    pub alpha_lr: f64,
    pub init_alpha: f64,
    /// Defaults to `-action_dim`.
    pub target_entropy: Option<f64>,
    pub net: NetConfig,
}

impl Default for SacConfig {
    fn default() -> Self {
        SacConfig {
            gamma: 0.99,
            tau: 0.005,
            batch_size: 64,
            replay_capacity: 50_000,
            lr: 3e-4,
            alpha_lr: 3e-4,
            init_alpha: 0.1,
            target_entropy: None,
            net: NetConfig::default(),
        }
    }
}

impl SacConfig {
    pub fn validate(&self, name: &str) -> Result<()> {
        let bad = |m: String| Err(CoreError::Config(format!("{name}.{m}")));
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad(format!("gamma must lie in [0, 1], got {}", self.gamma));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return bad(format!("tau must lie in [0, 1], got {}", self.tau));
        }
        if self.batch_size == 0 || self.replay_capacity == 0 {
            return bad("batch_size and replay_capacity must be positive".into());
        }
        if self.lr < 0.0 || self.alpha_lr < 0.0 || self.init_alpha <= 0.0 {
            return bad("learning rates must be >= 0 and init_alpha > 0".into());
        }
        if self.net.channels.contains(&0) || self.net.fc_hidden == 0 {
            return bad("net widths must be positive".into());
        }
        Ok(())
    }
}

/// Three stride-2 3x3 convolutions and a two-layer fully connected output.
/// An optional vector input (the action, for critics) is tiled over the grid
/// and concatenated with `r` before the first convolution.
#[derive(Clone, Debug)]
pub struct PolicyHead {
    convs: [Conv2d; 3],
    fc: Linear,
    out: Linear,
    pub extra: usize,
    pub out_dim: usize,
}

fn conv_out(n: usize) -> usize {
    (n + 2 - 3) / 2 + 1
}

impl PolicyHead {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        grid: usize,
        extra: usize,
        out_dim: usize,
        net: &NetConfig,
        rng: &mut impl Rng,
    ) -> Self {
        let [c1, c2, c3] = net.channels;
        let convs = [
            Conv2d::new(store, &format!("{name}.conv1"), in_ch + extra, c1, 3, 2, 1, rng),
            Conv2d::new(store, &format!("{name}.conv2"), c1, c2, 3, 2, 1, rng),
            Conv2d::new(store, &format!("{name}.conv3"), c2, c3, 3, 2, 1, rng),
        ];
        let side = conv_out(conv_out(conv_out(grid)));
        let fc = Linear::new(store, &format!("{name}.fc"), c3 * side * side, net.fc_hidden, rng);
        let out = Linear::new(store, &format!("{name}.out"), net.fc_hidden, out_dim, rng);
        rescale(store, out.w, 0.1);
        PolicyHead {
            convs,
            fc,
            out,
            extra,
            out_dim,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, r: Var, extra: Option<Var>) -> Result<Var> {
        let mut x = r;
        if let Some(e) = extra {
            let s = g.shape(r).to_vec();
            let tiled = g.tile(e, s[2], s[3])?;
            x = g.concat(&[r, tiled])?;
        }
        for c in &self.convs {
            x = c.forward(g, store, x)?;
            x = g.relu(x);
        }
        let x = g.flatten(x)?;
        let x = self.fc.forward(g, store, x)?;
        let x = g.relu(x);
        Ok(self.out.forward(g, store, x)?)
    }
}

/// `log(1 - tanh(u)^2)` in the overflow-free form `2 (ln 2 - u - softplus(-2u))`.
pub fn log1m_tanh_sq<T: Real>(g: &mut Graph<T>, u: Var) -> Var {
    let m2u = g.scale(u, -2.0);
    let sp = g.softplus(m2u);
    let s = g.add(u, sp).expect("same shape");
    let s = g.scale(s, -2.0);
    g.add_scalar(s, 2.0 * std::f64::consts::LN_2)
}

/// Squashed-Gaussian sample: returns `(a = tanh(u), log pi(a))` with
/// `a: [B, d]`, `log pi: [B, 1]`.
pub fn squashed_sample<T: Real>(g: &mut Graph<T>, mu: Var, log_std: Var, eps: Tensor<T>) -> Result<(Var, Var)> {
    let e = g.constant(eps.clone());
    let std = g.exp(log_std);
    let noise = g.mul(std, e)?;
    let u = g.add(mu, noise)?;
    let a = g.tanh(u);
    // log N(u; mu, std) = -eps^2/2 - log_std - ln(2 pi)/2, with eps fixed
    let e2 = eps.map(|x| x * x * T::from_f64(-0.5));
    let e2 = g.constant(e2);
    let lp = g.sub(e2, log_std)?;
    let lp = g.add_scalar(lp, -HALF_LN_2PI);
    let corr = log1m_tanh_sq(g, u);
    let lp = g.sub(lp, corr)?;
    let b = g.shape(lp)[0];
    let lp = g.sum_rows(lp)?;
    Ok((a, g.reshape(lp, &[b, 1])?))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RepSlot {
    Current,
    Next,
}

/// Transitions for one update. `rewards`, `dones`: `[B, 1]`; `actions`: `[B, d]` in `[-1, 1]`.
#[derive(Clone, Debug)]
pub struct SacBatch<T> {
    pub actions: Tensor<T>,
    pub rewards: Tensor<T>,
    pub dones: Tensor<T>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct SacStats {
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub value_loss: f64,
    pub alpha: f64,
    pub entropy: f64,
    pub q_mean: f64,
    pub skipped: bool,
}

/// Everything the update produced besides the statistics.
pub struct SacUpdate<T> {
    pub stats: SacStats,
    /// Gradients of the critic loss; parameters of whatever produced `r`
    /// appear here only when `r` was not detached.
    pub critic_grads: Option<Gradients<T>>,
}

#[derive(Clone, Debug)]
pub struct SacAgent<T: Real> {
    pub cfg: SacConfig,
    pub act_dim: usize,
    pub actor: PolicyHead,
    pub q1: PolicyHead,
    pub q2: PolicyHead,
    pub value: PolicyHead,
    pub actor_params: ParamStore<T>,
    pub q_params: ParamStore<T>,
    pub q_target: ParamStore<T>,
    pub v_params: ParamStore<T>,
    pub log_alpha: ParamStore<T>,
    actor_opt: AdamState<T>,
    q_opt: AdamState<T>,
    v_opt: AdamState<T>,
    alpha_opt: AdamState<T>,
    pub updates: u64,
    pub skipped: u64,
}

impl<T: Real> SacAgent<T> {
    pub fn new(cfg: SacConfig, in_ch: usize, grid: usize, act_dim: usize, rng: &mut impl Rng) -> Self {
        let mut actor_params = ParamStore::new();
        let mut q_params = ParamStore::new();
        let mut v_params = ParamStore::new();
        let actor = PolicyHead::new(&mut actor_params, "actor", in_ch, grid, 0, 2 * act_dim, &cfg.net, rng);
        let q1 = PolicyHead::new(&mut q_params, "q1", in_ch, grid, act_dim, 1, &cfg.net, rng);
        let q2 = PolicyHead::new(&mut q_params, "q2", in_ch, grid, act_dim, 1, &cfg.net, rng);
        let value = PolicyHead::new(&mut v_params, "value", in_ch, grid, 0, 1, &cfg.net, rng);
        let mut log_alpha = ParamStore::new();
        log_alpha.add("log_alpha", Tensor::scalar(T::from_f64(cfg.init_alpha.ln())));
        SacAgent {
            act_dim,
            actor,
            q1,
            q2,
            value,
            q_target: q_params.clone(),
            actor_opt: AdamState::new(&actor_params),
            q_opt: AdamState::new(&q_params),
            v_opt: AdamState::new(&v_params),
            alpha_opt: AdamState::new(&log_alpha),
            actor_params,
            q_params,
            v_params,
            log_alpha,
            cfg,
            updates: 0,
            skipped: 0,
        }
    }

    pub fn alpha(&self) -> f64 {
        self.log_alpha.tensors()[0].item().as_f64().exp()
    }

    pub fn target_entropy(&self) -> f64 {
        self.cfg.target_entropy.unwrap_or(-(self.act_dim as f64))
    }

    /// Actor mean and clamped log-std, each `[B, d]`.
    pub fn actor_stats(&self, g: &mut Graph<T>, r: Var) -> Result<(Var, Var)> {
        let out = self.actor.forward(g, &self.actor_params, r, None)?;
        let mu = g.narrow(out, 0, self.act_dim)?;
        let ls = g.narrow(out, self.act_dim, self.act_dim)?;
        Ok((mu, g.clamp(ls, LOG_STD_MIN, LOG_STD_MAX)))
    }

    /// Actions in `[-1, 1]^d` for every row of `r`, with their log-probabilities.
    /// Deterministic mode returns `tanh(mu)`; its log-probability is that of the mode.
    pub fn act(&self, r: &Tensor<T>, stochastic: bool, rng: &mut impl Rng) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
        let b = r.shape()[0];
        let mut g = Graph::new();
        let rv = g.constant(r.clone());
        let (mu, ls) = self.actor_stats(&mut g, rv)?;
        let eps = if stochastic {
            standard_normal(&[b, self.act_dim], rng)
        } else {
            Tensor::zeros(vec![b, self.act_dim])
        };
        let (a, lp) = squashed_sample(&mut g, mu, ls, eps)?;
        let a = g.value(a).data().chunks(self.act_dim).map(|c| c.iter().map(|v| v.as_f64()).collect()).collect();
        let lp = g.value(lp).data().iter().map(|v| v.as_f64()).collect();
        Ok((a, lp))
    }

    fn twin_q(&self, g: &mut Graph<T>, store: &ParamStore<T>, r: Var, a: Var) -> Result<(Var, Var)> {
        let q1 = self.q1.forward(g, store, r, Some(a))?;
        let q2 = self.q2.forward(g, store, r, Some(a))?;
        Ok((q1, q2))
    }

    /// One SAC step. `rep` builds the representation for the current or next
    /// states inside the given graph; return a detached (or constant) node to
    /// keep the encoder out of RL training. Only the critic loss sees the
    /// representation undetached; the actor, value and temperature losses
    /// always detach it.
    pub fn update(
        &mut self,
        batch: &SacBatch<T>,
        mut rep: impl FnMut(&mut Graph<T>, RepSlot) -> Result<Var>,
        rng: &mut impl Rng,
    ) -> Result<SacUpdate<T>> {
        let b = batch.actions.shape()[0];
        let d = self.act_dim;
        if batch.actions.shape() != [b, d] || batch.rewards.shape() != [b, 1] || batch.dones.shape() != [b, 1] {
            return Err(CoreError::Shape(format!(
                "sac batch: actions {:?}, rewards {:?}, dones {:?} for action dim {d}",
                batch.actions.shape(),
                batch.rewards.shape(),
                batch.dones.shape()
            )));
        }
        let alpha = self.alpha();
        let gamma = self.cfg.gamma;

        // soft TD target, value only
        let bootstrap = gamma > 0.0 && batch.dones.data().iter().any(|&x| x.as_f64() < 0.5);
        let next_v: Vec<f64> = if bootstrap {
            let mut g = Graph::new();
            let r2 = rep(&mut g, RepSlot::Next)?;
            let r2 = g.detach(r2);
            let (mu, ls) = self.actor_stats(&mut g, r2)?;
            let (a2, lp2) = squashed_sample(&mut g, mu, ls, standard_normal(&[b, d], rng))?;
            let (t1, t2) = self.twin_q(&mut g, &self.q_target, r2, a2)?;
            let tmin = g.minimum(t1, t2)?;
            let (tmin, lp2) = (g.value(tmin), g.value(lp2));
            tmin.data().iter().zip(lp2.data()).map(|(q, l)| q.as_f64() - alpha * l.as_f64()).collect()
        } else {
            vec![0.0; b]
        };
        let y: Vec<T> = (0..b)
            .map(|i| {
                let r = batch.rewards.data()[i].as_f64();
                let done = batch.dones.data()[i].as_f64();
                T::from_f64(r + gamma * (1.0 - done) * next_v[i])
            })
            .collect();
        let y = Tensor::new(vec![b, 1], y)?;

        // critics
        let mut g = Graph::new();
        let r = rep(&mut g, RepSlot::Current)?;
        let a = g.constant(batch.actions.clone());
        let (q1, q2) = self.twin_q(&mut g, &self.q_params, r, a)?;
        let yv = g.constant(y);
        let e1 = g.sub(q1, yv)?;
        let e2 = g.sub(q2, yv)?;
        let l1 = g.square(e1);
        let l2 = g.square(e2);
        let l = g.add(l1, l2)?;
        let critic_loss = g.mean(l);
        let critic_loss = g.scale(critic_loss, 0.5);
        let q_mean = g.value(q1).data().iter().map(|v| v.as_f64()).sum::<f64>() / b as f64;
        let critic_value = g.value(critic_loss).item().as_f64();
        if !critic_value.is_finite() {
            self.skipped += 1;
            return Ok(SacUpdate {
                stats: SacStats {
                    skipped: true,
                    alpha,
                    ..Default::default()
                },
                critic_grads: None,
            });
        }
        let critic_grads = g.backward(critic_loss)?;
        let qg = critic_grads.for_store(&self.q_params);
        adam_step(
            &mut self.q_params,
            &qg,
            &mut self.q_opt,
            &AdamConfig::with_lr(self.cfg.lr),
        )?;
        drop(g);

        // actor, reading the freshly updated critics
        let mut g = Graph::new();
        let r = rep(&mut g, RepSlot::Current)?;
        let r = g.detach(r);
        let (mu, ls) = self.actor_stats(&mut g, r)?;
        let (a, lp) = squashed_sample(&mut g, mu, ls, standard_normal(&[b, d], rng))?;
        let (q1, q2) = self.twin_q(&mut g, &self.q_params, r, a)?;
        let qmin = g.minimum(q1, q2)?;
        let alp = g.scale(lp, alpha);
        let diff = g.sub(alp, qmin)?;
        let actor_loss = g.mean(diff);
        let lp_vals: Vec<f64> = g.value(lp).data().iter().map(|v| v.as_f64()).collect();
        let mean_lp = lp_vals.iter().sum::<f64>() / b as f64;
        let soft_v: Vec<T> = g
            .value(qmin)
            .data()
            .iter()
            .zip(&lp_vals)
            .map(|(q, l)| T::from_f64(q.as_f64() - alpha * l))
            .collect();
        let actor_value = g.value(actor_loss).item().as_f64();
        let actor_grads = g.backward(actor_loss)?;
        let ag = actor_grads.for_store(&self.actor_params);
        let step = adam_step(
            &mut self.actor_params,
            &ag,
            &mut self.actor_opt,
            &AdamConfig::with_lr(self.cfg.lr),
        )?;
        let mut skipped = step == apr_tensor::StepOutcome::SkippedNonFinite;

        // temperature: d/d(log alpha) of -log_alpha (log pi + H) is -(log pi + H)
        let ga = -(mean_lp + self.target_entropy());
        let ga = Tensor::scalar(T::from_f64(ga));
        adam_step(&mut self.log_alpha, &[ga], &mut self.alpha_opt, &AdamConfig::with_lr(self.cfg.alpha_lr))?;

        // state value toward the soft value of the current policy
        let mut g = Graph::new();
        let r = rep(&mut g, RepSlot::Current)?;
        let r = g.detach(r);
        let v = self.value.forward(&mut g, &self.v_params, r, None)?;
        let t = g.constant(Tensor::new(vec![b, 1], soft_v)?);
        let e = g.sub(v, t)?;
        let e = g.square(e);
        let value_loss = g.mean(e);
        let value_loss = g.scale(value_loss, 0.5);
        let value_value = g.value(value_loss).item().as_f64();
        let vg = g.backward(value_loss)?;
        let vg = vg.for_store(&self.v_params);
        let vstep = adam_step(&mut self.v_params, &vg, &mut self.v_opt, &AdamConfig::with_lr(self.cfg.lr))?;
        skipped |= vstep == apr_tensor::StepOutcome::SkippedNonFinite;

        self.q_target.polyak_from(&self.q_params, self.cfg.tau)?;
        self.updates += 1;
        if skipped {
            self.skipped += 1;
        }
        Ok(SacUpdate {
            stats: SacStats {
                critic_loss: critic_value,
                actor_loss: actor_value,
                value_loss: value_value,
                alpha: self.alpha(),
                entropy: -mean_lp,
                q_mean,
                skipped,
            },
            critic_grads: Some(critic_grads),
        })
    }

    pub fn save_into(&self, ck: &mut apr_tensor::checkpoint::Checkpoint, prefix: &str) {
        ck.push_store(&format!("{prefix}.actor"), &self.actor_params);
        ck.push_store(&format!("{prefix}.q"), &self.q_params);
        ck.push_store(&format!("{prefix}.q_target"), &self.q_target);
        ck.push_store(&format!("{prefix}.value"), &self.v_params);
        ck.push_store(&format!("{prefix}.alpha"), &self.log_alpha);
    }

    pub fn load_from(&mut self, ck: &apr_tensor::checkpoint::Checkpoint, prefix: &str) -> Result<()> {
        ck.load_store(&format!("{prefix}.actor"), &mut self.actor_params)?;
        ck.load_store(&format!("{prefix}.q"), &mut self.q_params)?;
        ck.load_store(&format!("{prefix}.q_target"), &mut self.q_target)?;
        ck.load_store(&format!("{prefix}.value"), &mut self.v_params)?;
        ck.load_store(&format!("{prefix}.alpha"), &mut self.log_alpha)?;
        Ok(())
    }
}

/// L2 norm of the gradient `grads` carries for `store`'s parameters.
pub fn store_grad_norm<T: Real>(grads: &Gradients<T>, store: &ParamStore<T>) -> f64 {
    grad_norm(&grads.for_store(store))
}

/// Anything stored in replay: a record holding `transitions()` sampleable steps.
pub trait ReplayRecord {
    fn transitions(&self) -> usize;
}

/// FIFO store of whole records with a capacity counted in transitions;
/// sampling is uniform over transitions.
#[derive(Clone, Debug)]
pub struct ReplayBuffer<R> {
    records: VecDeque<R>,
    /// Cumulative transition counts, rebuilt lazily after pushes/evictions.
    prefix: Vec<usize>,
    dirty: bool,
    total: usize,
    capacity: usize,
    pub evicted: usize,
}

impl<R: ReplayRecord> ReplayBuffer<R> {
    pub fn new(capacity: usize) -> Self {
        ReplayBuffer {
            records: VecDeque::new(),
            prefix: Vec::new(),
            dirty: false,
            total: 0,
            capacity,
            evicted: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    pub fn records(&self) -> impl Iterator<Item = &R> {
        self.records.iter()
    }

    pub fn num_records(&self) -> usize {
        self.records.len()
    }

    pub fn push(&mut self, rec: R) -> Result<()> {
        let n = rec.transitions();
        if n == 0 {
            return Err(CoreError::Training("replay: record without transitions".into()));
        }
        if n > self.capacity {
            return Err(CoreError::Training(format!("replay: record of {n} transitions exceeds capacity {}", self.capacity)));
        }
        self.records.push_back(rec);
        self.total += n;
        while self.total > self.capacity {
            let old = self.records.pop_front().expect("non-empty");
            self.total -= old.transitions();
            self.evicted += 1;
        }
        self.dirty = true;
        Ok(())
    }

    fn refresh(&mut self) {
        if self.dirty {
            self.prefix.clear();
            let mut acc = 0;
            for r in &self.records {
                acc += r.transitions();
                self.prefix.push(acc);
            }
            self.dirty = false;
        }
    }

    /// Uniform flat transition index -> (record, step within record).
    pub fn locate(&mut self, flat: usize) -> (usize, usize) {
        self.refresh();
        let rec = self.prefix.partition_point(|&p| p <= flat);
        let start = if rec == 0 { 0 } else { self.prefix[rec - 1] };
        (rec, flat - start)
    }

    pub fn sample(&mut self, batch: usize, rng: &mut impl Rng) -> Result<Vec<(&R, usize)>> {
        if self.total == 0 {
            return Err(CoreError::Training("replay: sample from empty buffer".into()));
        }
        let picks: Vec<(usize, usize)> = (0..batch)
            .map(|_| {
                let k = rng.random_range(0..self.total);
                self.locate(k)
            })
            .collect();
        Ok(picks.into_iter().map(|(r, t)| (&self.records[r], t)).collect())
    }
}
