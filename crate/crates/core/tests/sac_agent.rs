use apr_core::sac::{squashed_sample, NetConfig, RepSlot, SacAgent, SacBatch, SacConfig};
use apr_tensor::{Graph, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_cfg() -> SacConfig {
    SacConfig {
        batch_size: 32,
        lr: 3e-3,
        alpha_lr: 3e-3,
        net: NetConfig {
            channels: [4, 4, 4],
            fc_hidden: 16,
        },
        ..SacConfig::default()
    }
}

/// Change-of-variables density of `tanh(u)`, `u ~ N(mu, std^2)`.
fn oracle_log_density(mu: f64, std: f64, a: f64) -> f64 {
    let u = 0.5 * ((1.0 + a) / (1.0 - a)).ln();
    let z = (u - mu) / std;
    let gauss = -0.5 * z * z - std.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();
    gauss - (1.0 - a * a).ln()
}

fn log_prob_at(mu: f64, log_std: f64, a: f64) -> f64 {
    let u = a.atanh();
    let eps = (u - mu) / log_std.exp();
    let mut g = Graph::<f64>::new();
    let m = g.constant(Tensor::from_f64(vec![1, 1], &[mu]).unwrap());
    let s = g.constant(Tensor::from_f64(vec![1, 1], &[log_std]).unwrap());
    let (_, lp) = squashed_sample(&mut g, m, s, Tensor::from_f64(vec![1, 1], &[eps]).unwrap()).unwrap();
    g.value(lp).item()
}

#[test]
fn squashed_log_prob_matches_change_of_variables() {
    for &(mu, ls) in &[(0.0, 0.0), (0.7, -0.5), (-1.3, 0.4)] {
        for k in 1..40 {
            let a = -0.975 + 0.05 * k as f64;
            let got = log_prob_at(mu, ls, a);
            let want = oracle_log_density(mu, f64::exp(ls), a);
            assert!((got - want).abs() < 1e-9, "mu {mu} ls {ls} a {a}: {got} vs {want}");
        }
    }
}

#[test]
fn squashed_density_integrates_to_one() {
    // substitute a = tanh(u) so the integrand is smooth over the real line
    for &(mu, ls) in &[(0.0, 0.0), (1.5, -1.0), (-0.4, 0.6)] {
        let std = f64::exp(ls);
        let (lo, hi, n) = (mu - 12.0 * std, mu + 12.0 * std, 20_000);
        let h = (hi - lo) / n as f64;
        let mut total = 0.0;
        for i in 0..=n {
            let u: f64 = lo + h * i as f64;
            let a = u.tanh();
            if a.abs() >= 1.0 {
                continue;
            }
            let w = if i == 0 || i == n { 0.5 } else { 1.0 };
            total += w * log_prob_at(mu, ls, a).exp() * (1.0 - a * a);
        }
        total *= h;
        assert!((total - 1.0).abs() < 1e-6, "mu {mu}: {total}");
    }
}

#[test]
fn large_pre_squash_values_stay_finite() {
    let mut g = Graph::<f64>::new();
    let m = g.constant(Tensor::from_f64(vec![1, 3], &[40.0, -40.0, 0.0]).unwrap());
    let s = g.constant(Tensor::from_f64(vec![1, 3], &[-10.0, -10.0, 2.0]).unwrap());
    let (a, lp) = squashed_sample(&mut g, m, s, Tensor::from_f64(vec![1, 3], &[0.0, 0.0, 5.0]).unwrap()).unwrap();
    assert!(g.value(lp).item().is_finite());
    assert!(g.value(a).data().iter().all(|x| x.abs() <= 1.0));
    let grads = g.backward(lp).unwrap();
    assert!(grads.wrt(m).is_none() || grads.wrt(m).unwrap().iter().all(|x| x.is_finite()));
}

fn const_rep(grid: usize, ch: usize, b: usize) -> Tensor<f64> {
    let data: Vec<f64> = (0..b * ch * grid * grid).map(|i| ((i % 7) as f64 - 3.0) * 0.1).collect();
    Tensor::new(vec![b, ch, grid, grid], data).unwrap()
}

#[test]
fn bandit_actor_finds_reward_peak() {
    // one-step problem: reward -(a - 0.5)^2 per dimension, no bootstrapping
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cfg = SacConfig {
        gamma: 0.0,
        init_alpha: 0.01,
        lr: 1e-3,
        ..small_cfg()
    };
    let (grid, ch, d, b) = (4, 2, 2, 32);
    let mut agent = SacAgent::<f64>::new(cfg, ch, grid, d, &mut rng);
    let r = const_rep(grid, ch, b);
    let r1 = const_rep(grid, ch, 1);
    for _ in 0..2000 {
        let (acts, _) = agent.act(&r, true, &mut rng).unwrap();
        let rewards: Vec<f64> = acts.iter().map(|a| -a.iter().map(|x| (x - 0.5).powi(2)).sum::<f64>()).collect();
        let batch = SacBatch {
            actions: Tensor::from_f64(vec![b, d], &acts.concat()).unwrap(),
            rewards: Tensor::from_f64(vec![b, 1], &rewards).unwrap(),
            dones: Tensor::full(vec![b, 1], 1.0),
        };
        let rr = r.clone();
        agent.update(&batch, |g, _| Ok(g.constant(rr.clone())), &mut rng).unwrap();
    }
    let (mode, _) = agent.act(&r1, false, &mut rng).unwrap();
    for &x in &mode[0] {
        assert!((x - 0.5).abs() < 0.1, "deterministic action {:?}", mode[0]);
    }
}

#[test]
fn terminal_critic_regresses_to_reward() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (grid, ch, d, b) = (4, 2, 1, 16);
    let mut agent = SacAgent::<f64>::new(small_cfg(), ch, grid, d, &mut rng);
    let r = const_rep(grid, ch, b);
    let mut last = 0.0;
    for _ in 0..600 {
        let acts: Vec<f64> = (0..b).map(|_| rng.random_range(-1.0..1.0)).collect();
        let batch = SacBatch {
            actions: Tensor::from_f64(vec![b, d], &acts).unwrap(),
            rewards: Tensor::full(vec![b, 1], 2.0),
            dones: Tensor::full(vec![b, 1], 1.0),
        };
        let rr = r.clone();
        last = agent.update(&batch, |g, _| Ok(g.constant(rr.clone())), &mut rng).unwrap().stats.q_mean;
    }
    assert!((last - 2.0).abs() < 0.05, "Q = {last}");
}

#[test]
fn polyak_extremes() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (grid, ch, d, b) = (4, 2, 1, 8);
    let r = const_rep(grid, ch, b);
    let batch = SacBatch {
        actions: Tensor::full(vec![b, d], 0.3),
        rewards: Tensor::full(vec![b, 1], 1.0),
        dones: Tensor::full(vec![b, 1], 0.0),
    };
    for tau in [0.0, 1.0] {
        let cfg = SacConfig { tau, ..small_cfg() };
        let mut agent = SacAgent::<f64>::new(cfg, ch, grid, d, &mut rng);
        let before = agent.q_target.clone();
        let rr = r.clone();
        agent.update(&batch, |g, _| Ok(g.constant(rr.clone())), &mut rng).unwrap();
        let expect = if tau == 0.0 { &before } else { &agent.q_params };
        assert!(agent.q_params.tensors() != before.tensors(), "critic must move");
        assert_eq!(agent.q_target.tensors(), expect.tensors(), "tau = {tau}");
    }
}

#[test]
fn encoder_gradients_only_through_critic() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (grid, ch, d, b) = (4, 2, 1, 8);
    let mut enc = ParamStore::<f64>::new();
    let w = enc.add("enc", const_rep(grid, ch, b));
    let batch = SacBatch {
        actions: Tensor::full(vec![b, d], -0.2),
        rewards: Tensor::full(vec![b, 1], 1.0),
        dones: Tensor::full(vec![b, 1], 0.0),
    };
    for detach in [false, true] {
        let mut agent = SacAgent::<f64>::new(small_cfg(), ch, grid, d, &mut rng);
        let mut slots = Vec::new();
        let out = agent
            .update(
                &batch,
                |g, slot| {
                    slots.push(slot);
                    let v = g.param(&enc, w);
                    Ok(if detach { g.detach(v) } else { v })
                },
                &mut rng,
            )
            .unwrap();
        assert_eq!(slots[0], RepSlot::Next);
        let norm = apr_core::sac::store_grad_norm(out.critic_grads.as_ref().unwrap(), &enc);
        assert_eq!(norm > 0.0, !detach, "detach = {detach}: norm {norm}");
    }
}

#[test]
fn temperature_falls_when_entropy_exceeds_target() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let cfg = SacConfig {
        target_entropy: Some(-20.0),
        ..small_cfg()
    };
    let (grid, ch, d, b) = (4, 2, 2, 8);
    let mut agent = SacAgent::<f64>::new(cfg.clone(), ch, grid, d, &mut rng);
    let r = const_rep(grid, ch, b);
    let batch = SacBatch {
        actions: Tensor::full(vec![b, d], 0.0),
        rewards: Tensor::full(vec![b, 1], 0.0),
        dones: Tensor::full(vec![b, 1], 1.0),
    };
    for _ in 0..20 {
        let rr = r.clone();
        agent.update(&batch, |g, _| Ok(g.constant(rr.clone())), &mut rng).unwrap();
    }
    assert!(agent.alpha() < cfg.init_alpha);
}

#[test]
fn malformed_batch_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut agent = SacAgent::<f64>::new(small_cfg(), 2, 4, 2, &mut rng);
    let batch = SacBatch {
        actions: Tensor::full(vec![4, 3], 0.0),
        rewards: Tensor::full(vec![4, 1], 0.0),
        dones: Tensor::full(vec![4, 1], 1.0),
    };
    let r = const_rep(4, 2, 4);
    assert!(agent.update(&batch, |g, _| Ok(g.constant(r.clone())), &mut rng).is_err());
}

struct Episode {
    id: usize,
    len: usize,
}

impl apr_core::sac::ReplayRecord for Episode {
    fn transitions(&self) -> usize {
        self.len
    }
}

#[test]
fn replay_sampling_uniform_over_transitions() {
    use statrs::distribution::{ChiSquared, ContinuousCDF};
    let mut buf = apr_core::sac::ReplayBuffer::new(1000);
    let lens = [1, 15, 4, 9, 2, 15, 7];
    for (id, &len) in lens.iter().enumerate() {
        buf.push(Episode { id, len }).unwrap();
    }
    let total: usize = lens.iter().sum();
    let mut offsets = vec![0];
    for &n in &lens {
        offsets.push(offsets.last().unwrap() + n);
    }
    let mut counts = vec![0usize; total];
    let draws = 200_000;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for (rec, t) in buf.sample(draws, &mut rng).unwrap() {
        counts[offsets[rec.id] + t] += 1;
    }
    let expected = draws as f64 / total as f64;
    let stat: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let p = 1.0 - ChiSquared::new((total - 1) as f64).unwrap().cdf(stat);
    assert!(p > 1e-3, "chi-square {stat}, p = {p}");
}
