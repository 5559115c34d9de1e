use apr_core::config::{RunConfig, Variant};
use apr_core::episode::{Camera, RandomPolicy};
use apr_core::fovea::{build_grid, build_uniform_grid};
use apr_core::harness::{evaluate_policy, load_checkpoint, read_metrics, save_checkpoint, wilson_interval, MetricsRow, Trainer};
use apr_core::plots::emit_plots;
use apr_core::scene::Dof;
use apr_core::CoreError;

fn tiny(variant: Variant, seed: u64) -> RunConfig {
    let mut c = RunConfig::desk_scale(variant);
    c.seed = seed;
    c.episode.render_resolution = 32;
    c.episode.image_size = 16;
    c.episode.max_steps = 4;
    c.gqn.image_size = 16;
    c.gqn.r_channels = 8;
    c.gqn.tower_mid = 4;
    c.gqn.hidden = 4;
    c.gqn.latent = 2;
    c.gqn.steps = 2;
    for sac in [&mut c.grasp_sac, &mut c.fixation_sac] {
        sac.batch_size = 3;
        sac.net.channels = [4, 4, 4];
        sac.net.fc_hidden = 8;
    }
    let t = &mut c.train;
    t.budget = 10;
    t.warmup_transitions = 4;
    t.gqn_batch = 2;
    t.eval_every = 5;
    t.eval_episodes = 2;
    t.eval_objects = 2;
    t.max_objects = 2;
    t.checkpoint_every = 5;
    t.success_window = 5;
    c.apply_variant();
    c
}

fn without_clock(rows: &[MetricsRow]) -> Vec<MetricsRow> {
    rows.iter().map(|r| MetricsRow { wall_clock_s: 0.0, ..r.clone() }).collect()
}

#[test]
fn short_run_writes_metrics_checkpoints_and_plots() {
    let tmp = tempfile::tempdir().unwrap();
    let mut dirs = Vec::new();
    for seed in [1, 2] {
        let dir = tmp.path().join(format!("run{seed}"));
        let mut tr = Trainer::new(tiny(Variant::ActiveTarget, seed)).unwrap().with_run_dir(&dir).unwrap();
        tr.run().unwrap();
        let rows = read_metrics(&dir.join("metrics.csv")).unwrap();
        assert_eq!(rows.len(), 10);
        assert_eq!(without_clock(&rows), without_clock(&tr.metrics));
        assert!(rows[4].eval_success.is_some() && rows[9].eval_success.is_some());
        assert!(rows[3].eval_success.is_none());
        assert!(rows.last().unwrap().elbo.is_some(), "generative updates ran");
        assert!(tr.elbo_steps > 0);
        for f in ["checkpoints/ckpt_000005.apr", "checkpoints/ckpt_000010.apr", "checkpoints/latest.apr", "config.json"] {
            assert!(dir.join(f).exists(), "{f}");
        }
        let pngs = std::fs::read_dir(dir.join("samples")).unwrap().count();
        assert!(pngs >= 2);
        dirs.push(dir);
    }

    let out = tmp.path().join("plots");
    let res = emit_plots(&dirs, &out).unwrap();
    assert_eq!(res.summary.len(), 1);
    assert_eq!(res.summary[0].runs, 2);
    assert_eq!(res.summary[0].attempts, 10);
    assert!(res.warnings.is_empty());
    let svg = std::fs::read_to_string(out.join("eval_success.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.contains("polygon") && svg.contains("active-target"));
    assert!(out.join("summary.csv").exists());
}

#[test]
fn same_seed_same_metrics() {
    let run = |seed| {
        let mut c = tiny(Variant::ActiveLearned, seed);
        c.train.budget = 6;
        let mut tr = Trainer::new(c).unwrap();
        tr.run().unwrap();
        without_clock(&tr.metrics)
    };
    let a = run(7);
    assert_eq!(a, run(7));
    assert!(a.iter().any(|r| r.fixation_critic_loss.is_some()), "glimpse policy was trained");
}

#[test]
fn checkpoint_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let mut tr = Trainer::new(tiny(Variant::ActiveLearned, 3)).unwrap();
    for _ in 0..3 {
        tr.step().unwrap();
    }
    let a = tmp.path().join("a.apr");
    save_checkpoint(&a, &tr.cfg, &tr.models, tr.attempts).unwrap();
    let (cfg, models) = load_checkpoint(&a).unwrap();
    assert_eq!(cfg.to_json(), tr.cfg.to_json());
    let b = tmp.path().join("b.apr");
    save_checkpoint(&b, &cfg, &models, tr.attempts).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    let missing = load_checkpoint(&tmp.path().join("nope.apr"));
    assert!(matches!(missing, Err(CoreError::Io(_))), "{missing:?}");
    std::fs::write(tmp.path().join("junk.apr"), b"not a checkpoint").unwrap();
    assert!(load_checkpoint(&tmp.path().join("junk.apr")).is_err());
}

#[test]
fn variants_change_what_they_claim() {
    // sampling grid
    let grid = |v| {
        let c = tiny(v, 0);
        Camera::new(&c.episode, &c.head).unwrap().grid().clone()
    };
    assert_eq!(grid(Variant::ActiveTarget), build_grid(16).unwrap());
    assert_eq!(grid(Variant::NoLogpolar), build_uniform_grid(16).unwrap());
    assert_eq!(grid(Variant::PassiveTarget), build_uniform_grid(16).unwrap());

    // passive cameras stay put for the whole episode
    let mut tr = Trainer::new(tiny(Variant::PassiveTarget, 4)).unwrap();
    let rec = loop {
        if let Some(r) = tr.collect().unwrap() {
            break r;
        }
    };
    let (first, last) = (&rec.views[0], rec.views.last().unwrap());
    assert_eq!(first[0].v, last[0].v);
    assert_eq!(first[1].v, last[1].v);
    assert_eq!(&first[0].v[3..], &[0.0; 3]);

    // action dimension
    let tr = Trainer::new(tiny(Variant::Dof4, 0)).unwrap();
    assert_eq!(tr.models.grasp.act_dim, 4);
    assert_eq!(tr.cfg.episode.dof, Dof::Four);
    assert!(tr.models.fixation.is_some(), "the action-space variants use the learned glimpse");
    let tr = Trainer::new(tiny(Variant::ActiveLearned, 0)).unwrap();
    assert_eq!(tr.models.grasp.act_dim, 6);
    assert!(tr.models.fixation.is_some());
    assert!(!tr.cfg.episode.target_mask);
    assert!(Trainer::new(tiny(Variant::NoLogpolar, 0)).unwrap().models.fixation.is_none());
}

#[test]
fn encoder_gradient_comes_from_rl_only_without_the_generative_loss() {
    let mut norms = Vec::new();
    for v in [Variant::NoRepresentation, Variant::ActiveTarget] {
        let mut c = tiny(v, 5);
        c.train.warmup_transitions = 1_000_000;
        let mut tr = Trainer::new(c).unwrap();
        while tr.replay.len() < 6 {
            tr.step().unwrap();
        }
        let before = tr.models.gqn.enc_params.clone();
        let rep = tr.grasp_update().unwrap();
        let moved = before
            .iter()
            .zip(tr.models.gqn.enc_params.iter())
            .any(|((_, a), (_, b))| a.data() != b.data());
        norms.push((rep.encoder_grad_norm, moved));
    }
    assert!(norms[0].0 > 0.0 && norms[0].1, "no-representation: {:?}", norms[0]);
    assert_eq!(norms[1], (0.0, false), "the grasp loss must not reach a generatively trained encoder");

    let mut c = tiny(Variant::NoRepresentation, 6);
    c.train.budget = 6;
    let mut tr = Trainer::new(c).unwrap();
    tr.run().unwrap();
    assert_eq!(tr.elbo_steps, 0);
    assert!(tr.metrics.iter().all(|r| r.elbo.is_none()));
    assert!(tr.metrics.last().unwrap().critic_loss.is_some());
}

#[test]
fn wilson_reference_values_and_empty_evaluation() {
    // reference values of the 95% score interval
    let (lo, hi) = wilson_interval(0, 10);
    assert!(lo == 0.0 && (hi - 0.277_533).abs() < 1e-5, "{hi}");
    let (lo, hi) = wilson_interval(5, 10);
    assert!((lo - 0.236_593).abs() < 1e-5 && (hi - 0.763_407).abs() < 1e-5, "{lo} {hi}");
    let (lo, hi) = wilson_interval(95, 100);
    assert!((lo - 0.888_250).abs() < 1e-5 && (hi - 0.978_457).abs() < 1e-5, "{lo} {hi}");

    let c = tiny(Variant::ActiveTarget, 0);
    let mut p = RandomPolicy { dof: c.episode.dof };
    assert!(matches!(evaluate_policy(&c, &mut p, 0, 1), Err(CoreError::Config(_))));
    let rep = evaluate_policy(&c, &mut p, 3, 1).unwrap();
    assert_eq!(rep.episodes, 3);
    assert!(rep.ci_low <= rep.rate && rep.rate <= rep.ci_high);
}
