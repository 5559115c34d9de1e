use std::process::{Command, Output};

use apr_core::config::RunConfig;
use apr_core::fovea::Image;

const TINY: &[&str] = &[
    "episode.render_resolution=32",
    "episode.image_size=16",
    "episode.max_steps=4",
    "gqn.r_channels=8",
    "gqn.tower_mid=4",
    "gqn.hidden=4",
    "gqn.latent=2",
    "gqn.steps=2",
    "grasp_sac.batch_size=3",
    "grasp_sac.net.channels=[4,4,4]",
    "grasp_sac.net.fc_hidden=8",
    "train.budget=4",
    "train.warmup_transitions=4",
    "train.gqn_batch=2",
    "train.eval_every=2",
    "train.eval_episodes=2",
    "train.eval_objects=2",
    "train.max_objects=2",
    "train.checkpoint_every=2",
];

fn apr(args: &[&str], seed: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_apr"));
    cmd.args(args).env_remove("APR_SEED");
    if let Some(s) = seed {
        cmd.env("APR_SEED", s);
    }
    cmd.output().expect("binary runs")
}

fn with_sets<'a>(mut base: Vec<&'a str>, sets: &[&'a str]) -> Vec<&'a str> {
    for s in sets {
        base.push("--set");
        base.push(s);
    }
    base
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn config_errors_exit_2_with_the_field_path() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.json");
    std::fs::write(&bad, r#"{"train": {"budgte": 5}}"#).unwrap();
    let o = apr(&["train", "--config", bad.to_str().unwrap(), "--out", tmp.path().join("r").to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("budgte"), "{}", stderr(&o));

    let o = apr(&["train", "--set", "train.budget=0", "--out", tmp.path().join("r").to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("train.budget"), "{}", stderr(&o));

    let o = apr(&["eval", "--policy", "random", "--episodes", "0"], None);
    assert_eq!(o.status.code(), Some(2));
    let o = apr(&["eval", "--episodes", "3"], None);
    assert_eq!(o.status.code(), Some(2), "learned policy without a checkpoint");
    let o = apr(&["eval", "--policy", "random", "--episodes", "1"], Some("not-a-number"));
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_files_exit_3() {
    let tmp = tempfile::tempdir().unwrap();
    let o = apr(&["eval", "--ckpt", tmp.path().join("none.apr").to_str().unwrap(), "--episodes", "2"], None);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    let o = apr(&["plot", tmp.path().join("no-run").to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    let o = apr(&["warp-image", "missing.png", tmp.path().join("o.png").to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn train_eval_plot_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    let args = with_sets(vec!["train", "--out", run.to_str().unwrap(), "--set", "variant=\"active-learned\""], TINY);
    let o = apr(&args, Some("42"));
    assert!(o.status.success(), "{}", stderr(&o));
    let cfg = RunConfig::from_json(&std::fs::read_to_string(run.join("config.json")).unwrap()).unwrap();
    assert_eq!(cfg.seed, 42, "APR_SEED reaches the run config");
    assert_eq!(cfg.train.budget, 4);

    let ckpt = run.join("checkpoints/latest.apr");
    let o = apr(&["eval", "--ckpt", ckpt.to_str().unwrap(), "--episodes", "2"], None);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["episodes"], 2);

    let o = apr(&["eval", "--ckpt", ckpt.to_str().unwrap(), "--episodes", "2", "--policy", "oracle"], None);
    assert!(o.status.success(), "{}", stderr(&o));

    let plots = tmp.path().join("plots");
    let o = apr(&["plot", run.to_str().unwrap(), "--out", plots.to_str().unwrap()], None);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("active-learned"));
    assert!(plots.join("eval_success.svg").exists() && plots.join("summary.csv").exists());
}

#[test]
fn debug_images() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("dbg");
    let o = apr(
        &["render-debug", "--objects", "3", "--out", out.to_str().unwrap(), "--set", "episode.render_resolution=48"],
        None,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["view_0.png", "full_0_rgb.png", "full_0_depth.png", "full_0_instance.png"] {
        assert!(out.join(f).exists(), "{f}");
    }

    let src = tmp.path().join("src.png");
    let mut img = Image::new(40, 40, 3);
    for y in 0..40 {
        for x in 0..40 {
            img.set(0, y, x, x as f32 / 39.0);
        }
    }
    img.save_png(&src).unwrap();
    for (name, extra) in [("fov.png", None), ("uni.png", Some("--uniform"))] {
        let dst = tmp.path().join(name);
        let mut args = vec!["warp-image", src.to_str().unwrap(), dst.to_str().unwrap(), "--size", "16"];
        args.extend(extra);
        let o = apr(&args, None);
        assert!(o.status.success(), "{}", stderr(&o));
        let w = Image::load_png(&dst).unwrap();
        assert_eq!((w.height, w.width), (16, 16));
    }
    let uni = Image::load_png(tmp.path().join("uni.png")).unwrap();
    let fov = Image::load_png(tmp.path().join("fov.png")).unwrap();
    // the foveal grid spends more pixels near the centre, so the ramp is
    // flatter there than in the uniform resampling
    let slope = |im: &Image| im.get(0, 8, 9) - im.get(0, 8, 6);
    assert!(slope(&fov) < slope(&uni), "{} {}", slope(&fov), slope(&uni));
}
