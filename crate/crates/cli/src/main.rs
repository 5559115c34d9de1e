use std::path::{Path, PathBuf};
use std::process::ExitCode;

use apr_core::config::RunConfig;
use apr_core::episode::{Camera, Policy, RandomPolicy, ScriptedOracle};
use apr_core::fovea::{build_grid, build_uniform_grid, sample, Image};
use apr_core::harness::{evaluate_models, evaluate_policy, load_checkpoint, Trainer};
use apr_core::raycam::{render, Lighting};
use apr_core::reach::{ReachConfig, ReachEnv};
use apr_core::scene::{spawn, ObjectSet};
use apr_core::{CoreError, Result};
use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
#[command(name = "apr", version, about = "Active perception grasping agent at desk scale")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyKind {
    Learned,
    Oracle,
    Random,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train one variant and write config, metrics, checkpoints and samples.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dotted override such as `train.budget=200`; repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
        #[arg(long, default_value = "runs/latest")]
        out: PathBuf,
    },
    /// Success rate with a 95% interval on held-out objects.
    Eval {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        episodes: usize,
        #[arg(long, value_enum, default_value = "learned")]
        policy: PolicyKind,
        /// Config for the scripted and random policies (no checkpoint needed).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
        #[arg(long, default_value_t = 12345)]
        seed: u64,
    },
    /// Learning curves and a summary table from one or more run directories.
    Plot {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long, default_value = "plots")]
        out: PathBuf,
    },
    /// Render a random scene: full-resolution RGB, depth and instance ids
    /// plus the network-sized views.
    RenderDebug {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
        #[arg(long, default_value_t = 5)]
        objects: usize,
        #[arg(long, default_value = "render-debug")]
        out: PathBuf,
    },
    /// Resample a PNG with the foveal grid (or a uniform one).
    WarpImage {
        input: PathBuf,
        output: PathBuf,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long)]
        uniform: bool,
    },
    /// Train SAC on the reach-only task and write the report as JSON.
    Reach {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 30_000)]
        env_steps: usize,
        #[arg(long, default_value = "reach_sanity.json")]
        out: PathBuf,
    },
}

/// `APR_SEED` wins over the file but not over an explicit `--set seed=`.
fn with_env_seed(sets: &[String]) -> Result<Vec<String>> {
    let mut all = Vec::new();
    if let Ok(s) = std::env::var("APR_SEED") {
        let seed: u64 = s.parse().map_err(|_| CoreError::Config(format!("APR_SEED: expected an unsigned integer, got {s:?}")))?;
        all.push(format!("seed={seed}"));
    }
    all.extend(sets.iter().cloned());
    Ok(all)
}

fn load_config(file: Option<&Path>, sets: &[String]) -> Result<RunConfig> {
    let (cfg, changed) = RunConfig::load(file, &with_env_seed(sets)?)?;
    if !changed.is_empty() {
        eprintln!("warning: variant {} overrides {}", cfg.variant.name(), changed.join(", "));
    }
    Ok(cfg)
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Train { config, sets, out } => {
            let cfg = load_config(config.as_deref(), &sets)?;
            let budget = cfg.train.budget;
            let mut tr = Trainer::new(cfg)?.with_run_dir(&out)?;
            while tr.attempts < budget {
                let row = tr.step()?;
                if let Some(e) = row.eval_success {
                    eprintln!(
                        "attempt {:>6}  env steps {:>7}  train {:.3}  eval {:.3}  elbo {}",
                        row.attempt,
                        row.env_steps,
                        row.train_success,
                        e,
                        row.elbo.map_or("-".into(), |x| format!("{x:.2}"))
                    );
                }
            }
            println!("{}", out.display());
        }
        Cmd::Eval {
            ckpt,
            episodes,
            policy,
            config,
            sets,
            seed,
        } => {
            let report = match (policy, ckpt) {
                (PolicyKind::Learned, None) => return Err(CoreError::Config("--ckpt is required for the learned policy".into())),
                (PolicyKind::Learned, Some(path)) => {
                    let (cfg, models) = load_checkpoint(&path)?;
                    evaluate_models(&cfg, &models, episodes, seed)?
                }
                (kind, ckpt) => {
                    let cfg = match ckpt {
                        Some(path) => load_checkpoint(&path)?.0,
                        None => load_config(config.as_deref(), &sets)?,
                    };
                    let mut p: Box<dyn Policy> = match kind {
                        PolicyKind::Oracle => Box::new(ScriptedOracle::new(cfg.episode.dof, &cfg.scene, &cfg.episode)),
                        _ => Box::new(RandomPolicy { dof: cfg.episode.dof }),
                    };
                    evaluate_policy(&cfg, p.as_mut(), episodes, seed)?
                }
            };
            println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
        }
        Cmd::Plot { runs, out } => {
            let res = apr_core::plots::emit_plots(&runs, &out)?;
            for w in &res.warnings {
                eprintln!("warning: {w}");
            }
            for row in &res.summary {
                println!(
                    "{:<18} runs {}  attempts {:>6}  eval {:.3} ± {:.3}",
                    row.variant, row.runs, row.attempts, row.final_eval_mean, row.final_eval_std
                );
            }
        }
        Cmd::RenderDebug {
            config,
            sets,
            objects,
            out,
        } => {
            let cfg = load_config(config.as_deref(), &sets)?;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            if objects == 0 {
                return Err(CoreError::Config("render-debug needs at least one object to look at".into()));
            }
            let world = spawn(cfg.seed, objects, ObjectSet::Train, &cfg.scene)?;
            let camera = Camera::new(&cfg.episode, &cfg.head)?;
            let first = &world.objects[0];
            let views = camera.collect_views(&world, &first.position, Some(first.id), true, &mut rng)?;
            std::fs::create_dir_all(&out)?;
            let (s, c) = (cfg.episode.image_size, cfg.episode.image_channels());
            for (k, obs) in views.iter().enumerate() {
                obs.image(s, c)?.save_png(out.join(format!("view_{k}.png")))?;
                if let Some(spec) = &obs.view {
                    let full = render(&world, &spec.camera, &Lighting::default());
                    full.save_rgb(out.join(format!("full_{k}_rgb.png")))?;
                    full.save_depth(out.join(format!("full_{k}_depth.png")))?;
                    full.save_instance(out.join(format!("full_{k}_instance.png")))?;
                }
            }
            println!("{}", out.display());
        }
        Cmd::WarpImage {
            input,
            output,
            size,
            uniform,
        } => {
            let img = Image::load_png(&input)?;
            let grid = if uniform { build_uniform_grid(size)? } else { build_grid(size)? };
            sample(&img, &grid).save_png(&output)?;
        }
        Cmd::Reach { seed, env_steps, out } => {
            let cfg = ReachConfig {
                seed,
                env_steps,
                ..ReachConfig::default()
            };
            let report = ReachEnv::new(cfg)?.train()?;
            std::fs::write(&out, serde_json::to_string_pretty(&report).expect("report serializes"))?;
            println!(
                "oracle {:.2}  random {:.2}  learned {:.2} within {} m",
                report.oracle.within_radius, report.random.within_radius, report.final_eval.within_radius, report.config.radius
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                CoreError::Config(_) => 2,
                CoreError::Io(_) | CoreError::Format(_) => 3,
                _ => 1,
            })
        }
    }
}
