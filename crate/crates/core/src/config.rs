//! Run configuration: one JSON document covering every module, experiment
//! variants, and `key.path=value` overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::episode::{EpisodeConfig, FixationSource, ViewMode};
use crate::gqn::GqnConfig;
use crate::head::HeadConfig;
use crate::sac::{NetConfig, SacConfig};
use crate::scene::{Dof, SceneConfig};
use crate::{CoreError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    ActiveTarget,
    PassiveTarget,
    ActiveLearned,
    NoLogpolar,
    NoRepresentation,
    Dof4,
    Dof6,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::ActiveTarget,
        Variant::PassiveTarget,
        Variant::ActiveLearned,
        Variant::NoLogpolar,
        Variant::NoRepresentation,
        Variant::Dof4,
        Variant::Dof6,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::ActiveTarget => "active-target",
            Variant::PassiveTarget => "passive-target",
            Variant::ActiveLearned => "active-learned",
            Variant::NoLogpolar => "no-logpolar",
            Variant::NoRepresentation => "no-representation",
            Variant::Dof4 => "dof4",
            Variant::Dof6 => "dof6",
        }
    }

    pub fn targeted(self) -> bool {
        matches!(
            self,
            Variant::ActiveTarget | Variant::PassiveTarget | Variant::NoLogpolar | Variant::NoRepresentation
        )
    }

    /// RL losses train the encoder and the generative loss is off.
    pub fn rl_trains_encoder(self) -> bool {
        self == Variant::NoRepresentation
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Grasp attempts (episodes) to run.
    pub budget: usize,
    /// Objects per training episode are drawn from `1..=max_objects`.
    pub max_objects: usize,
    pub warmup_transitions: usize,
    pub updates_per_step: usize,
    pub gqn_batch: usize,
    pub gqn_lr: f64,
    pub eval_every: usize,
    pub eval_episodes: usize,
    pub eval_objects: usize,
    pub checkpoint_every: usize,
    pub success_window: usize,
    /// Episodes to dump as replay JSON (first N).
    pub record_episodes: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            budget: 10_000,
            max_objects: 5,
            warmup_transitions: 1000,
            updates_per_step: 1,
            gqn_batch: 16,
            gqn_lr: 5e-4,
            eval_every: 1000,
            eval_episodes: 100,
            eval_objects: 5,
            checkpoint_every: 1000,
            success_window: 500,
            record_episodes: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub variant: Variant,
    pub seed: u64,
    pub scene: SceneConfig,
    pub head: HeadConfig,
    pub episode: EpisodeConfig,
    pub gqn: GqnConfig,
    pub grasp_sac: SacConfig,
    pub fixation_sac: SacConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            variant: Variant::ActiveTarget,
            seed: 0,
            scene: SceneConfig::default(),
            head: HeadConfig::default(),
            episode: EpisodeConfig::default(),
            gqn: GqnConfig::default(),
            grasp_sac: SacConfig::default(),
            fixation_sac: SacConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    /// Small images and narrow networks: runs on a laptop CPU.
    pub fn desk_scale(variant: Variant) -> RunConfig {
        let net = NetConfig {
            channels: [32, 16, 8],
            fc_hidden: 64,
        };
        let mut cfg = RunConfig {
            variant,
            episode: EpisodeConfig {
                render_resolution: 128,
                image_size: 32,
                ..EpisodeConfig::default()
            },
            gqn: GqnConfig {
                image_size: 32,
                r_channels: 32,
                tower_mid: 16,
                hidden: 16,
                latent: 4,
                steps: 4,
                lstm_kernel: 3,
                ..GqnConfig::default()
            },
            grasp_sac: SacConfig {
                net: net.clone(),
                replay_capacity: 20_000,
                ..SacConfig::default()
            },
            fixation_sac: SacConfig {
                net,
                replay_capacity: 5_000,
                ..SacConfig::default()
            },
            ..RunConfig::default()
        };
        cfg.apply_variant();
        cfg
    }

    /// Force the settings a variant is defined by. Returns the dotted names
    /// of fields that had to change.
    pub fn apply_variant(&mut self) -> Vec<String> {
        let mut changed = Vec::new();
        let v = self.variant;
        let ep = &mut self.episode;
        let mut set = |name: &str, cond: bool, f: &mut dyn FnMut()| {
            if cond {
                f();
                changed.push(format!("episode.{name}"));
            }
        };
        let view = if v == Variant::PassiveTarget { ViewMode::Passive } else { ViewMode::Active };
        set("view_mode", ep.view_mode != view, &mut || ep.view_mode = view);
        let fix = if v.targeted() { FixationSource::Target } else { FixationSource::Policy };
        set("fixation", ep.fixation != fix, &mut || ep.fixation = fix);
        let mask = v.targeted();
        set("target_mask", ep.target_mask != mask, &mut || ep.target_mask = mask);
        if v == Variant::NoLogpolar {
            set("log_polar", ep.log_polar, &mut || ep.log_polar = false);
        }
        let dof = if v == Variant::Dof4 { Dof::Four } else { Dof::Six };
        set("dof", ep.dof != dof, &mut || ep.dof = dof);
        let ch = ep.image_channels();
        if self.gqn.image_channels != ch {
            self.gqn.image_channels = ch;
            changed.push("gqn.image_channels".into());
        }
        if self.gqn.image_size != ep.image_size {
            self.gqn.image_size = ep.image_size;
            changed.push("gqn.image_size".into());
        }
        changed
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.head.validate()?;
        self.episode.validate()?;
        self.gqn.validate()?;
        self.grasp_sac.validate("grasp_sac")?;
        self.fixation_sac.validate("fixation_sac")?;
        let t = &self.train;
        let bad = |m: String| Err(CoreError::Config(format!("train.{m}")));
        if t.budget == 0 {
            return bad("budget must be positive".into());
        }
        if t.max_objects == 0 || t.max_objects > self.scene.max_objects {
            return bad(format!("max_objects must lie in 1..={}", self.scene.max_objects));
        }
        if t.eval_objects == 0 || t.eval_objects > self.scene.max_objects {
            return bad(format!("eval_objects must lie in 1..={}", self.scene.max_objects));
        }
        if t.eval_every == 0 || t.checkpoint_every == 0 || t.success_window == 0 || t.gqn_batch == 0 {
            return bad("eval_every, checkpoint_every, success_window and gqn_batch must be positive".into());
        }
        if self.gqn.image_size != self.episode.image_size || self.gqn.image_channels != self.episode.image_channels() {
            return Err(CoreError::Config(format!(
                "gqn expects {s}x{s}x{c} images but episodes produce {e}x{e}x{ec}",
                s = self.gqn.image_size,
                c = self.gqn.image_channels,
                e = self.episode.image_size,
                ec = self.episode.image_channels()
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn from_json(text: &str) -> Result<RunConfig> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| CoreError::Config(format!("{}: {}", e.path(), e.inner())))
    }

    /// File (optional) on top of the desk-scale defaults of its variant,
    /// then `--set` overrides, then the variant is re-imposed and checked.
    pub fn load(file: Option<&Path>, sets: &[String]) -> Result<(RunConfig, Vec<String>)> {
        let user: Value = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p)?;
                serde_json::from_str(&text).map_err(|e| CoreError::Config(format!("{}: {e}", p.display())))?
            }
            None => Value::Object(Default::default()),
        };
        let mut overrides = Vec::new();
        for s in sets {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| CoreError::Config(format!("override `{s}` is not key=value")))?;
            let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
            overrides.push((k.trim().to_string(), value));
        }
        // the variant decides the base document
        let mut variant = Variant::ActiveTarget;
        if let Some(v) = user.get("variant") {
            variant = serde_json::from_value(v.clone()).map_err(|e| CoreError::Config(format!("variant: {e}")))?;
        }
        for (k, v) in &overrides {
            if k == "variant" {
                variant = serde_json::from_value(v.clone()).map_err(|e| CoreError::Config(format!("variant: {e}")))?;
            }
        }
        let mut doc = serde_json::to_value(RunConfig::desk_scale(variant)).expect("config serializes");
        merge(&mut doc, &user, "")?;
        for (k, v) in overrides {
            set_path(&mut doc, &k, v)?;
        }
        let mut cfg = RunConfig::from_json(&doc.to_string())?;
        let changed = cfg.apply_variant();
        cfg.validate()?;
        Ok((cfg, changed))
    }
}

fn merge(base: &mut Value, over: &Value, path: &str) -> Result<()> {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                let p = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match b.get_mut(k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v, &p)?,
                    Some(slot) => *slot = v.clone(),
                    None => return Err(CoreError::Config(format!("unknown field `{p}`"))),
                }
            }
            Ok(())
        }
        (b, o) => {
            *b = o.clone();
            Ok(())
        }
    }
}

fn set_path(doc: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut cur = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| CoreError::Config(format!("`{}` is not a section", parts[..i].join("."))))?;
        let slot = obj.get_mut(*part).ok_or_else(|| CoreError::Config(format!("unknown field `{key}`")))?;
        if i + 1 == parts.len() {
            *slot = value;
            return Ok(());
        }
        cur = slot;
    }
    unreachable!("split yields at least one part")
}
