//! Experiment configuration.
//!
//! A config is TOML. Built-in presets (`smoke`, `desk`, `paper`) exist per
//! environment; a user file is deep-merged over the chosen preset, so it
//! only needs the keys it changes. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cnp::CnpConfig;
use crate::envs::EnvKind;
use crate::metatest::RealBudget;
use crate::norml::NormlConfig;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("unknown preset {0:?} (expected smoke, desk or paper)")]
    UnknownPreset(String),
    #[error("config version {found} is not supported (expected {CONFIG_VERSION})")]
    Version { found: u32 },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Parse(#[from] toml::de::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Smoke,
    Desk,
    Paper,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::Smoke => "smoke",
            Preset::Desk => "desk",
            Preset::Paper => "paper",
        }
    }
}

impl std::str::FromStr for Preset {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "smoke" => Ok(Preset::Smoke),
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            other => Err(ConfigError::UnknownPreset(other.to_string())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetaTrainSettings {
    pub iterations: usize,
    /// Decay the outer learning rate linearly over the run.
    pub lr_decay: bool,
    /// Fraction of final iterations whose transitions form the offline dataset.
    pub retain_fraction: f64,
    /// Write the meta checkpoint every this many iterations (0: only at the end).
    pub checkpoint_every: usize,
}

/// Which adaptation recipe an arm uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArmKind {
    /// Real data plus rollouts generated by the plain dynamics model.
    Umcnp,
    /// Real data plus rollouts generated by the advantage-variant model.
    UmcnpAdv,
    /// Real data only.
    Norml,
    /// Zero-mean unit-variance Gaussian actions, no adaptation.
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArmConfig {
    pub name: String,
    pub kind: ArmKind,
    /// Whole real rollouts used for adaptation.
    #[serde(default)]
    pub real_rollouts: Option<usize>,
    /// Leading real transitions of one rollout used for adaptation.
    #[serde(default)]
    pub real_transitions: Option<usize>,
    #[serde(default)]
    pub generated_rollouts: usize,
}

impl ArmConfig {
    pub fn real_budget(&self) -> RealBudget {
        match (self.real_rollouts, self.real_transitions) {
            (_, Some(n)) => RealBudget::Transitions(n),
            (Some(n), None) => RealBudget::Rollouts(n),
            (None, None) => RealBudget::Rollouts(1),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetaTestSettings {
    pub arms: Vec<ArmConfig>,
    /// Independent adaptation trials per (seed, task).
    pub trials: usize,
    /// Mean-action evaluation episodes per adapted policy.
    pub eval_episodes: usize,
    /// Sample generated next states instead of using the predicted mean.
    pub sample_next_state: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub env: EnvKind,
    pub preset: Preset,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    /// Worker threads; 0 lets the pool decide.
    pub threads: usize,
    pub meta_train: MetaTrainSettings,
    pub norml: NormlConfig,
    pub cnp: CnpConfig,
    pub meta_test: MetaTestSettings,
}

const POINT_DESK: &str = r#"
version = 1
env = "point"
preset = "desk"
seeds = [0, 1, 2]
out_dir = "runs/point-desk"
threads = 0

[meta_train]
iterations = 500
lr_decay = true
retain_fraction = 0.1
checkpoint_every = 50

[norml]
alpha = 0.01
outer_lr = 3e-4
tasks_per_iteration = 10
train_rollouts = 25
test_rollouts = 25
ppo_epochs = 5
ppo_clip = 0.2
gamma = 0.99
policy_hidden = [32, 32]
advantage_hidden = [64, 64]
init_log_std = 0.0

[cnp]
latent_dim = 128
hidden = [128, 128]
learning_rate = 3e-3
final_lr_fraction = 0.05
iterations = 20000
batch_tasks = 32
context_size = 10
target_size = 10
sigma_floor = 1e-4
smoothing_window = 100

[meta_test]
trials = 3
eval_episodes = 1
sample_next_state = false
arms = [
  { name = "UMCNP", kind = "umcnp", real_rollouts = 1, generated_rollouts = 24 },
  { name = "NORML", kind = "norml", real_rollouts = 1 },
  { name = "ORACLE", kind = "norml", real_rollouts = 25 },
  { name = "UMCNP-ADV", kind = "umcnp_adv", real_rollouts = 1, generated_rollouts = 24 },
  { name = "RANDOM", kind = "random" },
]
"#;

const CARTPOLE_DESK: &str = r#"
version = 1
env = "cartpole"
preset = "desk"
seeds = [0, 1, 2]
out_dir = "runs/cartpole-desk"
threads = 0

[meta_train]
iterations = 150
lr_decay = true
retain_fraction = 0.1
checkpoint_every = 25

[norml]
alpha = 0.01
outer_lr = 3e-4
tasks_per_iteration = 5
train_rollouts = 5
test_rollouts = 5
ppo_epochs = 5
ppo_clip = 0.2
gamma = 0.99
policy_hidden = [32, 32]
advantage_hidden = [64, 64]
init_log_std = 0.0

[cnp]
latent_dim = 128
hidden = [128, 128]
learning_rate = 3e-3
final_lr_fraction = 0.05
iterations = 20000
batch_tasks = 32
context_size = 50
target_size = 50
sigma_floor = 1e-4
smoothing_window = 100

[meta_test]
trials = 1
eval_episodes = 3
sample_next_state = false
# The inner step sums over transitions, so real plus generated rollouts
# match the 5 train rollouts the step size was meta-trained on.
arms = [
  { name = "5N UMCNP", kind = "umcnp", real_transitions = 5, generated_rollouts = 4 },
  { name = "5N NORML", kind = "norml", real_transitions = 5 },
  { name = "50N UMCNP", kind = "umcnp", real_transitions = 50, generated_rollouts = 4 },
  { name = "50N NORML", kind = "norml", real_transitions = 50 },
  { name = "RANDOM", kind = "random" },
]
"#;

/// Overrides that turn a desk preset into the smoke preset.
const SMOKE_OVERRIDES: &str = r#"
preset = "smoke"
seeds = [0]
[meta_train]
iterations = 3
checkpoint_every = 0
retain_fraction = 1.0
[norml]
tasks_per_iteration = 2
train_rollouts = 2
test_rollouts = 2
ppo_epochs = 2
[cnp]
latent_dim = 16
hidden = [16, 16]
iterations = 20
batch_tasks = 4
[meta_test]
trials = 1
eval_episodes = 1
"#;

/// Full-scale settings: five seeds and the long dynamics-model schedule.
const PAPER_OVERRIDES: &str = r#"
preset = "paper"
seeds = [0, 1, 2, 3, 4]
[meta_train]
iterations = 2000
[cnp]
learning_rate = 1e-4
final_lr_fraction = 1.0
iterations = 500000
context_size = 50
target_size = 50
[meta_test]
trials = 5
"#;

fn preset_value(env: EnvKind, preset: Preset) -> toml::Value {
    let base = match env {
        EnvKind::Point => POINT_DESK,
        EnvKind::Cartpole => CARTPOLE_DESK,
    };
    let mut v: toml::Value = toml::from_str(base).expect("built-in preset parses");
    let overrides = match preset {
        Preset::Desk => None,
        Preset::Smoke => Some(SMOKE_OVERRIDES),
        Preset::Paper => Some(PAPER_OVERRIDES),
    };
    if let Some(o) = overrides {
        merge(&mut v, toml::from_str(o).expect("built-in override parses"));
    }
    if preset != Preset::Desk {
        let out = format!("runs/{}-{}", env.name(), preset.name());
        merge(&mut v, toml::Value::Table(toml::toml! { out_dir = out }));
    }
    v
}

/// Deep merge: tables merge key by key, anything else is replaced.
pub fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(existing) => merge(existing, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

impl ExperimentConfig {
    pub fn preset(env: EnvKind, preset: Preset) -> Self {
        let cfg: ExperimentConfig = preset_value(env, preset).try_into().expect("built-in preset is valid");
        cfg.validate().expect("built-in preset is valid");
        cfg
    }

    /// Preset merged with user TOML text. The user text may change `env`,
    /// in which case that environment's preset is used as the base.
    pub fn from_toml_over_preset(user: &str, default_env: EnvKind, preset: Preset) -> Result<Self, ConfigError> {
        let user: toml::Value = toml::from_str(user)?;
        let env = match user.get("env").and_then(toml::Value::as_str) {
            Some("point") => EnvKind::Point,
            Some("cartpole") => EnvKind::Cartpole,
            Some(other) => return Err(ConfigError::Invalid(format!("unknown env {other:?}"))),
            None => default_env,
        };
        let preset = match user.get("preset").and_then(toml::Value::as_str) {
            Some(p) => p.parse()?,
            None => preset,
        };
        let mut v = preset_value(env, preset);
        merge(&mut v, user);
        let cfg: ExperimentConfig = v.try_into()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, default_env: EnvKind, preset: Preset) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_over_preset(&text, default_env, preset)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.version != CONFIG_VERSION {
            return Err(ConfigError::Version { found: self.version });
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        self.norml.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.cnp.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if !(self.norml.outer_lr > 0.0) || !(self.norml.alpha > 0.0) {
            return bad("learning rates must be positive".into());
        }
        let mt = &self.meta_train;
        if mt.iterations == 0 {
            return bad("meta_train.iterations must be positive".into());
        }
        if !(mt.retain_fraction > 0.0 && mt.retain_fraction <= 1.0) {
            return bad(format!("meta_train.retain_fraction {} is outside (0, 1]", mt.retain_fraction));
        }
        let te = &self.meta_test;
        if te.arms.is_empty() || te.trials == 0 || te.eval_episodes == 0 {
            return bad("meta_test needs arms, trials and evaluation episodes".into());
        }
        let mut names = std::collections::HashSet::new();
        for arm in &te.arms {
            if !names.insert(arm.name.as_str()) {
                return bad(format!("duplicate arm name {:?}", arm.name));
            }
            if arm.real_rollouts.is_some() && arm.real_transitions.is_some() {
                return bad(format!("arm {:?} sets both real_rollouts and real_transitions", arm.name));
            }
            match arm.real_budget() {
                RealBudget::Rollouts(0) | RealBudget::Transitions(0) => {
                    return bad(format!("arm {:?} needs real data", arm.name));
                }
                RealBudget::Transitions(n) if n > self.env.horizon() => {
                    return bad(format!("arm {:?} asks for {n} transitions, horizon is {}", arm.name, self.env.horizon()));
                }
                _ => {}
            }
            let generative = matches!(arm.kind, ArmKind::Umcnp | ArmKind::UmcnpAdv);
            if generative != (arm.generated_rollouts > 0) {
                return bad(format!("arm {:?}: generated_rollouts must be positive exactly for model arms", arm.name));
            }
        }
        Ok(())
    }

    /// Whether any arm needs the advantage-variant model.
    pub fn needs_adv_model(&self) -> bool {
        self.meta_test.arms.iter().any(|a| a.kind == ArmKind::UmcnpAdv)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
