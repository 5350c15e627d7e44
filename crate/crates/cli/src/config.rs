use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use evdistill::encoder::ViTConfig;
use evdistill::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

/// Everything a run needs. A file only lists what differs from its profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub profile: Profile,
    pub teacher_seed: u64,
    pub model: ViTConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
    pub output: OutputConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// 32×32 input, four blocks, 200 steps.
    Tiny,
    /// ViT-B at 512×512 with the full schedule.
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Directory of sample folders; synthetic scenes are generated when absent.
    pub dir: Option<PathBuf>,
    pub synth_samples: usize,
    pub synth_shapes: usize,
    pub synth_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Ridge penalty of the mask head fitted after training.
    pub ridge: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl RunConfig {
    pub fn profile(profile: Profile) -> Self {
        let (model, train) = match profile {
            Profile::Tiny => (ViTConfig::tiny(), TrainConfig::tiny()),
            Profile::Full => (ViTConfig::vit_b(), TrainConfig::default()),
        };
        Self {
            profile,
            teacher_seed: 0,
            model,
            train,
            data: DataConfig {
                dir: None,
                synth_samples: 8,
                synth_shapes: 2,
                synth_seed: 0,
            },
            eval: EvalConfig {
                ridge: 1e-3,
            },
            output: OutputConfig {
                dir: PathBuf::from("runs/latest"),
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate(&self.model)?;
        if self.data.dir.is_none() && self.data.synth_samples == 0 {
            bail!("data: set `dir` or a positive `synth_samples`");
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Parses `text` over the defaults of its `profile` (tiny when unset).
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let user: toml::Table = toml::from_str(text)?;
    let profile = match user.get("profile") {
        None => Profile::Tiny,
        Some(v) => Profile::deserialize(v.clone()).context("profile must be `tiny` or `full`")?,
    };
    let mut merged = toml::Value::try_from(RunConfig::profile(profile))?;
    merge(&mut merged, toml::Value::Table(user));
    let cfg = RunConfig::deserialize(merged)?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    parse_config(&text).with_context(|| format!("invalid config {}", path.display()))
}
