use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::encoder::params::{check_layers, shapes, LoraLayout, ParamKey, Slot};
use crate::encoder::{AffineSite, ViTConfig};
use crate::error::{invalid, Error, Result};

/// Which parameters a training run updates.
///
/// "Embed" always means the patch-projection weight and bias; the positional
/// embedding is only trained under [`TrainablePlan::All`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum TrainablePlan {
    None,
    Embed,
    EmbedMlps(Vec<usize>),
    EmbedBlocks(Vec<usize>),
    EmbedAllMlps,
    All,
    /// Patch projection plus low-rank adapters; adapted base maps are frozen.
    Lora(LoraLayout),
}

impl TrainablePlan {
    pub fn four_mlps() -> Self {
        TrainablePlan::EmbedMlps(vec![3, 6, 9, 12])
    }

    pub fn validate(&self, cfg: &ViTConfig) -> Result<()> {
        match self {
            TrainablePlan::EmbedMlps(l) | TrainablePlan::EmbedBlocks(l) => check_layers(l, cfg.depth),
            TrainablePlan::Lora(layout) => layout.validate(cfg.depth),
            _ => Ok(()),
        }
    }

    pub fn lora(&self) -> Option<&LoraLayout> {
        match self {
            TrainablePlan::Lora(l) => Some(l),
            _ => None,
        }
    }

    pub fn trains(&self, key: &ParamKey) -> bool {
        let in_block = |layers: &[usize]| key.block.is_some_and(|b| layers.contains(&b));
        let embed = key.slot == Slot::PatchEmbed;
        match self {
            TrainablePlan::None => false,
            TrainablePlan::Embed => embed,
            TrainablePlan::EmbedMlps(layers) => {
                embed || (in_block(layers) && matches!(key.slot, Slot::Affine(s) if s.is_mlp()))
            }
            TrainablePlan::EmbedBlocks(layers) => embed || in_block(layers),
            TrainablePlan::EmbedAllMlps => embed || matches!(key.slot, Slot::Affine(s) if s.is_mlp()),
            TrainablePlan::All => true,
            TrainablePlan::Lora(_) => embed || matches!(key.slot, Slot::Lora(_)),
        }
    }
}

/// Number of scalars `plan` marks trainable for `cfg`, including any adapters it adds.
pub fn count_trainable(cfg: &ViTConfig, plan: &TrainablePlan) -> Result<usize> {
    cfg.validate()?;
    plan.validate(cfg)?;
    let mut n = 0;
    shapes(cfg, plan.lora()).visit(|k, dims| {
        if plan.trains(k) {
            n += dims.iter().product::<usize>();
        }
    });
    Ok(n)
}

/// Parameter count of the plain encoder, no adapters.
pub fn count_total(cfg: &ViTConfig) -> Result<usize> {
    count_trainable(cfg, &TrainablePlan::All)
}

fn fmt_layers(l: &[usize]) -> String {
    l.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

impl fmt::Display for TrainablePlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainablePlan::None => write!(f, "none"),
            TrainablePlan::Embed => write!(f, "embed"),
            TrainablePlan::EmbedMlps(l) => write!(f, "embed+mlps:{}", fmt_layers(l)),
            TrainablePlan::EmbedBlocks(l) => write!(f, "embed+blocks:{}", fmt_layers(l)),
            TrainablePlan::EmbedAllMlps => write!(f, "embed+all-mlps"),
            TrainablePlan::All => write!(f, "all"),
            TrainablePlan::Lora(l) => {
                let sites: Vec<&str> = l.sites.iter().map(|s| s.name()).collect();
                write!(f, "lora:{}:{}:{}", l.rank, fmt_layers(&l.layers), sites.join(","))
            }
        }
    }
}

fn parse_layers(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<usize>()
                .map_err(|_| Error::InvalidArgument(format!("bad layer index `{t}`")))
        })
        .collect()
}

fn parse_range(s: &str) -> Result<Vec<usize>> {
    if let Some((a, b)) = s.split_once("..=") {
        let a: usize = a.parse().map_err(|_| Error::InvalidArgument(format!("bad range `{s}`")))?;
        let b: usize = b.parse().map_err(|_| Error::InvalidArgument(format!("bad range `{s}`")))?;
        return Ok((a..=b).collect());
    }
    parse_layers(s)
}

impl FromStr for TrainablePlan {
    type Err = Error;

    /// Accepts `none`, `embed`, `embed+mlps:3,6,9,12`, `embed+blocks:1..=4`,
    /// `embed+all-mlps`, `all`, and `lora:<rank>:<layers>:<sites>` where sites
    /// is a comma list of `qkv,proj,fc1,fc2` or one of `mlp`, `all`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        Ok(match s {
            "none" => TrainablePlan::None,
            "embed" => TrainablePlan::Embed,
            "embed+all-mlps" => TrainablePlan::EmbedAllMlps,
            "all" => TrainablePlan::All,
            _ => {
                if let Some(l) = s.strip_prefix("embed+mlps:") {
                    TrainablePlan::EmbedMlps(parse_range(l)?)
                } else if let Some(l) = s.strip_prefix("embed+blocks:") {
                    TrainablePlan::EmbedBlocks(parse_range(l)?)
                } else if let Some(rest) = s.strip_prefix("lora:") {
                    let parts: Vec<&str> = rest.split(':').collect();
                    if parts.len() != 3 {
                        return invalid(format!("lora plan needs rank:layers:sites, got `{s}`"));
                    }
                    let rank = parts[0]
                        .parse()
                        .map_err(|_| Error::InvalidArgument(format!("bad LoRA rank `{}`", parts[0])))?;
                    let layers = parse_range(parts[1])?;
                    let sites = match parts[2] {
                        "mlp" => AffineSite::MLP.to_vec(),
                        "all" => AffineSite::ALL.to_vec(),
                        list => list
                            .split(',')
                            .map(|t| match t.trim() {
                                "qkv" => Ok(AffineSite::Qkv),
                                "proj" => Ok(AffineSite::Proj),
                                "fc1" => Ok(AffineSite::Fc1),
                                "fc2" => Ok(AffineSite::Fc2),
                                other => invalid(format!("unknown LoRA site `{other}`")),
                            })
                            .collect::<Result<_>>()?,
                    };
                    TrainablePlan::Lora(LoraLayout { rank, layers, sites })
                } else {
                    return invalid(format!("unknown trainable plan `{s}`"));
                }
            }
        })
    }
}

impl TryFrom<String> for TrainablePlan {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<TrainablePlan> for String {
    fn from(p: TrainablePlan) -> String {
        p.to_string()
    }
}
