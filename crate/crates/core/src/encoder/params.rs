//! Parameter tree of the encoder, generic over what each leaf holds.
//!
//! The same layout carries tensors ([`ViTParams`]), graph handles during a
//! differentiable forward pass, and bare shapes for parameter counting.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::encoder::ViTConfig;
use crate::error::{invalid, shape_err, Result};
use crate::numeric::Tensor;

/// Affine maps inside a block that may carry a low-rank adapter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AffineSite {
    Qkv,
    Proj,
    Fc1,
    Fc2,
}

impl AffineSite {
    pub const ALL: [AffineSite; 4] = [AffineSite::Qkv, AffineSite::Proj, AffineSite::Fc1, AffineSite::Fc2];
    pub const MLP: [AffineSite; 2] = [AffineSite::Fc1, AffineSite::Fc2];

    pub fn name(self) -> &'static str {
        match self {
            AffineSite::Qkv => "qkv",
            AffineSite::Proj => "proj",
            AffineSite::Fc1 => "fc1",
            AffineSite::Fc2 => "fc2",
        }
    }

    pub fn is_mlp(self) -> bool {
        matches!(self, AffineSite::Fc1 | AffineSite::Fc2)
    }

    /// `(in, out)` feature sizes of the map.
    pub fn io(self, cfg: &ViTConfig) -> (usize, usize) {
        let c = cfg.embed_dim;
        match self {
            AffineSite::Qkv => (c, 3 * c),
            AffineSite::Proj => (c, c),
            AffineSite::Fc1 => (c, cfg.mlp_hidden),
            AffineSite::Fc2 => (cfg.mlp_hidden, c),
        }
    }
}

/// Where a parameter sits in the encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    PatchEmbed,
    PosEmbed,
    Norm1,
    Norm2,
    Affine(AffineSite),
    Lora(AffineSite),
}

/// Identity of one parameter tensor, passed to visitors.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamKey {
    pub name: String,
    /// 1-based block index; `None` for embedding parameters.
    pub block: Option<usize>,
    pub slot: Slot,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    /// `in × out`, applied as `x · W`.
    pub weight: T,
    pub bias: T,
}

/// Low-rank adapter; contributes `x · Aᵀ · Bᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraPair<T> {
    /// `r × in`.
    pub a: T,
    /// `out × r`.
    pub b: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedLinear<T> {
    pub base: Linear<T>,
    pub lora: Option<LoraPair<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Norm<T> {
    pub gamma: T,
    pub beta: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block<T> {
    pub norm1: Norm<T>,
    pub qkv: AdaptedLinear<T>,
    pub proj: AdaptedLinear<T>,
    pub norm2: Norm<T>,
    pub fc1: AdaptedLinear<T>,
    pub fc2: AdaptedLinear<T>,
}

impl<T> Block<T> {
    pub fn site(&self, site: AffineSite) -> &AdaptedLinear<T> {
        match site {
            AffineSite::Qkv => &self.qkv,
            AffineSite::Proj => &self.proj,
            AffineSite::Fc1 => &self.fc1,
            AffineSite::Fc2 => &self.fc2,
        }
    }

    pub fn site_mut(&mut self, site: AffineSite) -> &mut AdaptedLinear<T> {
        match site {
            AffineSite::Qkv => &mut self.qkv,
            AffineSite::Proj => &mut self.proj,
            AffineSite::Fc1 => &mut self.fc1,
            AffineSite::Fc2 => &mut self.fc2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViTWeights<T> {
    pub patch_embed: Linear<T>,
    /// `k × c`.
    pub pos_embed: T,
    pub blocks: Vec<Block<T>>,
}

fn key(name: String, block: Option<usize>, slot: Slot) -> ParamKey {
    ParamKey { name, block, slot }
}

impl<T> ViTWeights<T> {
    /// Visits every leaf in a fixed order.
    pub fn visit<'a>(&'a self, mut f: impl FnMut(&ParamKey, &'a T)) {
        f(&key("patch_embed.weight".into(), None, Slot::PatchEmbed), &self.patch_embed.weight);
        f(&key("patch_embed.bias".into(), None, Slot::PatchEmbed), &self.patch_embed.bias);
        f(&key("pos_embed".into(), None, Slot::PosEmbed), &self.pos_embed);
        for (i, b) in self.blocks.iter().enumerate() {
            let n = i + 1;
            let blk = Some(n);
            f(&key(format!("block.{n}.norm1.gamma"), blk, Slot::Norm1), &b.norm1.gamma);
            f(&key(format!("block.{n}.norm1.beta"), blk, Slot::Norm1), &b.norm1.beta);
            for site in [AffineSite::Qkv, AffineSite::Proj] {
                visit_affine(n, site, b.site(site), &mut f);
            }
            f(&key(format!("block.{n}.norm2.gamma"), blk, Slot::Norm2), &b.norm2.gamma);
            f(&key(format!("block.{n}.norm2.beta"), blk, Slot::Norm2), &b.norm2.beta);
            for site in AffineSite::MLP {
                visit_affine(n, site, b.site(site), &mut f);
            }
        }
    }

    /// Mutable counterpart of [`visit`](Self::visit), same order.
    pub fn visit_mut(&mut self, mut f: impl FnMut(&ParamKey, &mut T)) {
        f(&key("patch_embed.weight".into(), None, Slot::PatchEmbed), &mut self.patch_embed.weight);
        f(&key("patch_embed.bias".into(), None, Slot::PatchEmbed), &mut self.patch_embed.bias);
        f(&key("pos_embed".into(), None, Slot::PosEmbed), &mut self.pos_embed);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let n = i + 1;
            let blk = Some(n);
            f(&key(format!("block.{n}.norm1.gamma"), blk, Slot::Norm1), &mut b.norm1.gamma);
            f(&key(format!("block.{n}.norm1.beta"), blk, Slot::Norm1), &mut b.norm1.beta);
            for site in [AffineSite::Qkv, AffineSite::Proj] {
                visit_affine_mut(n, site, b.site_mut(site), &mut f);
            }
            f(&key(format!("block.{n}.norm2.gamma"), blk, Slot::Norm2), &mut b.norm2.gamma);
            f(&key(format!("block.{n}.norm2.beta"), blk, Slot::Norm2), &mut b.norm2.beta);
            for site in AffineSite::MLP {
                visit_affine_mut(n, site, b.site_mut(site), &mut f);
            }
        }
    }

    /// Rebuilds the tree with `f` applied to every leaf, in visiting order.
    pub fn map<U>(&self, mut f: impl FnMut(&ParamKey, &T) -> U) -> ViTWeights<U> {
        let mut g = |name: String, block: Option<usize>, slot: Slot, v: &T| f(&key(name, block, slot), v);
        let patch_embed = Linear {
            weight: g("patch_embed.weight".into(), None, Slot::PatchEmbed, &self.patch_embed.weight),
            bias: g("patch_embed.bias".into(), None, Slot::PatchEmbed, &self.patch_embed.bias),
        };
        let pos_embed = g("pos_embed".into(), None, Slot::PosEmbed, &self.pos_embed);
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for (i, b) in self.blocks.iter().enumerate() {
            let n = i + 1;
            let blk = Some(n);
            let norm1 = Norm {
                gamma: g(format!("block.{n}.norm1.gamma"), blk, Slot::Norm1, &b.norm1.gamma),
                beta: g(format!("block.{n}.norm1.beta"), blk, Slot::Norm1, &b.norm1.beta),
            };
            let qkv = map_affine(n, AffineSite::Qkv, &b.qkv, &mut g);
            let proj = map_affine(n, AffineSite::Proj, &b.proj, &mut g);
            let norm2 = Norm {
                gamma: g(format!("block.{n}.norm2.gamma"), blk, Slot::Norm2, &b.norm2.gamma),
                beta: g(format!("block.{n}.norm2.beta"), blk, Slot::Norm2, &b.norm2.beta),
            };
            let fc1 = map_affine(n, AffineSite::Fc1, &b.fc1, &mut g);
            let fc2 = map_affine(n, AffineSite::Fc2, &b.fc2, &mut g);
            blocks.push(Block {
                norm1,
                qkv,
                proj,
                norm2,
                fc1,
                fc2,
            });
        }
        ViTWeights {
            patch_embed,
            pos_embed,
            blocks,
        }
    }
}

fn map_affine<T, U>(
    n: usize,
    site: AffineSite,
    a: &AdaptedLinear<T>,
    g: &mut impl FnMut(String, Option<usize>, Slot, &T) -> U,
) -> AdaptedLinear<U> {
    let p = format!("block.{n}.{}", site.name());
    let blk = Some(n);
    AdaptedLinear {
        base: Linear {
            weight: g(format!("{p}.weight"), blk, Slot::Affine(site), &a.base.weight),
            bias: g(format!("{p}.bias"), blk, Slot::Affine(site), &a.base.bias),
        },
        lora: a.lora.as_ref().map(|l| LoraPair {
            a: g(format!("{p}.lora_a"), blk, Slot::Lora(site), &l.a),
            b: g(format!("{p}.lora_b"), blk, Slot::Lora(site), &l.b),
        }),
    }
}

fn visit_affine<'a, T>(n: usize, site: AffineSite, a: &'a AdaptedLinear<T>, f: &mut impl FnMut(&ParamKey, &'a T)) {
    let p = format!("block.{n}.{}", site.name());
    f(&key(format!("{p}.weight"), Some(n), Slot::Affine(site)), &a.base.weight);
    f(&key(format!("{p}.bias"), Some(n), Slot::Affine(site)), &a.base.bias);
    if let Some(l) = &a.lora {
        f(&key(format!("{p}.lora_a"), Some(n), Slot::Lora(site)), &l.a);
        f(&key(format!("{p}.lora_b"), Some(n), Slot::Lora(site)), &l.b);
    }
}

fn visit_affine_mut<T>(n: usize, site: AffineSite, a: &mut AdaptedLinear<T>, f: &mut impl FnMut(&ParamKey, &mut T)) {
    let p = format!("block.{n}.{}", site.name());
    f(&key(format!("{p}.weight"), Some(n), Slot::Affine(site)), &mut a.base.weight);
    f(&key(format!("{p}.bias"), Some(n), Slot::Affine(site)), &mut a.base.bias);
    if let Some(l) = &mut a.lora {
        f(&key(format!("{p}.lora_a"), Some(n), Slot::Lora(site)), &mut l.a);
        f(&key(format!("{p}.lora_b"), Some(n), Slot::Lora(site)), &mut l.b);
    }
}

/// Where low-rank adapters are attached.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoraLayout {
    pub rank: usize,
    /// 1-based block indices.
    pub layers: Vec<usize>,
    pub sites: Vec<AffineSite>,
}

impl LoraLayout {
    pub fn validate(&self, depth: usize) -> Result<()> {
        if self.rank == 0 {
            return invalid("LoRA rank must be at least 1");
        }
        if self.sites.is_empty() || self.layers.is_empty() {
            return invalid("LoRA needs at least one layer and one site");
        }
        check_layers(&self.layers, depth)
    }

    pub fn covers(&self, block: usize, site: AffineSite) -> bool {
        self.layers.contains(&block) && self.sites.contains(&site)
    }
}

pub(crate) fn check_layers(layers: &[usize], depth: usize) -> Result<()> {
    match layers.iter().find(|&&l| l == 0 || l > depth) {
        Some(l) => invalid(format!("layer {l} outside 1..={depth}")),
        None => Ok(()),
    }
}

/// Tensor shapes of every parameter for `cfg`, with adapters per `lora`.
pub fn shapes(cfg: &ViTConfig, lora: Option<&LoraLayout>) -> ViTWeights<Vec<usize>> {
    let c = cfg.embed_dim;
    let affine = |block: usize, site: AffineSite| {
        let (i, o) = site.io(cfg);
        AdaptedLinear {
            base: Linear {
                weight: vec![i, o],
                bias: vec![o],
            },
            lora: lora.filter(|l| l.covers(block, site)).map(|l| LoraPair {
                a: vec![l.rank, i],
                b: vec![o, l.rank],
            }),
        }
    };
    let norm = || Norm {
        gamma: vec![c],
        beta: vec![c],
    };
    ViTWeights {
        patch_embed: Linear {
            weight: vec![cfg.patch_dim(), c],
            bias: vec![c],
        },
        pos_embed: vec![cfg.tokens(), c],
        blocks: (1..=cfg.depth)
            .map(|n| Block {
                norm1: norm(),
                qkv: affine(n, AffineSite::Qkv),
                proj: affine(n, AffineSite::Proj),
                norm2: norm(),
                fc1: affine(n, AffineSite::Fc1),
                fc2: affine(n, AffineSite::Fc2),
            })
            .collect(),
    }
}

/// Encoder weights together with the shape they were built for.
#[derive(Debug, Clone, PartialEq)]
pub struct ViTParams {
    pub config: ViTConfig,
    pub weights: ViTWeights<Tensor>,
}

/// Standard deviation of the learned positional embedding at init.
const POS_EMBED_STD: f64 = 0.1;
/// Standard deviation of adapter `A` matrices at init.
pub(crate) const LORA_A_STD: f64 = 0.01;

impl ViTParams {
    /// Random init from `seed`: affine weights `N(0, 1/fan_in)`, zero biases,
    /// unit layer-norm gains.
    pub fn init(config: ViTConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = shapes(&config, None).map(|k, dims| match k.slot {
            Slot::Norm1 | Slot::Norm2 if k.name.ends_with("gamma") => Tensor::ones(dims),
            Slot::PosEmbed => normal(&mut rng, dims, POS_EMBED_STD),
            _ if dims.len() == 2 => normal(&mut rng, dims, 1.0 / (dims[0] as f64).sqrt()),
            _ => Tensor::zeros(dims),
        });
        Ok(Self { config, weights })
    }

    /// Every parameter by name, in visiting order.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.weights.visit(|k, t| out.push((k.name.clone(), t)));
        out
    }

    pub fn total_params(&self) -> usize {
        let mut n = 0;
        self.weights.visit(|_, t| n += t.len());
        n
    }

    pub fn lora_layout(&self) -> Option<LoraLayout> {
        let mut rank = None;
        let mut layers = Vec::new();
        let mut sites = Vec::new();
        for (i, b) in self.weights.blocks.iter().enumerate() {
            for site in AffineSite::ALL {
                if let Some(l) = &b.site(site).lora {
                    rank = Some(l.a.dims()[0]);
                    if !layers.contains(&(i + 1)) {
                        layers.push(i + 1);
                    }
                    if !sites.contains(&site) {
                        sites.push(site);
                    }
                }
            }
        }
        sites.sort();
        rank.map(|rank| LoraLayout { rank, layers, sites })
    }

    /// Replaces every tensor by the entry of the same name in `lookup`, checking shapes.
    pub fn load_named(&mut self, mut lookup: impl FnMut(&str) -> Option<Tensor>) -> Result<()> {
        let mut err = None;
        self.weights.visit_mut(|k, t| {
            if err.is_some() {
                return;
            }
            match lookup(&k.name) {
                Some(v) if v.dims() == t.dims() => *t = v,
                Some(v) => {
                    err = Some(format!("{}: expected {:?}, found {:?}", k.name, t.dims(), v.dims()))
                }
                None => err = Some(format!("missing tensor {}", k.name)),
            }
        });
        match err {
            Some(e) => shape_err(e),
            None => Ok(()),
        }
    }
}

pub(crate) fn normal(rng: &mut ChaCha8Rng, dims: &[usize], std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("positive std");
    let n = dims.iter().product();
    let data = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::from_vec(dims, data).expect("finite samples")
}
