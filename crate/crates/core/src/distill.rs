//! Mixed-token student inputs and the significance-weighted multi-layer L1
//! objective.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{bind, embed_graph, encode_graph, patch_tokens, EmbeddingCapture, TrainablePlan, ViTParams};
use crate::error::{invalid, shape_err, Result};
use crate::numeric::{Graph, Tensor, Var};
pub use crate::significance::AttentionSource;
use crate::significance::{significance_single_layer, token_significance_horizon, TransitionStack};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    /// Regularized layers; 0 is the patch-embedding output.
    pub layers: Vec<usize>,
    /// One weight per entry of `layers`.
    pub gammas: Vec<f64>,
    pub beta: f64,
    pub mixing_ratio: f64,
    pub attention_source: AttentionSource,
    /// Truncate the rollout product after this many layers.
    pub rollout_horizon: Option<usize>,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            layers: vec![0, 3, 6, 9, 12],
            gammas: vec![1.0, 0.1, 0.4, 0.7, 1.0],
            beta: crate::significance::DEFAULT_BETA,
            mixing_ratio: 0.1,
            attention_source: AttentionSource::Teacher,
            rollout_horizon: None,
            seed: 0,
        }
    }
}

impl DistillConfig {
    /// Default weights with the four regularized blocks spaced evenly over `depth`.
    pub fn for_depth(depth: usize) -> Self {
        let mut layers = vec![0];
        layers.extend((1..=4).map(|q| (q * depth).div_ceil(4)));
        layers.dedup();
        let mut gammas = vec![1.0];
        gammas.extend_from_slice(&[0.1, 0.4, 0.7, 1.0][4 - (layers.len() - 1)..]);
        Self {
            layers,
            gammas,
            ..Self::default()
        }
    }

    pub fn validate(&self, depth: usize) -> Result<()> {
        if self.layers.is_empty() {
            return invalid("layer set is empty");
        }
        if self.layers.len() != self.gammas.len() {
            return invalid(format!(
                "{} layers but {} gammas",
                self.layers.len(),
                self.gammas.len()
            ));
        }
        for (i, &l) in self.layers.iter().enumerate() {
            if l > depth {
                return invalid(format!("layer {l} exceeds encoder depth {depth}"));
            }
            if self.layers[..i].contains(&l) {
                return invalid(format!("layer {l} listed twice"));
            }
        }
        if self.gammas.iter().any(|g| !g.is_finite() || *g < 0.0) {
            return invalid("gammas must be finite and nonnegative");
        }
        check_ratio(self.mixing_ratio)?;
        if !(0.0..=1.0).contains(&self.beta) {
            return invalid(format!("beta must lie in [0, 1], got {}", self.beta));
        }
        if self.rollout_horizon == Some(0) {
            return invalid("rollout horizon must be at least 1");
        }
        Ok(())
    }
}

fn check_ratio(rho: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&rho) {
        return invalid(format!("mixing ratio must lie in [0, 1], got {rho}"));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixedInput {
    pub tokens: Tensor,
    /// Sorted ascending.
    pub replaced_positions: Vec<usize>,
}

/// `round(ρ·k)` distinct positions drawn uniformly, sorted.
pub fn sample_positions<R: Rng + ?Sized>(k: usize, rho: f64, rng: &mut R) -> Result<Vec<usize>> {
    check_ratio(rho)?;
    let m = (rho * k as f64).round() as usize;
    let mut pos = index::sample(rng, k, m.min(k)).into_vec();
    pos.sort_unstable();
    Ok(pos)
}

pub(crate) fn position_flags(k: usize, positions: &[usize]) -> Vec<bool> {
    let mut flags = vec![false; k];
    for &p in positions {
        flags[p] = true;
    }
    flags
}

/// Swaps a seeded random subset of event tokens for the image tokens at the
/// same positions.
pub fn mix_tokens(event_tokens: &Tensor, image_tokens: &Tensor, rho: f64, seed: u64) -> Result<MixedInput> {
    if event_tokens.dims() != image_tokens.dims() || !event_tokens.is_matrix() {
        return shape_err(format!(
            "event tokens {:?} vs image tokens {:?}",
            event_tokens.dims(),
            image_tokens.dims()
        ));
    }
    let positions = sample_positions(event_tokens.rows(), rho, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let mut tokens = event_tokens.clone();
    for &p in &positions {
        tokens.row_mut(p).copy_from_slice(image_tokens.row(p));
    }
    Ok(MixedInput {
        tokens,
        replaced_positions: positions,
    })
}

/// `mean_{t,c} w_t · |x_M − x_E|`.
pub fn weighted_layer_loss(x_m: &Tensor, x_e: &Tensor, w: &[f64]) -> Result<f64> {
    Ok(weighted_layer_sum(x_m, x_e, w)? / x_m.len() as f64)
}

/// Unreduced `Σ_{t,c} w_t · |x_M − x_E|`.
pub fn weighted_layer_sum(x_m: &Tensor, x_e: &Tensor, w: &[f64]) -> Result<f64> {
    if x_m.dims() != x_e.dims() || !x_m.is_matrix() || w.len() != x_m.rows() {
        return shape_err(format!(
            "layer loss on {:?} vs {:?} with {} weights",
            x_m.dims(),
            x_e.dims(),
            w.len()
        ));
    }
    let mut total = 0.0;
    for (t, wt) in w.iter().enumerate() {
        let d: f64 = x_m.row(t).iter().zip(x_e.row(t)).map(|(a, b)| (a - b).abs()).sum();
        total += wt * d;
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerTerm {
    pub layer: usize,
    pub gamma: f64,
    /// Mean over `k·c`; this is what enters the total.
    pub mean: f64,
    pub sum: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillLoss {
    pub total: f64,
    pub terms: Vec<LayerTerm>,
}

fn check_captures(teacher: &EmbeddingCapture, depth: usize, student_dims: &[usize]) -> Result<()> {
    if teacher.depth() != depth {
        return shape_err(format!("teacher depth {} vs student depth {depth}", teacher.depth()));
    }
    if teacher.embeddings[0].dims() != student_dims {
        return shape_err(format!(
            "teacher tokens {:?} vs student tokens {student_dims:?}",
            teacher.embeddings[0].dims()
        ));
    }
    Ok(())
}

/// Per-token weights for layer `s`, computed from detached attention values.
pub fn layer_weights(
    teacher: &EmbeddingCapture,
    student_attn: &[Tensor],
    s: usize,
    cfg: &DistillConfig,
) -> Result<Vec<f64>> {
    let k = teacher.tokens();
    if s == 0 {
        return Ok(vec![1.0; k]);
    }
    let e = vec![1.0; k];
    let sig = match cfg.attention_source {
        AttentionSource::Uniform => return Ok(e),
        AttentionSource::Teacher => {
            let stack = TransitionStack::from_attention(&teacher.attentions)?;
            token_significance_horizon(&stack, s, cfg.beta, &e, cfg.rollout_horizon)?
        }
        AttentionSource::Student => {
            let stack = TransitionStack::from_attention(student_attn)?;
            token_significance_horizon(&stack, s, cfg.beta, &e, cfg.rollout_horizon)?
        }
        AttentionSource::TeacherSingleLayer => significance_single_layer(&teacher.attentions[s - 1], cfg.beta, &e)?,
    };
    Ok(sig.values)
}

/// Differentiable objective `Σ γ_i · weighted_layer_loss` against a constant
/// teacher capture. `student` holds the graph vars for `X⁽⁰⁾ … X⁽ⁿ⁾`.
pub fn distill_loss_graph(
    g: &mut Graph,
    teacher: &EmbeddingCapture,
    student: &[Var],
    student_attn: &[Tensor],
    cfg: &DistillConfig,
) -> Result<(Var, DistillLoss)> {
    let depth = student.len() - 1;
    cfg.validate(depth)?;
    check_captures(teacher, depth, g.value(student[0]).dims())?;
    let mut parts = Vec::with_capacity(cfg.layers.len());
    let mut terms = Vec::with_capacity(cfg.layers.len());
    for (&s, &gamma) in cfg.layers.iter().zip(&cfg.gammas) {
        let w = layer_weights(teacher, student_attn, s, cfg)?;
        let target = &teacher.embeddings[s];
        let v = g.weighted_abs_mean(student[s], target, &w)?;
        terms.push(LayerTerm {
            layer: s,
            gamma,
            mean: g.scalar(v),
            sum: weighted_layer_sum(g.value(student[s]), target, &w)?,
        });
        parts.push((v, gamma));
    }
    let total = g.weighted_sum(&parts);
    let loss = DistillLoss {
        total: g.scalar(total),
        terms,
    };
    Ok((total, loss))
}

/// Value-only objective.
pub fn distill_loss(teacher: &EmbeddingCapture, student: &EmbeddingCapture, cfg: &DistillConfig) -> Result<DistillLoss> {
    let mut g = Graph::new();
    let vars: Vec<Var> = student.embeddings.iter().map(|t| g.constant(t.clone())).collect();
    distill_loss_graph(&mut g, teacher, &vars, &student.attentions, cfg).map(|(_, l)| l)
}

/// Result of [`student_pass`].
pub struct StudentPass {
    pub loss: Var,
    pub breakdown: DistillLoss,
    pub weights: crate::encoder::ViTWeights<Var>,
    pub max_abs_embedding: f64,
}

/// Student side of one training sample: embed the event input, swap in
/// detached image tokens at `positions`, run the encoder and score it.
#[allow(clippy::too_many_arguments)]
pub fn student_pass(
    g: &mut Graph,
    student: &ViTParams,
    plan: &TrainablePlan,
    teacher: &EmbeddingCapture,
    event_input: &Tensor,
    image_input: &Tensor,
    positions: &[usize],
    cfg: &DistillConfig,
) -> Result<StudentPass> {
    let image_tokens = if positions.is_empty() {
        None
    } else {
        Some(patch_tokens(student, image_input)?)
    };
    student_pass_with_tokens(g, student, plan, teacher, event_input, image_tokens.as_ref(), positions, cfg)
}

/// As [`student_pass`] with the image tokens supplied, e.g. held fixed while
/// probing gradients numerically.
#[allow(clippy::too_many_arguments)]
pub fn student_pass_with_tokens(
    g: &mut Graph,
    student: &ViTParams,
    plan: &TrainablePlan,
    teacher: &EmbeddingCapture,
    event_input: &Tensor,
    image_tokens: Option<&Tensor>,
    positions: &[usize],
    cfg: &DistillConfig,
) -> Result<StudentPass> {
    let config = &student.config;
    let w = bind(g, student, plan);
    let mut x0 = embed_graph(g, config, &w, event_input)?;
    if !positions.is_empty() {
        let Some(tokens) = image_tokens else {
            return invalid("mixing positions given without image tokens");
        };
        let flags = position_flags(config.tokens(), positions);
        x0 = g.replace_rows(x0, tokens, &flags)?;
    }
    let cap = encode_graph(g, config, &w, x0)?;
    let max_abs_embedding = cap
        .embeddings
        .iter()
        .map(|v| g.value(*v).max_abs())
        .fold(0.0, f64::max);
    let (loss, breakdown) = distill_loss_graph(g, teacher, &cap.embeddings, &cap.attentions, cfg)?;
    Ok(StudentPass {
        loss,
        breakdown,
        weights: w,
        max_abs_embedding,
    })
}

fn gram(g: &mut Graph, x: Var) -> Result<Var> {
    let n = g.row_l2_normalize(x);
    let nt = g.transpose(n);
    g.matmul(n, nt)
}

fn gram_value(x: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let out = gram(&mut g, v)?;
    Ok(g.value(out).clone())
}

/// Affinity-graph comparator: per layer, the mean squared difference between
/// the cosine-similarity matrices of teacher and student tokens, summed.
pub fn affinity_loss_graph(g: &mut Graph, teacher: &EmbeddingCapture, student: &[Var], layers: &[usize]) -> Result<Var> {
    let mut parts = Vec::with_capacity(layers.len());
    for &s in layers {
        if s >= student.len() || s >= teacher.embeddings.len() {
            return invalid(format!("layer {s} not captured"));
        }
        let target = gram_value(&teacher.embeddings[s])?;
        let gs = gram(g, student[s])?;
        parts.push((g.squared_error_mean(gs, &target)?, 1.0));
    }
    Ok(g.weighted_sum(&parts))
}

pub fn affinity_loss(teacher: &EmbeddingCapture, student: &EmbeddingCapture, layers: &[usize]) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = student.embeddings.iter().map(|t| g.constant(t.clone())).collect();
    let v = affinity_loss_graph(&mut g, teacher, &vars, layers)?;
    Ok(g.scalar(v))
}
