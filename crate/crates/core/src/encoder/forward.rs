use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoder::params::{normal, LORA_A_STD, AdaptedLinear, LoraLayout, LoraPair, Norm, ViTWeights};
use crate::encoder::{AffineSite, TrainablePlan, ViTConfig, ViTParams};
use crate::error::{invalid, shape_err, Error, Result};
use crate::numeric::{Graph, Tensor, Var};

/// Per-layer token embeddings and head-averaged attention of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingCapture {
    /// `X^(0) … X^(n)`, each `k × c`; index 0 is the patch-embedding output.
    pub embeddings: Vec<Tensor>,
    /// `A^(1) … A^(n)`, each `k × k` and row-stochastic (rows are queries).
    pub attentions: Vec<Tensor>,
}

impl EmbeddingCapture {
    pub fn depth(&self) -> usize {
        self.attentions.len()
    }

    pub fn tokens(&self) -> usize {
        self.embeddings[0].rows()
    }
}

/// Differentiable counterpart of [`EmbeddingCapture`].
#[derive(Debug, Clone)]
pub struct GraphCapture {
    pub embeddings: Vec<Var>,
    pub attentions: Vec<Tensor>,
}

impl GraphCapture {
    pub fn values(&self, g: &Graph) -> EmbeddingCapture {
        EmbeddingCapture {
            embeddings: self.embeddings.iter().map(|v| g.value(*v).clone()).collect(),
            attentions: self.attentions.clone(),
        }
    }
}

/// Splits an `H × W × C` image into `k` row-major patch vectors of length `p²·C`.
pub fn patchify(cfg: &ViTConfig, image: &Tensor) -> Result<Tensor> {
    let expected = [cfg.img_size, cfg.img_size, cfg.in_channels];
    if image.dims() != expected {
        return shape_err(format!("input {:?}, encoder expects {expected:?}", image.dims()));
    }
    if !image.is_finite() {
        return Err(Error::NonFinite("encoder input".into()));
    }
    let (p, ch, size, grid) = (cfg.patch_size, cfg.in_channels, cfg.img_size, cfg.grid());
    let src = image.data();
    let mut out = Vec::with_capacity(cfg.tokens() * cfg.patch_dim());
    for gy in 0..grid {
        for gx in 0..grid {
            for py in 0..p {
                let y = gy * p + py;
                let start = (y * size + gx * p) * ch;
                out.extend_from_slice(&src[start..start + p * ch]);
            }
        }
    }
    Tensor::from_vec(&[cfg.tokens(), cfg.patch_dim()], out)
}

/// Puts every parameter on `g`; only those `plan` trains become gradient leaves.
pub fn bind(g: &mut Graph, params: &ViTParams, plan: &TrainablePlan) -> ViTWeights<Var> {
    params.weights.map(|k, t| g.leaf(t.clone(), plan.trains(k)))
}

fn affine(g: &mut Graph, x: Var, a: &AdaptedLinear<Var>) -> Result<Var> {
    let y = g.matmul(x, a.base.weight)?;
    let mut y = g.add_row(y, a.base.bias)?;
    if let Some(LoraPair { a: la, b: lb }) = &a.lora {
        let at = g.transpose(*la);
        let bt = g.transpose(*lb);
        let low = g.matmul(x, at)?;
        let delta = g.matmul(low, bt)?;
        y = g.add(y, delta)?;
    }
    Ok(y)
}

fn norm(g: &mut Graph, x: Var, n: &Norm<Var>) -> Result<Var> {
    g.layer_norm(x, n.gamma, n.beta)
}

/// Patch projection plus positional embedding: `X^(0)`.
pub fn embed_graph(g: &mut Graph, cfg: &ViTConfig, w: &ViTWeights<Var>, image: &Tensor) -> Result<Var> {
    let patches = g.constant(patchify(cfg, image)?);
    let x = g.matmul(patches, w.patch_embed.weight)?;
    let x = g.add_row(x, w.patch_embed.bias)?;
    g.add(x, w.pos_embed)
}

/// Runs every block from `tokens = X^(0)`, recording embeddings and attention.
pub fn encode_graph(g: &mut Graph, cfg: &ViTConfig, w: &ViTWeights<Var>, tokens: Var) -> Result<GraphCapture> {
    let k = cfg.tokens();
    let c = cfg.embed_dim;
    if g.value(tokens).dims() != [k, c] {
        return shape_err(format!(
            "tokens {:?}, encoder expects [{k}, {c}]",
            g.value(tokens).dims()
        ));
    }
    let heads = cfg.num_heads;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();

    let mut embeddings = vec![tokens];
    let mut attentions = Vec::with_capacity(cfg.depth);
    let mut x = tokens;
    for blk in &w.blocks {
        let h = norm(g, x, &blk.norm1)?;
        let qkv = affine(g, h, &blk.qkv)?;
        let mut outs = Vec::with_capacity(heads);
        let mut mean_attn = Tensor::zeros(&[k, k]);
        for head in 0..heads {
            let q = g.slice_cols(qkv, head * dh, dh)?;
            let kk = g.slice_cols(qkv, c + head * dh, dh)?;
            let v = g.slice_cols(qkv, 2 * c + head * dh, dh)?;
            let kt = g.transpose(kk);
            let scores = g.matmul(q, kt)?;
            let scores = g.scale(scores, scale);
            let attn = g.softmax_rows(scores);
            mean_attn = mean_attn.add(g.value(attn))?;
            outs.push(g.matmul(attn, v)?);
        }
        attentions.push(mean_attn.scale(1.0 / heads as f64));
        let o = g.concat_cols(&outs)?;
        let o = affine(g, o, &blk.proj)?;
        let x1 = g.add(x, o)?;
        let h2 = norm(g, x1, &blk.norm2)?;
        let m = affine(g, h2, &blk.fc1)?;
        let m = g.gelu(m);
        let m = affine(g, m, &blk.fc2)?;
        x = g.add(x1, m)?;
        if !g.value(x).is_finite() {
            return Err(Error::NonFinite(format!("block {} output", embeddings.len())));
        }
        embeddings.push(x);
    }
    Ok(GraphCapture { embeddings, attentions })
}

/// Patch-embedding output `X^(0)` for `image`, as plain values.
pub fn patch_tokens(params: &ViTParams, image: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let w = bind(&mut g, params, &TrainablePlan::None);
    let x0 = embed_graph(&mut g, &params.config, &w, image)?;
    Ok(g.value(x0).clone())
}

/// Full forward pass on an `H × W × C` input.
pub fn forward_capture(params: &ViTParams, input: &Tensor) -> Result<EmbeddingCapture> {
    let mut g = Graph::new();
    let w = bind(&mut g, params, &TrainablePlan::None);
    let x0 = embed_graph(&mut g, &params.config, &w, input)?;
    Ok(encode_graph(&mut g, &params.config, &w, x0)?.values(&g))
}

/// Forward pass from precomputed tokens, skipping the patch embedding.
pub fn forward_tokens(params: &ViTParams, tokens: &Tensor) -> Result<EmbeddingCapture> {
    let mut g = Graph::new();
    let w = bind(&mut g, params, &TrainablePlan::None);
    let x0 = g.constant(tokens.clone());
    Ok(encode_graph(&mut g, &params.config, &w, x0)?.values(&g))
}

/// Attaches rank-`r` adapters at `layout`. `A` starts small and random, `B`
/// starts at zero, so the model function is unchanged.
pub fn apply_lora(params: &ViTParams, layout: &LoraLayout, seed: u64) -> Result<ViTParams> {
    layout.validate(params.config.depth)?;
    if params.lora_layout().is_some() {
        return invalid("parameters already carry LoRA adapters");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = params.clone();
    for (i, blk) in out.weights.blocks.iter_mut().enumerate() {
        for site in AffineSite::ALL {
            if !layout.covers(i + 1, site) {
                continue;
            }
            let (din, dout) = site.io(&params.config);
            blk.site_mut(site).lora = Some(LoraPair {
                a: normal(&mut rng, &[layout.rank, din], LORA_A_STD),
                b: Tensor::zeros(&[dout, layout.rank]),
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::params::Slot;

    fn random_image(cfg: &ViTConfig, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        normal(&mut rng, &[cfg.img_size, cfg.img_size, cfg.in_channels], 1.0)
    }

    #[test]
    fn tiny_capture_shapes() {
        let cfg = ViTConfig::micro();
        let p = ViTParams::init(cfg, 0).unwrap();
        let cap = forward_capture(&p, &random_image(&cfg, 1)).unwrap();
        assert_eq!(cap.embeddings.len(), 3);
        assert!(cap.embeddings.iter().all(|e| e.dims() == [4, 8]));
        assert_eq!(cap.attentions.len(), 2);
        assert!(cap.attentions.iter().all(|a| a.dims() == [4, 4]));
    }

    #[test]
    fn attention_rows_are_stochastic() {
        let cfg = ViTConfig::micro();
        let p = ViTParams::init(cfg, 5).unwrap();
        let cap = forward_capture(&p, &random_image(&cfg, 2).scale(10.0)).unwrap();
        for a in &cap.attentions {
            assert!(a.data().iter().all(|&v| v >= 0.0));
            for s in a.row_sums() {
                assert!((s - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn zero_input_and_zero_projection_gives_positional_embedding() {
        let cfg = ViTConfig::micro();
        let mut p = ViTParams::init(cfg, 0).unwrap();
        p.weights.visit_mut(|k, t| {
            if !matches!(k.slot, Slot::PosEmbed | Slot::Norm1 | Slot::Norm2) {
                *t = Tensor::zeros(t.dims());
            }
        });
        let cap = forward_capture(&p, &Tensor::zeros(&[8, 8, 3])).unwrap();
        assert_eq!(cap.embeddings[0], p.weights.pos_embed);
    }

    #[test]
    fn tokens_entry_point_matches_image_entry_point() {
        let cfg = ViTConfig::micro();
        let p = ViTParams::init(cfg, 4).unwrap();
        let img = random_image(&cfg, 3);
        let full = forward_capture(&p, &img).unwrap();
        let via_tokens = forward_tokens(&p, &full.embeddings[0]).unwrap();
        assert_eq!(full, via_tokens);
        assert_eq!(patch_tokens(&p, &img).unwrap(), full.embeddings[0]);
    }

    #[test]
    fn zero_tokens_give_uniform_attention() {
        let mut cfg = ViTConfig::micro();
        cfg.depth = 1;
        let p = ViTParams::init(cfg, 4).unwrap();
        let cap = forward_tokens(&p, &Tensor::zeros(&[4, 8])).unwrap();
        assert_eq!(cap.attentions.len(), 1);
        assert!(cap.attentions[0].data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = ViTConfig::micro();
        let p = ViTParams::init(cfg, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let tokens = normal(&mut rng, &[4, 8], 1.0);
        let a = forward_tokens(&p, &tokens).unwrap();
        let b = forward_tokens(&p, &tokens).unwrap();
        for (x, y) in a.embeddings.iter().zip(&b.embeddings) {
            assert_eq!(x.to_le_bytes_f64(), y.to_le_bytes_f64());
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let p = ViTParams::init(ViTConfig::micro(), 0).unwrap();
        assert!(forward_capture(&p, &Tensor::zeros(&[8, 8, 2])).is_err());
        assert!(forward_tokens(&p, &Tensor::zeros(&[5, 8])).is_err());
    }

    #[test]
    fn fresh_lora_preserves_function() {
        let cfg = ViTConfig::micro();
        let p = ViTParams::init(cfg, 11).unwrap();
        let layout = LoraLayout {
            rank: 2,
            layers: vec![1, 2],
            sites: AffineSite::ALL.to_vec(),
        };
        let lp = apply_lora(&p, &layout, 3).unwrap();
        assert_eq!(lp.lora_layout(), Some(layout.clone()));
        let img = random_image(&cfg, 12);
        let a = forward_capture(&p, &img).unwrap();
        let b = forward_capture(&lp, &img).unwrap();
        for (x, y) in a.embeddings.iter().zip(&b.embeddings) {
            assert!(x.max_abs_diff(y) <= 1e-12);
        }
        assert!(apply_lora(&lp, &layout, 3).is_err());
        let bad = LoraLayout { rank: 0, ..layout };
        assert!(apply_lora(&p, &bad, 3).is_err());
    }

    #[test]
    fn invalid_lora_site_layer() {
        let p = ViTParams::init(ViTConfig::micro(), 0).unwrap();
        let layout = LoraLayout {
            rank: 1,
            layers: vec![3],
            sites: vec![AffineSite::Fc1],
        };
        assert!(apply_lora(&p, &layout, 0).is_err());
    }
}
