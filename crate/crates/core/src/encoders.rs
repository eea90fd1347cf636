//! Four-stage vision and text encoders. Each stage is a pre-norm transformer
//! block; vision stages 2-4 first merge 2x2 patches and double the channels.

use rand::Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::synthdata::PAD_ID;
use crate::tensor::{
    key_mask, AttentionParams, Graph, LayerNormParams, LinearParams, MlpParams, ParamId, ParamKind,
    ParamStore, Tensor, Var,
};

pub const NUM_STAGES: usize = 4;

/// Pre-norm self-attention + MLP block over the columns of a `D x n` matrix.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub norm1: LayerNormParams,
    pub attn: AttentionParams,
    pub norm2: LayerNormParams,
    pub mlp: MlpParams,
}

impl TransformerBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            norm1: LayerNormParams::new(store, &format!("{name}.norm1"), dim)?,
            attn: AttentionParams::new(store, &format!("{name}.attn"), dim, dim, dim, heads, rng)?,
            norm2: LayerNormParams::new(store, &format!("{name}.norm2"), dim)?,
            mlp: MlpParams::new(
                store,
                &format!("{name}.mlp"),
                dim,
                dim * mlp_ratio,
                dim,
                rng,
            )?,
        })
    }

    pub fn forward<'a>(
        &self,
        g: &mut Graph<'a>,
        store: &'a ParamStore,
        x: Var,
        mask: Option<&Tensor>,
    ) -> Result<Var> {
        let h = self.norm1.forward(g, store, x)?;
        let a = self.attn.forward(g, store, h, h, mask)?.out;
        let x = g.add(x, a)?;
        let h = self.norm2.forward(g, store, x)?;
        let m = self.mlp.forward(g, store, h)?;
        g.add(x, m)
    }
}

#[derive(Clone, Debug)]
struct PatchMerge {
    norm: LayerNormParams,
    proj: LinearParams,
}

#[derive(Clone, Debug)]
struct VisionStage {
    merge: Option<PatchMerge>,
    block: TransformerBlock,
}

/// Hierarchical vision encoder producing `C_i x H_i x W_i` maps.
#[derive(Clone, Debug)]
pub struct VisionEncoder {
    patch: usize,
    patch_embed: LinearParams,
    pos: ParamId,
    stages: Vec<VisionStage>,
}

impl VisionEncoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        cfg: &ModelConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let p = cfg.patch_size;
        let [c1, h1, w1] = cfg.stage_shapes()[0];
        let patch_embed = LinearParams::new(store, "vision.patch_embed", 3 * p * p, c1, true, rng)?;
        let pos = store.register(
            "vision.pos",
            Tensor::randn([c1, h1, w1], 0.02, rng),
            ParamKind::Bias,
        )?;
        let mut stages = Vec::with_capacity(NUM_STAGES);
        for (i, [c, _, _]) in cfg.stage_shapes().into_iter().enumerate() {
            let name = format!("vision.stage{}", i + 1);
            let merge = if i == 0 {
                None
            } else {
                Some(PatchMerge {
                    norm: LayerNormParams::new(store, &format!("{name}.merge_norm"), 2 * c)?,
                    proj: LinearParams::new(store, &format!("{name}.merge"), 2 * c, c, false, rng)?,
                })
            };
            let block = TransformerBlock::new(
                store,
                &format!("{name}.block"),
                c,
                cfg.heads,
                cfg.mlp_ratio,
                rng,
            )?;
            stages.push(VisionStage { merge, block });
        }
        Ok(Self {
            patch: p,
            patch_embed,
            pos,
            stages,
        })
    }

    /// `3 x H x W` image -> `C_1 x H_1 x W_1` patch embedding with positions.
    pub fn embed<'a>(&self, g: &mut Graph<'a>, store: &'a ParamStore, image: Var) -> Result<Var> {
        let patches = g.space_to_depth(image, self.patch)?;
        let x = self.patch_embed.forward_map(g, store, patches)?;
        let pos = g.param(store, self.pos);
        g.add(x, pos)
    }

    /// Stage `stage` (0-based) applied to the previous stage's map, or to the
    /// patch embedding for stage 0.
    pub fn stage<'a>(
        &self,
        g: &mut Graph<'a>,
        store: &'a ParamStore,
        stage: usize,
        x: Var,
    ) -> Result<Var> {
        let st = &self.stages[stage];
        let x = match &st.merge {
            Some(m) => {
                let &[_, h, w] = g.shape(x) else {
                    return Err(Error::Config(format!(
                        "stage input {:?} is not a map",
                        g.shape(x)
                    )));
                };
                if h % 2 != 0 || w % 2 != 0 {
                    return Err(Error::Config(format!(
                        "cannot merge patches of a {h}x{w} map"
                    )));
                }
                let merged = g.space_to_depth(x, 2)?;
                let [c4, h2, w2] = [g.shape(merged)[0], h / 2, w / 2];
                let flat = g.reshape(merged, [c4, h2 * w2])?;
                let n = m.norm.forward(g, store, flat)?;
                let y = m.proj.forward(g, store, n)?;
                g.reshape(y, [c4 / 2, h2, w2])?
            }
            None => x,
        };
        let &[c, h, w] = g.shape(x) else {
            unreachable!()
        };
        let flat = g.reshape(x, [c, h * w])?;
        let y = st.block.forward(g, store, flat, None)?;
        g.reshape(y, [c, h, w])
    }
}

/// Token encoder producing `D x N` matrices, one transformer layer group per
/// stage. Pad tokens are never attended to.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    embed: ParamId,
    pos: ParamId,
    stages: Vec<Vec<TransformerBlock>>,
    max_tokens: usize,
    vocab_size: usize,
}

impl TextEncoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        cfg: &ModelConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let d = cfg.text_dim;
        let embed = store.register(
            "text.embed",
            Tensor::randn([d, cfg.vocab_size], 1.0 / (d as f64).sqrt(), rng),
            ParamKind::Weight,
        )?;
        let pos = store.register(
            "text.pos",
            Tensor::randn([d, cfg.max_tokens], 0.02, rng),
            ParamKind::Bias,
        )?;
        let mut stages = Vec::with_capacity(NUM_STAGES);
        for i in 0..NUM_STAGES {
            let layers = (0..cfg.text_layers_per_stage)
                .map(|l| {
                    let name = format!("text.stage{}.layer{l}", i + 1);
                    TransformerBlock::new(store, &name, d, cfg.heads, cfg.mlp_ratio, rng)
                })
                .collect::<Result<_>>()?;
            stages.push(layers);
        }
        Ok(Self {
            embed,
            pos,
            stages,
            max_tokens: cfg.max_tokens,
            vocab_size: cfg.vocab_size,
        })
    }

    pub fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.len() != self.max_tokens {
            return Err(Error::Usage(format!(
                "expected {} tokens, got {}",
                self.max_tokens,
                tokens.len()
            )));
        }
        if let Some(t) = tokens.iter().find(|&&t| t as usize >= self.vocab_size) {
            return Err(Error::Usage(format!(
                "token id {t} outside vocabulary of {}",
                self.vocab_size
            )));
        }
        Ok(())
    }

    /// Embedding lookup plus positions: `D x N`.
    pub fn embed<'a>(
        &self,
        g: &mut Graph<'a>,
        store: &'a ParamStore,
        tokens: &[u32],
    ) -> Result<Var> {
        self.check_tokens(tokens)?;
        let table = g.param(store, self.embed);
        let cols: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let x = g.select_cols(table, &cols)?;
        let pos = g.param(store, self.pos);
        g.add(x, pos)
    }

    pub fn stage<'a>(
        &self,
        g: &mut Graph<'a>,
        store: &'a ParamStore,
        stage: usize,
        x: Var,
        tokens: &[u32],
    ) -> Result<Var> {
        let mask = key_mask(tokens.len(), &non_pad(tokens));
        let mut x = x;
        for layer in &self.stages[stage] {
            x = layer.forward(g, store, x, Some(&mask))?;
        }
        Ok(x)
    }

    /// Transformer layers of stage `stage` (0-based).
    pub fn layers(&self, stage: usize) -> &[TransformerBlock] {
        &self.stages[stage]
    }

    /// All stages without any visual input.
    pub fn encode<'a>(
        &self,
        g: &mut Graph<'a>,
        store: &'a ParamStore,
        tokens: &[u32],
    ) -> Result<Var> {
        let mut x = self.embed(g, store, tokens)?;
        for i in 0..NUM_STAGES {
            x = self.stage(g, store, i, x, tokens)?;
        }
        Ok(x)
    }
}

/// Text-only encoding of the expression with its key object masked out.
pub fn encode_masked_text<'a>(
    text: &TextEncoder,
    g: &mut Graph<'a>,
    store: &'a ParamStore,
    masked_tokens: &[u32],
) -> Result<Var> {
    text.encode(g, store, masked_tokens)
}

pub fn non_pad(tokens: &[u32]) -> Vec<bool> {
    tokens.iter().map(|&t| t != PAD_ID).collect()
}
