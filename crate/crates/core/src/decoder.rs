//! Twin-stream mask decoder: iterated cross-attention between the
//! concatenated multi-stage visual features and the text, a learnable
//! background prompt pooled from the masked expression, and per-pixel
//! foreground/background logits from two prototypes.

use rand::Rng;

use crate::config::ModelConfig;
use crate::encoders::non_pad;
use crate::error::{Error, Result};
use crate::image::Mask;
use crate::tensor::{
    key_mask, pooling_matrix, AttentionParams, Graph, LayerNormParams, LinearParams, MlpParams,
    ParamId, ParamKind, ParamStore, Tensor, Var,
};

/// Residual pre-norm cross-attention: `q + Attn(LN(q), LN(kv))`.
#[derive(Clone, Debug)]
pub struct CrossBlock {
    pub norm_q: LayerNormParams,
    pub norm_kv: LayerNormParams,
    pub attn: AttentionParams,
}

impl CrossBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            norm_q: LayerNormParams::new(store, &format!("{name}.norm_q"), d)?,
            norm_kv: LayerNormParams::new(store, &format!("{name}.norm_kv"), d)?,
            attn: AttentionParams::new(store, &format!("{name}.attn"), d, d, d, heads, rng)?,
        })
    }

    pub fn forward<'a>(
        &self,
        g: &mut Graph<'a>,
        store: &'a ParamStore,
        query: Var,
        kv: Var,
        mask: Option<&Tensor>,
    ) -> Result<Var> {
        let q = self.norm_q.forward(g, store, query)?;
        let kv = self.norm_kv.forward(g, store, kv)?;
        let a = self.attn.forward(g, store, q, kv, mask)?.out;
        g.add(query, a)
    }
}

/// Residual pre-norm MLP: `x + MLP(LN(x))`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub norm: LayerNormParams,
    pub mlp: MlpParams,
}

impl FeedForward {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        ratio: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            norm: LayerNormParams::new(store, &format!("{name}.norm"), d)?,
            mlp: MlpParams::new(store, &format!("{name}.mlp"), d, d * ratio, d, rng)?,
        })
    }

    pub fn forward<'a>(&self, g: &mut Graph<'a>, store: &'a ParamStore, x: Var) -> Result<Var> {
        let h = self.norm.forward(g, store, x)?;
        let h = self.mlp.forward(g, store, h)?;
        g.add(x, h)
    }
}

/// Residual pre-norm self-attention restricted by an additive mask.
#[derive(Clone, Debug)]
pub struct MaskedSelfAttention {
    pub norm: LayerNormParams,
    pub attn: AttentionParams,
}

impl MaskedSelfAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            norm: LayerNormParams::new(store, &format!("{name}.norm"), d)?,
            attn: AttentionParams::new(store, &format!("{name}.attn"), d, d, d, heads, rng)?,
        })
    }

    /// Returns the output and the per-head attention weights.
    pub fn forward<'a>(
        &self,
        g: &mut Graph<'a>,
        store: &'a ParamStore,
        x: Var,
        mask: &Tensor,
    ) -> Result<(Var, Vec<Var>)> {
        let h = self.norm.forward(g, store, x)?;
        let a = self.attn.forward(g, store, h, h, Some(mask))?;
        Ok((g.add(x, a.out)?, a.weights))
    }
}

/// Foreground and background logit maps, `H x W` each.
#[derive(Clone, Copy, Debug)]
pub struct MaskLogits {
    pub fg: Var,
    pub bg: Var,
}

pub struct InteractionOutput {
    pub l_star: Var,
    pub v_star: Var,
    /// Per-head weights of the segment-restricted self-attention in the last
    /// iteration.
    pub segment_attn: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub reduce: Vec<LinearParams>,
    pub text_cross: CrossBlock,
    pub text_ffn: FeedForward,
    pub text_proj: LinearParams,
    pub vision_cross: CrossBlock,
    pub vision_self: MaskedSelfAttention,
    pub vision_proj: LinearParams,
    pub bg_delta: ParamId,
    pub bg_pool_sizes: Vec<usize>,
    pub stage1_proj: LinearParams,
    pub pixel_head: MlpParams,
    pub proto_proj: LinearParams,
    /// `(H_i, W_i)` of stages 2-4, in concatenation order.
    pub segments: Vec<(usize, usize)>,
    pub stage1_hw: (usize, usize),
    pub image_hw: (usize, usize),
    pub iterations: usize,
    pub text_dim: usize,
}

impl Decoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        cfg: &ModelConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let d = cfg.text_dim;
        let shapes = cfg.stage_shapes();
        let reduce = shapes[1..]
            .iter()
            .enumerate()
            .map(|(i, &[c, _, _])| {
                LinearParams::new(store, &format!("decoder.reduce{}", i + 2), c, d, true, rng)
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            reduce,
            text_cross: CrossBlock::new(store, "decoder.text_cross", d, cfg.heads, rng)?,
            text_ffn: FeedForward::new(store, "decoder.text_ffn", d, cfg.mlp_ratio, rng)?,
            text_proj: LinearParams::new(store, "decoder.text_proj", d, d, true, rng)?,
            vision_cross: CrossBlock::new(store, "decoder.vision_cross", d, cfg.heads, rng)?,
            vision_self: MaskedSelfAttention::new(store, "decoder.vision_self", d, cfg.heads, rng)?,
            vision_proj: LinearParams::new(store, "decoder.vision_proj", d, d, true, rng)?,
            bg_delta: store.register(
                "decoder.bg_delta",
                Tensor::zeros([d, cfg.bg_tokens]),
                ParamKind::Bias,
            )?,
            bg_pool_sizes: cfg.bg_pool_sizes.clone(),
            stage1_proj: LinearParams::new(
                store,
                "decoder.stage1_proj",
                shapes[0][0],
                d,
                true,
                rng,
            )?,
            pixel_head: MlpParams::new(store, "decoder.pixel_head", d, d * cfg.mlp_ratio, d, rng)?,
            proto_proj: LinearParams::new(store, "decoder.proto_proj", d, d, true, rng)?,
            segments: shapes[1..].iter().map(|&[_, h, w]| (h, w)).collect(),
            stage1_hw: (shapes[0][1], shapes[0][2]),
            image_hw: (cfg.image_size, cfg.image_size),
            iterations: cfg.decoder_iterations,
            text_dim: d,
        })
    }

    /// Column ranges of each stage segment within the concatenated axis.
    pub fn segment_ranges(&self) -> Vec<(usize, usize)> {
        let mut start = 0;
        self.segments
            .iter()
            .map(|&(h, w)| {
                let r = (start, start + h * w);
                start = r.1;
                r
            })
            .collect()
    }

    pub fn total_positions(&self) -> usize {
        self.segments.iter().map(|(h, w)| h * w).sum()
    }

    /// Additive `S x S` mask allowing attention only within a stage segment.
    pub fn segment_mask(&self) -> Tensor {
        let ranges = self.segment_ranges();
        let s = self.total_positions();
        let seg_of = |p: usize| {
            ranges
                .iter()
                .position(|&(a, b)| p >= a && p < b)
                .expect("in range")
        };
        Tensor::from_fn([s, s], |i| {
            if seg_of(i / s) == seg_of(i % s) {
                0.0
            } else {
                f64::NEG_INFINITY
            }
        })
    }

    /// 1x1-reduce stages 2-4 to `D` channels and concatenate along the
    /// spatial axis: `D x S`.
    pub fn build_vcon<'a>(
        &self,
        g: &mut Graph<'a>,
        store: &'a ParamStore,
        maps: &[Var],
    ) -> Result<Var> {
        if maps.len() != self.reduce.len() {
            return Err(Error::Usage(format!(
                "expected {} stage maps, got {}",
                self.reduce.len(),
                maps.len()
            )));
        }
        let mut parts = Vec::with_capacity(maps.len());
        for ((&m, proj), &(h, w)) in maps.iter().zip(&self.reduce).zip(&self.segments) {
            let shape = g.shape(m);
            if shape.len() != 3 || shape[0] != proj.in_dim || (shape[1], shape[2]) != (h, w) {
                return Err(Error::Shape {
                    op: "build_vcon",
                    lhs: shape.to_vec(),
                    rhs: vec![proj.in_dim, h, w],
                });
            }
            let flat = g.reshape(m, [proj.in_dim, h * w])?;
            parts.push(proj.forward(g, store, flat)?);
        }
        g.concat_cols(&parts)
    }

    /// `iterations` rounds of text-from-vision then vision-from-text
    /// refinement, each round consuming the previous round's outputs.
    pub fn interact<'a>(
        &self,
        g: &mut Graph<'a>,
        store: &'a ParamStore,
        vcon: Var,
        text: Var,
        tokens: &[u32],
        iterations: usize,
    ) -> Result<InteractionOutput> {
        if iterations == 0 {
            return Err(Error::Config(
                "at least one decoder iteration is required".into(),
            ));
        }
        let s = self.total_positions();
        if g.shape(vcon) != [self.text_dim, s] {
            return Err(Error::Shape {
                op: "interact",
                lhs: g.shape(vcon).to_vec(),
                rhs: vec![self.text_dim, s],
            });
        }
        let n = tokens.len();
        let pad_mask = key_mask(s, &non_pad(tokens));
        let seg_mask = self.segment_mask();
        let (mut l, mut v) = (text, vcon);
        let mut segment_attn = Vec::new();
        for _ in 0..iterations {
            let x = self.text_cross.forward(g, store, l, v, None)?;
            let x = self.text_ffn.forward(g, store, x)?;
            l = self.text_proj.forward(g, store, x)?;
            let y = self.vision_cross.forward(g, store, v, l, Some(&pad_mask))?;
            let (y, w) = self.vision_self.forward(g, store, y, &seg_mask)?;
            v = self.vision_proj.forward(g, store, y)?;
            segment_attn = w;
        }
        debug_assert_eq!(g.shape(l), &[self.text_dim, n]);
        Ok(InteractionOutput {
            l_star: l,
            v_star: v,
            segment_attn,
        })
    }

    /// Pool the non-pad columns of the masked-text encoding at every
    /// configured size, concatenate, and add the learned offset: `D x B`.
    pub fn build_bg_prompt<'a>(
        &self,
        g: &mut Graph<'a>,
        store: &'a ParamStore,
        masked_text: Var,
        masked_tokens: &[u32],
    ) -> Result<Var> {
        let n = masked_tokens.len();
        let cols: Vec<usize> = (0..n).filter(|&i| non_pad(masked_tokens)[i]).collect();
        if cols.is_empty() {
            return Err(Error::Usage(
                "masked expression has no non-pad tokens".into(),
            ));
        }
        let mut parts = Vec::with_capacity(self.bg_pool_sizes.len());
        for &r in &self.bg_pool_sizes {
            let pool = g.constant(pooling_matrix(n, &cols, r));
            parts.push(g.matmul(masked_text, pool)?);
        }
        let pooled = g.concat_cols(&parts)?;
        let delta = g.param(store, self.bg_delta);
        g.add(pooled, delta)
    }

    /// Per-pixel features at stage-1 resolution: upsampled first segment of
    /// `V*` plus projected stage-1 map, `D x H_1W_1`.
    pub fn pixel_features<'a>(
        &self,
        g: &mut Graph<'a>,
        store: &'a ParamStore,
        v1: Var,
        v_star: Var,
    ) -> Result<Var> {
        let (h2, w2) = self.segments[0];
        let (h1, w1) = self.stage1_hw;
        let d = self.text_dim;
        let seg = g.slice_cols(v_star, 0, h2 * w2)?;
        let seg = g.reshape(seg, [d, h2, w2])?;
        let up = g.bilinear_resize(seg, h1, w1)?;
        let up = g.reshape(up, [d, h1 * w1])?;
        let c1 = g.shape(v1)[0];
        let flat = g.reshape(v1, [c1, h1 * w1])?;
        let p = self.stage1_proj.forward(g, store, flat)?;
        g.add(up, p)
    }

    /// Full-resolution logit map for one `D x 1` prototype.
    pub fn logits_for<'a>(
        &self,
        g: &mut Graph<'a>,
        store: &'a ParamStore,
        pixels: Var,
        proto: Var,
    ) -> Result<Var> {
        let r = self.proto_proj.forward(g, store, proto)?;
        self.logits_from_projected(g, pixels, r)
    }

    /// Logits from an already projected prototype; `pixels` are the
    /// transformed per-pixel features.
    pub fn logits_from_projected(&self, g: &mut Graph<'_>, pixels: Var, proto: Var) -> Result<Var> {
        let (h1, w1) = self.stage1_hw;
        let (h, w) = self.image_hw;
        let rt = g.transpose(proto)?;
        let o = g.matmul(rt, pixels)?;
        let o = g.mul_scalar(o, 1.0 / (self.text_dim as f64).sqrt());
        let o = g.reshape(o, [1, h1, w1])?;
        let o = g.bilinear_resize(o, h, w)?;
        g.reshape(o, [h, w])
    }

    /// Foreground logits from the `[cls]` column of `L*`, background logits
    /// from the token mean of the background prompt (or a zero map when
    /// `bg_prompt` is `None`).
    pub fn predict_masks<'a>(
        &self,
        g: &mut Graph<'a>,
        store: &'a ParamStore,
        v1: Var,
        v_star: Var,
        l_star: Var,
        bg_prompt: Option<Var>,
    ) -> Result<MaskLogits> {
        let feats = self.pixel_features(g, store, v1, v_star)?;
        let pixels = self.pixel_head.forward(g, store, feats)?;
        let l_fg = g.select_cols(l_star, &[0])?;
        let fg = self.logits_for(g, store, pixels, l_fg)?;
        let bg = match bg_prompt {
            Some(p) => {
                let l_bg = g.mean_axis(p, 1)?;
                self.logits_for(g, store, pixels, l_bg)?
            }
            None => g.constant(Tensor::zeros([self.image_hw.0, self.image_hw.1])),
        };
        Ok(MaskLogits { fg, bg })
    }
}

/// Branch losses and their weighted combination.
#[derive(Clone, Copy, Debug)]
pub struct TwinLoss {
    pub fg: Var,
    pub bg: Option<Var>,
    pub ce: Var,
}

/// `lambda * BCE(fg, G) + (1 - lambda) * BCE(bg, 1 - G)`; with no background
/// branch, the foreground loss alone.
pub fn twinstream_loss(
    g: &mut Graph<'_>,
    logits: MaskLogits,
    gt: &Mask,
    lambda: f64,
    use_bg: bool,
) -> Result<TwinLoss> {
    if g.shape(logits.fg) != [gt.height, gt.width] {
        return Err(Error::Shape {
            op: "twinstream_loss",
            lhs: g.shape(logits.fg).to_vec(),
            rhs: vec![gt.height, gt.width],
        });
    }
    if gt.data.iter().any(|&v| v > 1) {
        return Err(Error::Usage("ground-truth mask is not binary".into()));
    }
    let target = gt.to_f64();
    let fg = g.bce_with_logits(logits.fg, &target)?;
    if !use_bg {
        return Ok(TwinLoss {
            fg,
            bg: None,
            ce: fg,
        });
    }
    let complement: Vec<f64> = target.iter().map(|t| 1.0 - t).collect();
    let bg = g.bce_with_logits(logits.bg, &complement)?;
    let a = g.mul_scalar(fg, lambda);
    let b = g.mul_scalar(bg, 1.0 - lambda);
    let ce = g.add(a, b)?;
    Ok(TwinLoss {
        fg,
        bg: Some(bg),
        ce,
    })
}

/// Pixel is foreground iff its foreground logit strictly exceeds the
/// background logit.
pub fn infer_mask(fg: &Tensor, bg: &Tensor) -> Result<Mask> {
    let &[h, w] = fg.shape() else {
        return Err(Error::Shape {
            op: "infer_mask",
            lhs: fg.shape().to_vec(),
            rhs: bg.shape().to_vec(),
        });
    };
    if bg.shape() != fg.shape() {
        return Err(Error::Shape {
            op: "infer_mask",
            lhs: fg.shape().to_vec(),
            rhs: bg.shape().to_vec(),
        });
    }
    let labels: Vec<u8> = fg
        .data()
        .iter()
        .zip(bg.data())
        .map(|(f, b)| u8::from(f > b))
        .collect();
    Mask::from_labels(w, h, labels)
}
