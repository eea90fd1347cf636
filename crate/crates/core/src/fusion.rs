//! Per-stage bidirectional exchange between a visual map and token features.
//!
//! Vision side: every pixel's `k x k` neighbourhood is projected to the text
//! width, scored against each non-pad token, and the softmax-weighted token
//! features are mixed over window sizes. Text side mirrors this with 1-D token
//! windows scored against every pixel. Each side is added back through a gate
//! (1x1 projection, instance norm, learned scale) as `x + gate(ctx) * x`.

use std::path::Path;

use rand::Rng;

use crate::config::ModelConfig;
use crate::encoders::non_pad;
use crate::error::{Error, Result};
use crate::image::encode_heatmap;
use crate::tensor::{
    key_mask, Graph, LinearParams, ParamId, ParamKind, ParamStore, Tensor, Var, NORM_EPS,
};

#[derive(Clone, Debug)]
pub struct Gate {
    pub proj: LinearParams,
    pub scale: ParamId,
}

impl Gate {
    fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            proj: LinearParams::new(store, &format!("{name}.proj"), d, out, true, rng)?,
            scale: store.register(
                format!("{name}.scale"),
                Tensor::zeros([1]),
                ParamKind::Scalar,
            )?,
        })
    }

    /// `ctx`: `d x n` -> `out x n`, normalized over the `n` positions.
    fn forward<'a>(&self, g: &mut Graph<'a>, store: &'a ParamStore, ctx: Var) -> Result<Var> {
        let y = self.proj.forward(g, store, ctx)?;
        let y = g.normalize(y, 1, NORM_EPS)?;
        let s = g.param(store, self.scale);
        g.scale(y, s)
    }
}

/// Learned parameters of one stage.
#[derive(Clone, Debug)]
pub struct FusionStage {
    pub vision_kernels: Vec<usize>,
    pub text_kernels: Vec<usize>,
    pub vision_proj: Vec<LinearParams>,
    pub text_proj: Vec<LinearParams>,
    pub pixel_proj: LinearParams,
    /// Mixing logits over vision window sizes.
    pub alpha: ParamId,
    /// Mixing logits over text window sizes.
    pub beta: ParamId,
    pub vision_gate: Gate,
    pub text_gate: Gate,
    pub text_dim: usize,
}

/// Intermediate values exposed for tests and visualization.
pub struct FusionTrace {
    pub vision_out: Var,
    pub text_out: Var,
    /// Per vision window: `HW x N` pixel-to-token weights.
    pub pixel_attn: Vec<Var>,
    /// Per text window: `N x HW` token-to-pixel weights.
    pub token_attn: Vec<Var>,
    /// Per vision window: `D x HW` aggregated token context.
    pub pixel_context: Vec<Var>,
    /// Mixed vision context before gating.
    pub vision_context: Var,
    pub text_context: Var,
}

impl FusionStage {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        cfg: &ModelConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let d = cfg.text_dim;
        let vision_proj = cfg
            .vision_kernels
            .iter()
            .map(|&k| {
                LinearParams::new(
                    store,
                    &format!("{name}.vision_k{k}"),
                    k * k * channels,
                    d,
                    true,
                    rng,
                )
            })
            .collect::<Result<_>>()?;
        let text_proj = cfg
            .text_kernels
            .iter()
            .map(|&k| LinearParams::new(store, &format!("{name}.text_k{k}"), k * d, d, true, rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            vision_kernels: cfg.vision_kernels.clone(),
            text_kernels: cfg.text_kernels.clone(),
            vision_proj,
            text_proj,
            pixel_proj: LinearParams::new(
                store,
                &format!("{name}.pixel_proj"),
                channels,
                d,
                true,
                rng,
            )?,
            alpha: store.register(
                format!("{name}.alpha"),
                Tensor::zeros([cfg.vision_kernels.len()]),
                ParamKind::Scalar,
            )?,
            beta: store.register(
                format!("{name}.beta"),
                Tensor::zeros([cfg.text_kernels.len()]),
                ParamKind::Scalar,
            )?,
            vision_gate: Gate::new(store, &format!("{name}.vision_gate"), d, channels, rng)?,
            text_gate: Gate::new(store, &format!("{name}.text_gate"), d, d, rng)?,
            text_dim: d,
        })
    }

    /// `(V', L')` for `vision`: `C x H x W` and `text`: `D x N`.
    pub fn forward<'a>(
        &self,
        g: &mut Graph<'a>,
        store: &'a ParamStore,
        vision: Var,
        text: Var,
        tokens: &[u32],
    ) -> Result<(Var, Var)> {
        let t = self.trace(g, store, vision, text, tokens)?;
        Ok((t.vision_out, t.text_out))
    }

    pub fn trace<'a>(
        &self,
        g: &mut Graph<'a>,
        store: &'a ParamStore,
        vision: Var,
        text: Var,
        tokens: &[u32],
    ) -> Result<FusionTrace> {
        let &[c, h, w] = g.shape(vision) else {
            return Err(Error::Shape {
                op: "fusion",
                lhs: g.shape(vision).to_vec(),
                rhs: g.shape(text).to_vec(),
            });
        };
        let hw = h * w;
        let n = tokens.len();
        if g.shape(text) != [self.text_dim, n] {
            return Err(Error::Shape {
                op: "fusion",
                lhs: g.shape(text).to_vec(),
                rhs: vec![self.text_dim, n],
            });
        }
        let inv_sqrt_d = 1.0 / (self.text_dim as f64).sqrt();

        // vision side
        let mask = key_mask(hw, &non_pad(tokens));
        let alpha = g.param(store, self.alpha);
        let alpha = g.softmax(alpha, 0)?;
        let mut pixel_attn = Vec::new();
        let mut pixel_context = Vec::new();
        let mut vision_context = None;
        for (i, (&k, proj)) in self
            .vision_kernels
            .iter()
            .zip(&self.vision_proj)
            .enumerate()
        {
            let local = g.unfold2d(vision, k)?;
            let scores = project_scores(g, store, proj, local, text)?;
            let scores = g.mul_scalar(scores, inv_sqrt_d);
            let attn = g.softmax_masked(scores, &mask)?;
            let attn_t = g.transpose(attn)?;
            let ctx = g.matmul(text, attn_t)?;
            let weighted = mix_term(g, alpha, i, ctx)?;
            vision_context = Some(match vision_context {
                Some(acc) => g.add(acc, weighted)?,
                None => weighted,
            });
            pixel_attn.push(attn);
            pixel_context.push(ctx);
        }
        let vision_context = vision_context.expect("at least one vision kernel");
        let gate = self.vision_gate.forward(g, store, vision_context)?;
        let gate = g.reshape(gate, [c, h, w])?;
        let modulated = g.mul(gate, vision)?;
        let vision_out = g.add(modulated, vision)?;

        // text side
        let flat = g.reshape(vision, [c, hw])?;
        let pixels = self.pixel_proj.forward(g, store, flat)?;
        let beta = g.param(store, self.beta);
        let beta = g.softmax(beta, 0)?;
        let mut token_attn = Vec::new();
        let mut text_context = None;
        for (i, (&k, proj)) in self.text_kernels.iter().zip(&self.text_proj).enumerate() {
            let local = g.unfold1d(text, k)?;
            let local = g.transpose(local)?;
            let p = proj.forward(g, store, local)?;
            let pt = g.transpose(p)?;
            let scores = g.matmul(pt, pixels)?;
            let scores = g.mul_scalar(scores, inv_sqrt_d);
            let attn = g.softmax(scores, 1)?;
            let attn_t = g.transpose(attn)?;
            let ctx = g.matmul(pixels, attn_t)?;
            let weighted = mix_term(g, beta, i, ctx)?;
            text_context = Some(match text_context {
                Some(acc) => g.add(acc, weighted)?,
                None => weighted,
            });
            token_attn.push(attn);
        }
        let text_context = text_context.expect("at least one text kernel");
        let gate = self.text_gate.forward(g, store, text_context)?;
        let modulated = g.mul(gate, text)?;
        let text_out = g.add(modulated, text)?;

        Ok(FusionTrace {
            vision_out,
            text_out,
            pixel_attn,
            token_attn,
            pixel_context,
            vision_context,
            text_context,
        })
    }
}

/// `(U W^T + 1 b^T) X` for `local` = `U` (`rows x in`), evaluated as
/// `U (W^T X) + 1 (b^T X)` so the wide projection is never materialized.
fn project_scores<'a>(
    g: &mut Graph<'a>,
    store: &'a ParamStore,
    proj: &LinearParams,
    local: Var,
    x: Var,
) -> Result<Var> {
    let rows = g.shape(local)[0];
    let w = g.param(store, proj.weight);
    let wt = g.transpose(w)?;
    let wx = g.matmul(wt, x)?;
    let scores = g.matmul(local, wx)?;
    let Some(b) = proj.bias else {
        return Ok(scores);
    };
    let b = g.param(store, b);
    let b = g.reshape(b, [1, proj.out_dim])?;
    let bx = g.matmul(b, x)?;
    let ones = g.constant(Tensor::full([rows, 1], 1.0));
    let bx = g.matmul(ones, bx)?;
    g.add(scores, bx)
}

/// `weights[i] * x` for a vector of mixing weights.
fn mix_term(g: &mut Graph<'_>, weights: Var, i: usize, x: Var) -> Result<Var> {
    let n = g.shape(weights)[0];
    let row = g.reshape(weights, [1, n])?;
    let wi = g.slice_cols(row, i, i + 1)?;
    g.scale(x, wi)
}

/// Write one PGM heat map per vision window: the attention each pixel pays to
/// `token`, scaled to the full grey range. Returns the written paths.
#[allow(clippy::too_many_arguments)]
pub fn dump_affinity_maps(
    g: &Graph<'_>,
    trace: &FusionTrace,
    kernels: &[usize],
    height: usize,
    width: usize,
    token: usize,
    dir: &Path,
    prefix: &str,
) -> Result<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut paths = Vec::new();
    for (&k, &attn) in kernels.iter().zip(&trace.pixel_attn) {
        let a = g.value(attn);
        let n = a.shape()[1];
        let values: Vec<f64> = a.data().iter().skip(token).step_by(n).copied().collect();
        let path = dir.join(format!("{prefix}_k{k}.pgm"));
        std::fs::write(&path, encode_heatmap(&values, width, height))?;
        paths.push(path);
    }
    Ok(paths)
}
