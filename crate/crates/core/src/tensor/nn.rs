//! Parameterized building blocks. Feature matrices are laid out
//! `features x positions` (one column per pixel or token).

use rand::Rng;

use super::{Graph, ParamId, ParamKind, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

pub const NORM_EPS: f64 = 1e-5;

/// Affine map `W x + b` applied column-wise.
#[derive(Clone, Debug)]
pub struct LinearParams {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl LinearParams {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let std = (1.0 / in_dim as f64).sqrt();
        let weight = store.register(
            format!("{name}.weight"),
            Tensor::randn([out_dim, in_dim], std, rng),
            ParamKind::Weight,
        )?;
        let bias = if bias {
            Some(store.register(
                format!("{name}.bias"),
                Tensor::zeros([out_dim]),
                ParamKind::Bias,
            )?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    /// `x`: `in x cols` -> `out x cols`.
    pub fn forward<'a>(&self, g: &mut Graph<'a>, store: &'a ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let y = g.matmul(w, x)?;
        match self.bias {
            Some(b) => {
                let b = g.param(store, b);
                g.add_row_bias(y, b)
            }
            None => Ok(y),
        }
    }

    /// 1x1 convolution over a `C x H x W` map.
    pub fn forward_map<'a>(&self, g: &mut Graph<'a>, store: &'a ParamStore, x: Var) -> Result<Var> {
        let &[c, h, w] = g.shape(x) else {
            return Err(Error::Shape {
                op: "conv1x1",
                lhs: g.shape(x).to_vec(),
                rhs: vec![self.in_dim, 0, 0],
            });
        };
        let flat = g.reshape(x, [c, h * w])?;
        let y = self.forward(g, store, flat)?;
        g.reshape(y, [self.out_dim, h, w])
    }
}

/// Per-position normalization over the feature axis with learned gain/offset.
#[derive(Clone, Debug)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNormParams {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gain: store.register(
                format!("{name}.gain"),
                Tensor::full([dim], 1.0),
                ParamKind::Norm,
            )?,
            bias: store.register(
                format!("{name}.bias"),
                Tensor::zeros([dim]),
                ParamKind::Norm,
            )?,
        })
    }

    /// `x`: `D x cols`, normalized per column.
    pub fn forward<'a>(&self, g: &mut Graph<'a>, store: &'a ParamStore, x: Var) -> Result<Var> {
        let n = g.normalize(x, 0, NORM_EPS)?;
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        let y = g.mul_row_scale(n, gain)?;
        g.add_row_bias(y, bias)
    }
}

/// Two-layer GELU perceptron applied column-wise.
#[derive(Clone, Debug)]
pub struct MlpParams {
    pub fc1: LinearParams,
    pub fc2: LinearParams,
}

impl MlpParams {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        hidden: usize,
        out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            fc1: LinearParams::new(store, &format!("{name}.fc1"), dim, hidden, true, rng)?,
            fc2: LinearParams::new(store, &format!("{name}.fc2"), hidden, out, true, rng)?,
        })
    }

    pub fn forward<'a>(&self, g: &mut Graph<'a>, store: &'a ParamStore, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, store, x)?;
        let h = g.gelu(h);
        self.fc2.forward(g, store, h)
    }
}

/// Multi-head scaled dot-product attention with separate query and key/value
/// widths.
#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub q: LinearParams,
    pub k: LinearParams,
    pub v: LinearParams,
    pub o: LinearParams,
    pub heads: usize,
    pub model_dim: usize,
}

/// Attention result plus the per-head weight matrices (`Nq x Nk`).
pub struct AttentionOutput {
    pub out: Var,
    pub weights: Vec<Var>,
}

impl AttentionParams {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        query_dim: usize,
        kv_dim: usize,
        model_dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || !model_dim.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "{heads} heads do not divide model dim {model_dim}"
            )));
        }
        Ok(Self {
            q: LinearParams::new(store, &format!("{name}.q"), query_dim, model_dim, true, rng)?,
            k: LinearParams::new(store, &format!("{name}.k"), kv_dim, model_dim, true, rng)?,
            v: LinearParams::new(store, &format!("{name}.v"), kv_dim, model_dim, true, rng)?,
            o: LinearParams::new(store, &format!("{name}.o"), model_dim, query_dim, true, rng)?,
            heads,
            model_dim,
        })
    }

    /// `query`: `Dq x Nq`, `kv`: `Dk x Nk`; `mask` is an optional additive
    /// `Nq x Nk` mask (0 or -inf). Returns `Dq x Nq`.
    pub fn forward<'a>(
        &self,
        g: &mut Graph<'a>,
        store: &'a ParamStore,
        query: Var,
        kv: Var,
        mask: Option<&Tensor>,
    ) -> Result<AttentionOutput> {
        let q = self.q.forward(g, store, query)?;
        let k = self.k.forward(g, store, kv)?;
        let v = self.v.forward(g, store, kv)?;
        let nq = g.shape(query)[1];
        let dh = self.model_dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    g.slice_rows(q, lo, hi)?,
                    g.slice_rows(k, lo, hi)?,
                    g.slice_rows(v, lo, hi)?,
                )
            };
            let qt = g.transpose(qh)?;
            let scores = g.matmul(qt, kh)?;
            let scores = g.mul_scalar(scores, scale);
            let attn = match mask {
                Some(m) => g.softmax_masked(scores, m)?,
                None => g.softmax(scores, 1)?,
            };
            let at = g.transpose(attn)?;
            heads.push(g.matmul(vh, at)?);
            weights.push(attn);
        }
        let merged = if heads.len() == 1 {
            heads[0]
        } else {
            g.concat_rows(&heads)?
        };
        debug_assert_eq!(g.shape(merged), &[self.model_dim, nq]);
        let out = self.o.forward(g, store, merged)?;
        Ok(AttentionOutput { out, weights })
    }
}

/// Additive key mask hiding the columns where `keep` is false, for `rows`
/// queries.
pub fn key_mask(rows: usize, keep: &[bool]) -> Tensor {
    let cols = keep.len();
    Tensor::from_fn([rows, cols], |i| {
        if keep[i % cols] {
            0.0
        } else {
            f64::NEG_INFINITY
        }
    })
}
