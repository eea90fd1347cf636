//! Auxiliary objective: rebuild the unmasked text features from the masked
//! text and the fused decoder outputs.

use rand::Rng;

use crate::config::ModelConfig;
use crate::decoder::CrossBlock;
use crate::encoders::non_pad;
use crate::error::{Error, Result};
use crate::tensor::{key_mask, AttentionParams, Graph, ParamStore, Var};

#[derive(Clone, Debug)]
pub struct Reconstructor {
    /// Pixels query the decoder text features.
    pub fuse: AttentionParams,
    /// Masked tokens query the fused pixels.
    pub rebuild: CrossBlock,
    pub text_dim: usize,
}

impl Reconstructor {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        cfg: &ModelConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let d = cfg.text_dim;
        Ok(Self {
            fuse: AttentionParams::new(store, "recon.fuse", d, d, d, cfg.heads, rng)?,
            rebuild: CrossBlock::new(store, "recon.rebuild", d, cfg.heads, rng)?,
            text_dim: d,
        })
    }

    /// `L_rec = CrossAtt(L_m, CrossAtt(V*, L*))`, `D x N`.
    pub fn joint_reconstruct<'a>(
        &self,
        g: &mut Graph<'a>,
        store: &'a ParamStore,
        masked_text: Var,
        v_star: Var,
        l_star: Var,
        tokens: &[u32],
    ) -> Result<Var> {
        let d = self.text_dim;
        let n = tokens.len();
        for (v, cols) in [(masked_text, n), (l_star, n)] {
            if g.shape(v) != [d, cols] {
                return Err(Error::Shape {
                    op: "joint_reconstruct",
                    lhs: g.shape(v).to_vec(),
                    rhs: vec![d, cols],
                });
            }
        }
        let s = match g.shape(v_star) {
            &[rows, s] if rows == d => s,
            other => {
                return Err(Error::Shape {
                    op: "joint_reconstruct",
                    lhs: other.to_vec(),
                    rhs: vec![d, 0],
                })
            }
        };
        let mask = key_mask(s, &non_pad(tokens));
        let fused = self
            .fuse
            .forward(g, store, v_star, l_star, Some(&mask))?
            .out;
        self.rebuild.forward(g, store, masked_text, fused, None)
    }
}

/// Mean squared error over tokens and channels against a target that never
/// receives gradient.
pub fn reconstruction_loss(g: &mut Graph<'_>, rebuilt: Var, target: Var) -> Result<Var> {
    let target = g.stop_gradient(target);
    g.mse(rebuilt, target)
}

/// `L_ce + eta * L_re`.
pub fn total_loss(g: &mut Graph<'_>, ce: Var, re: Var, eta: f64) -> Result<Var> {
    let weighted = g.mul_scalar(re, eta);
    g.add(ce, weighted)
}
