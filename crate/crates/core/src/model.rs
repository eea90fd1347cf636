//! Full segmentation network: interleaved encoders with per-stage fusion,
//! twin-stream decoder and masked-text reconstruction head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::decoder::{infer_mask, twinstream_loss, Decoder, MaskLogits};
use crate::encoders::{encode_masked_text, TextEncoder, VisionEncoder, NUM_STAGES};
use crate::error::Result;
use crate::fusion::FusionStage;
use crate::image::Mask;
use crate::reconstruction::{reconstruction_loss, total_loss, Reconstructor};
use crate::synthdata::Sample;
use crate::tensor::{Graph, ParamStore, Tensor, Var};

/// Parameter names with these prefixes train at the encoder learning rate.
pub const ENCODER_PREFIXES: [&str; 2] = ["vision.", "text."];

pub fn is_encoder_param(name: &str) -> bool {
    ENCODER_PREFIXES.iter().any(|p| name.starts_with(p))
}

/// Model input for one sample.
#[derive(Clone, Debug)]
pub struct Example {
    /// `3 x H x W`, values in `[0, 1]`.
    pub image: Tensor,
    pub tokens: Vec<u32>,
    pub masked_tokens: Vec<u32>,
}

impl Example {
    pub fn from_sample(s: &Sample) -> Self {
        Self {
            image: s.image.to_tensor(),
            tokens: s.tokens.clone(),
            masked_tokens: s.masked_tokens.clone(),
        }
    }
}

/// Graph handles of one forward pass.
pub struct Forward {
    /// Stage maps after fusion.
    pub vision: Vec<Var>,
    /// Stage token features after fusion.
    pub text: Vec<Var>,
    pub l_star: Var,
    pub v_star: Var,
    pub masked_text: Var,
    pub bg_prompt: Option<Var>,
    pub logits: MaskLogits,
    pub rebuilt: Var,
    /// Unmasked text-only encoding, the reconstruction target.
    pub target: Var,
}

/// Scalar losses of one sample.
#[derive(Clone, Copy, Debug)]
pub struct Losses {
    pub fg: Var,
    pub bg: Option<Var>,
    pub ce: Var,
    pub re: Var,
    pub total: Var,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub vision: VisionEncoder,
    pub text: TextEncoder,
    pub fusion: Vec<FusionStage>,
    pub decoder: Decoder,
    pub recon: Reconstructor,
}

impl Model {
    /// Fresh parameters drawn from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let vision = VisionEncoder::new(&mut store, &config, &mut rng)?;
        let text = TextEncoder::new(&mut store, &config, &mut rng)?;
        let fusion = config
            .stage_shapes()
            .iter()
            .enumerate()
            .map(|(i, &[c, _, _])| {
                FusionStage::new(
                    &mut store,
                    &format!("fusion.stage{}", i + 1),
                    c,
                    &config,
                    &mut rng,
                )
            })
            .collect::<Result<_>>()?;
        let decoder = Decoder::new(&mut store, &config, &mut rng)?;
        let recon = Reconstructor::new(&mut store, &config, &mut rng)?;
        Ok(Self {
            config,
            store,
            vision,
            text,
            fusion,
            decoder,
            recon,
        })
    }

    /// Run the four encoder stages, exchanging information after each stage
    /// where fusion is enabled. Returns the per-stage `(V', L')`.
    pub fn encode<'a>(
        &'a self,
        g: &mut Graph<'a>,
        image: Var,
        tokens: &[u32],
    ) -> Result<(Vec<Var>, Vec<Var>)> {
        let store = &self.store;
        let mut v = self.vision.embed(g, store, image)?;
        let mut l = self.text.embed(g, store, tokens)?;
        let (mut vs, mut ls) = (
            Vec::with_capacity(NUM_STAGES),
            Vec::with_capacity(NUM_STAGES),
        );
        for i in 0..NUM_STAGES {
            v = self.vision.stage(g, store, i, v)?;
            l = self.text.stage(g, store, i, l, tokens)?;
            if self.config.fusion_stages[i] {
                (v, l) = self.fusion[i].forward(g, store, v, l, tokens)?;
            }
            vs.push(v);
            ls.push(l);
        }
        Ok((vs, ls))
    }

    pub fn forward<'a>(&'a self, g: &mut Graph<'a>, ex: &Example) -> Result<Forward> {
        self.forward_with_target(g, ex, None)
    }

    /// Forward pass with the reconstruction target supplied as a constant
    /// instead of recomputed from the current parameters.
    pub fn forward_with_target<'a>(
        &'a self,
        g: &mut Graph<'a>,
        ex: &Example,
        target: Option<&Tensor>,
    ) -> Result<Forward> {
        let store = &self.store;
        self.text.check_tokens(&ex.masked_tokens)?;
        let image = g.constant(ex.image.clone());
        let (vision, text) = self.encode(g, image, &ex.tokens)?;
        let vcon = self.decoder.build_vcon(g, store, &vision[1..])?;
        let inter = self.decoder.interact(
            g,
            store,
            vcon,
            text[NUM_STAGES - 1],
            &ex.tokens,
            self.config.decoder_iterations,
        )?;
        let masked_text = encode_masked_text(&self.text, g, store, &ex.masked_tokens)?;
        let bg_prompt = if self.config.use_bg_branch {
            Some(
                self.decoder
                    .build_bg_prompt(g, store, masked_text, &ex.masked_tokens)?,
            )
        } else {
            None
        };
        let logits = self.decoder.predict_masks(
            g,
            store,
            vision[0],
            inter.v_star,
            inter.l_star,
            bg_prompt,
        )?;
        let rebuilt = self.recon.joint_reconstruct(
            g,
            store,
            masked_text,
            inter.v_star,
            inter.l_star,
            &ex.tokens,
        )?;
        let target = match target {
            Some(t) => g.constant(t.clone()),
            None => self.text.encode(g, store, &ex.tokens)?,
        };
        Ok(Forward {
            vision,
            text,
            l_star: inter.l_star,
            v_star: inter.v_star,
            masked_text,
            bg_prompt,
            logits,
            rebuilt,
            target,
        })
    }

    pub fn losses(&self, g: &mut Graph<'_>, fwd: &Forward, gt: &Mask) -> Result<Losses> {
        let twin = twinstream_loss(
            g,
            fwd.logits,
            gt,
            self.config.lambda,
            self.config.use_bg_branch,
        )?;
        let re = reconstruction_loss(g, fwd.rebuilt, fwd.target)?;
        let total = total_loss(g, twin.ce, re, self.config.eta)?;
        Ok(Losses {
            fg: twin.fg,
            bg: twin.bg,
            ce: twin.ce,
            re,
            total,
        })
    }

    /// Logit maps and binary prediction for one example.
    pub fn predict(&self, ex: &Example) -> Result<Prediction> {
        let mut g = Graph::new();
        let fwd = self.forward(&mut g, ex)?;
        let fg = g.value(fwd.logits.fg).clone();
        let bg = g.value(fwd.logits.bg).clone();
        let mask = infer_mask(&fg, &bg)?;
        Ok(Prediction { fg, bg, mask })
    }
}

#[derive(Clone, Debug)]
pub struct Prediction {
    pub fg: Tensor,
    pub bg: Tensor,
    pub mask: Mask,
}
