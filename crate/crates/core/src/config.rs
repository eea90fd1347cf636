//! Flat JSON model and training configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthdata::{Vocabulary, MAX_TOKENS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    /// Channels of the first vision stage; doubled at every later stage.
    pub base_channels: usize,
    /// Shared text / fusion width.
    pub text_dim: usize,
    pub max_tokens: usize,
    pub vocab_size: usize,
    pub heads: usize,
    pub text_layers_per_stage: usize,
    /// Hidden width of every MLP block as a multiple of its input width.
    pub mlp_ratio: usize,
    pub vision_kernels: Vec<usize>,
    pub text_kernels: Vec<usize>,
    /// Per-stage switch for the vision/text exchange.
    pub fusion_stages: [bool; 4],
    pub decoder_iterations: usize,
    pub bg_pool_sizes: Vec<usize>,
    pub bg_tokens: usize,
    /// When false the background stream is not trained and the foreground
    /// logit is thresholded at zero.
    pub use_bg_branch: bool,
    pub lambda: f64,
    pub eta: f64,
    pub lr_encoder: f64,
    pub lr_other: f64,
    pub poly_power: f64,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            patch_size: 4,
            base_channels: 32,
            text_dim: 64,
            max_tokens: MAX_TOKENS,
            vocab_size: Vocabulary::default().len(),
            heads: 4,
            text_layers_per_stage: 1,
            mlp_ratio: 2,
            vision_kernels: vec![1, 3, 5],
            text_kernels: vec![1, 2, 3],
            fusion_stages: [true; 4],
            decoder_iterations: 2,
            bg_pool_sizes: vec![1, 4],
            bg_tokens: 5,
            use_bg_branch: true,
            lambda: 0.6,
            eta: 0.1,
            lr_encoder: 1e-5,
            lr_other: 1e-4,
            poly_power: 0.9,
            weight_decay: 0.01,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            epochs: 300,
            batch_size: 8,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Small configuration used for finite-difference checks.
    pub fn micro() -> Self {
        Self {
            image_size: 16,
            patch_size: 2,
            base_channels: 4,
            text_dim: 8,
            max_tokens: 5,
            heads: 2,
            mlp_ratio: 2,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size * 8) {
            return bad(format!(
                "image size {} must be a multiple of 8 x patch size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.heads == 0
            || !self.text_dim.is_multiple_of(self.heads)
            || !self.base_channels.is_multiple_of(self.heads)
        {
            return bad(format!(
                "{} heads must divide text dim {} and base channels {}",
                self.heads, self.text_dim, self.base_channels
            ));
        }
        if self.base_channels == 0 || self.mlp_ratio == 0 || self.text_layers_per_stage == 0 {
            return bad("channel, mlp ratio and layer counts must be positive".into());
        }
        if self.max_tokens < 2 {
            return bad(format!(
                "max_tokens {} leaves no room after [cls]",
                self.max_tokens
            ));
        }
        if self.vocab_size < 3 {
            return bad(format!(
                "vocab size {} below the reserved ids",
                self.vocab_size
            ));
        }
        if self.vision_kernels.is_empty() || self.vision_kernels.iter().any(|k| k % 2 == 0) {
            return bad(format!(
                "vision kernels {:?} must be odd and non-empty",
                self.vision_kernels
            ));
        }
        if self.text_kernels.is_empty()
            || self
                .text_kernels
                .iter()
                .any(|&k| k == 0 || k > self.max_tokens + 2)
        {
            return bad(format!("text kernels {:?} out of range", self.text_kernels));
        }
        if self.decoder_iterations == 0 {
            return bad("decoder_iterations must be at least 1".into());
        }
        let pooled: usize = self.bg_pool_sizes.iter().sum();
        if self.bg_pool_sizes.is_empty() || pooled != self.bg_tokens {
            return bad(format!(
                "pool sizes {:?} sum to {pooled}, expected bg_tokens = {}",
                self.bg_pool_sizes, self.bg_tokens
            ));
        }
        if self
            .bg_pool_sizes
            .iter()
            .any(|&r| r == 0 || r > self.max_tokens)
        {
            return bad(format!(
                "pool sizes {:?} must lie in 1..=max_tokens",
                self.bg_pool_sizes
            ));
        }
        if !(0.0..=1.0).contains(&self.lambda) || self.eta < 0.0 {
            return bad(format!(
                "lambda {} / eta {} out of range",
                self.lambda, self.eta
            ));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("epochs and batch size must be positive".into());
        }
        Ok(())
    }

    /// `(channels, height, width)` of each vision stage.
    pub fn stage_shapes(&self) -> [[usize; 3]; 4] {
        let h = self.image_size / self.patch_size;
        std::array::from_fn(|i| [self.base_channels << i, h >> i, h >> i])
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::format(path, e.to_string()))?;
        let cfg: Self =
            serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
