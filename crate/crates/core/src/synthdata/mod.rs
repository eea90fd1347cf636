//! Synthetic referring-segmentation corpus: rendered shape scenes, templated
//! expressions with recorded key-object spans, tokenization and masking.

mod io;
mod scene;
mod vocab;

pub use io::{load_corpus, save_corpus, IndexRecord, INDEX_FILE};
pub use scene::{
    Cell, Color, Description, Relation, SceneObject, SceneSpec, Shape, Size, Template, COLORS,
    SHAPES, TEMPLATES,
};
pub use vocab::{mask_key_object, Vocabulary, CLS_ID, MAX_TOKENS, PAD_ID, UNK_ID, WORDS};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Mask, RgbImage};

/// Scenes drawn before falling back to the always-unique color+position form.
const MAX_SCENE_ATTEMPTS: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub image_size: usize,
    pub count: usize,
    pub seed: u64,
    pub max_tokens: usize,
    pub templates: Vec<Template>,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            count: 32,
            seed: 0,
            max_tokens: MAX_TOKENS,
            templates: TEMPLATES.to_vec(),
        }
    }
}

/// One image / expression / mask triple.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: RgbImage,
    pub expression: String,
    pub tokens: Vec<u32>,
    pub masked_tokens: Vec<u32>,
    /// Token positions `[start, end)` of the key-object phrase.
    pub noun_span: (usize, usize),
    pub gt_mask: Mask,
    pub category: u8,
}

impl Sample {
    pub fn size(&self) -> (usize, usize) {
        (self.image.height, self.image.width)
    }
}

/// Deterministic sample `index` of the corpus described by `config`, with the
/// scene it was rendered from. Depends only on `(config, index)`.
pub fn generate_sample(
    config: &GenConfig,
    vocab: &Vocabulary,
    index: usize,
) -> Result<(Sample, SceneSpec)> {
    if config.templates.is_empty() {
        return Err(Error::Config("no expression templates configured".into()));
    }
    if config.image_size < 12 {
        return Err(Error::Config(format!(
            "image size {} too small",
            config.image_size
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(index as u64);
    let shape = SHAPES[index % SHAPES.len()];
    let mut template = config.templates[rng.random_range(0..config.templates.len())];
    for attempt in 0.. {
        if attempt == MAX_SCENE_ATTEMPTS {
            template = Template::ColorShapePosition;
        }
        let scene = SceneSpec::random(config.image_size, shape, &mut rng);
        let masks: Vec<Mask> = (0..scene.objects.len())
            .map(|i| scene.object_mask(i))
            .collect();
        if masks.iter().any(Mask::is_empty) {
            continue;
        }
        let Some(desc) = Description::build(template, &scene, 0, &mut rng) else {
            continue;
        };
        if desc.referents(&scene) != [0] {
            continue;
        }
        let image = scene.render(&mut rng);
        let (expression, (ws, we)) = desc.text();
        let tokens = vocab.tokenize(&expression, config.max_tokens);
        let n = config.max_tokens;
        let noun_span = ((ws + 1).min(n), (we + 1).min(n));
        let masked_tokens = mask_key_object(&tokens, noun_span)?;
        let sample = Sample {
            id: format!("{index:06}"),
            image,
            expression,
            tokens,
            masked_tokens,
            noun_span,
            gt_mask: masks.into_iter().next().unwrap(),
            category: shape.category(),
        };
        return Ok((sample, scene));
    }
    unreachable!()
}

pub fn generate_corpus(config: &GenConfig) -> Result<Vec<Sample>> {
    let vocab = Vocabulary::default();
    (0..config.count)
        .map(|i| generate_sample(config, &vocab, i).map(|(s, _)| s))
        .collect()
}

/// Key-object span for free text: the run of size/color words ending in the
/// first shape word. Empty span when the text names no shape.
pub fn infer_noun_span(tokens: &[u32], vocab: &Vocabulary) -> (usize, usize) {
    let is = |id: u32, pred: &dyn Fn(&str) -> bool| vocab.word(id).is_some_and(pred);
    let Some(head) = tokens
        .iter()
        .position(|&t| is(t, &|w| Shape::from_name(w).is_some()))
    else {
        return (0, 0);
    };
    let mut start = head;
    while start > 1
        && is(tokens[start - 1], &|w| {
            Color::from_name(w).is_some() || Size::from_name(w).is_some()
        })
    {
        start -= 1;
    }
    (start.max(1), head + 1)
}
