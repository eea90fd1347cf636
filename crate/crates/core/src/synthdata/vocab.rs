use std::collections::HashMap;

use crate::error::{Error, Result};

pub const PAD_ID: u32 = 0;
pub const CLS_ID: u32 = 1;
pub const UNK_ID: u32 = 2;

/// Default token length of every expression, `[cls]` included.
pub const MAX_TOKENS: usize = 20;

const RESERVED: [&str; 3] = ["[pad]", "[cls]", "[unk]"];

/// Words used by the expression templates.
pub const WORDS: &[&str] = &[
    "the", "a", "in", "of", "left", "right", "top", "bottom", "center", "above", "below", "small",
    "large", "red", "green", "blue", "yellow", "cyan", "magenta", "white", "orange", "square",
    "circle", "triangle", "bar",
];

/// Bijective word <-> id table with reserved pad/cls/unk ids.
#[derive(Clone, Debug)]
pub struct Vocabulary {
    words: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::from_words(WORDS.iter().copied()).expect("builtin vocabulary is valid")
    }
}

impl Vocabulary {
    /// Reserved tokens first, then `words` in order.
    pub fn from_words<'w>(words: impl IntoIterator<Item = &'w str>) -> Result<Self> {
        let mut vocab = Self {
            words: Vec::new(),
            ids: HashMap::new(),
        };
        for w in RESERVED.iter().copied().chain(words) {
            if vocab.ids.contains_key(w) {
                return Err(Error::Config(format!("duplicate vocabulary word {w:?}")));
            }
            vocab.ids.insert(w.to_string(), vocab.words.len() as u32);
            vocab.words.push(w.to_string());
        }
        Ok(vocab)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> u32 {
        self.ids.get(word).copied().unwrap_or(UNK_ID)
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        self.words.get(id as usize).map(String::as_str)
    }

    /// `[cls]`, then one id per lowercase whitespace-separated word, padded or
    /// truncated to exactly `len` ids.
    pub fn tokenize(&self, text: &str, len: usize) -> Vec<u32> {
        let mut out = Vec::with_capacity(len);
        out.push(CLS_ID);
        out.extend(text.split_whitespace().map(|w| self.id(&w.to_lowercase())));
        out.resize(len, PAD_ID);
        out
    }
}

/// Replace the positions in `[start, end)` with the pad id. The span may not
/// cover `[cls]` at position 0.
pub fn mask_key_object(tokens: &[u32], span: (usize, usize)) -> Result<Vec<u32>> {
    let (start, end) = span;
    if start > end || end > tokens.len() {
        return Err(Error::Usage(format!(
            "noun span {start}..{end} outside {} tokens",
            tokens.len()
        )));
    }
    if start == 0 && end > 0 {
        return Err(Error::Usage(
            "noun span may not cover the [cls] token".into(),
        ));
    }
    let mut out = tokens.to_vec();
    out[start..end].fill(PAD_ID);
    Ok(out)
}
