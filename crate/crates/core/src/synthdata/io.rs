use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Sample;
use crate::error::{Error, Result};
use crate::image::{Mask, RgbImage};

pub const INDEX_FILE: &str = "index.jsonl";

/// One line of the corpus index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IndexRecord {
    pub id: String,
    pub expression: String,
    pub tokens: Vec<u32>,
    pub masked_tokens: Vec<u32>,
    pub noun_span: [usize; 2],
    pub category: u8,
    pub image_path: String,
    pub mask_path: String,
}

/// Write images (P6), masks (P5) and finally the JSON-lines index.
pub fn save_corpus(dir: &Path, samples: &[Sample]) -> Result<()> {
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("masks"))?;
    let mut index = Vec::new();
    for s in samples {
        let image_path = format!("images/{}.ppm", s.id);
        let mask_path = format!("masks/{}.pgm", s.id);
        s.image.save(&dir.join(&image_path))?;
        s.gt_mask.save(&dir.join(&mask_path))?;
        let rec = IndexRecord {
            id: s.id.clone(),
            expression: s.expression.clone(),
            tokens: s.tokens.clone(),
            masked_tokens: s.masked_tokens.clone(),
            noun_span: [s.noun_span.0, s.noun_span.1],
            category: s.category,
            image_path,
            mask_path,
        };
        serde_json::to_writer(&mut index, &rec)?;
        index.push(b'\n');
    }
    let mut f = fs::File::create(dir.join(INDEX_FILE))?;
    f.write_all(&index)?;
    Ok(())
}

pub fn load_corpus(dir: &Path) -> Result<Vec<Sample>> {
    let index_path = dir.join(INDEX_FILE);
    let file =
        fs::File::open(&index_path).map_err(|e| Error::format(&index_path, e.to_string()))?;
    let mut samples = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: IndexRecord = serde_json::from_str(&line)
            .map_err(|e| Error::format(&index_path, format!("line {}: {e}", lineno + 1)))?;
        let image_path = dir.join(&rec.image_path);
        let mask_path = dir.join(&rec.mask_path);
        let image = RgbImage::load(&image_path)?;
        let gt_mask = Mask::load(&mask_path)?;
        if (gt_mask.width, gt_mask.height) != (image.width, image.height) {
            return Err(Error::format(
                &mask_path,
                format!(
                    "mask is {}x{} but image is {}x{}",
                    gt_mask.width, gt_mask.height, image.width, image.height
                ),
            ));
        }
        let [start, end] = rec.noun_span;
        if rec.tokens.len() != rec.masked_tokens.len() || start > end || end > rec.tokens.len() {
            return Err(Error::format(
                &index_path,
                format!("line {}: inconsistent token fields", lineno + 1),
            ));
        }
        samples.push(Sample {
            id: rec.id,
            image,
            expression: rec.expression,
            tokens: rec.tokens,
            masked_tokens: rec.masked_tokens,
            noun_span: (start, end),
            gt_mask,
            category: rec.category,
        });
    }
    Ok(samples)
}
