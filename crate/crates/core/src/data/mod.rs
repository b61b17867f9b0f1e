//! Documents and everything needed to get them off disk: the dataset schema,
//! raster codecs, the word vocabulary, MLM mask plans and a synthetic form
//! generator.

mod dataset;
mod image;
mod mlm;
mod synth;
mod vocab;

pub use dataset::{load_dataset, save_dataset, write_dataset_json};
pub use image::{encode_pgm, load_image, parse_pnm, save_pgm, GrayImage};
pub use mlm::{sample_mlm, MlmPlan, Replacement, DEFAULT_MLM_RATE};
pub use synth::{generate_synthetic_corpus, SyntheticFormSpec};
pub use vocab::{build_vocab, Vocabulary, GLOBAL_ID, MASK_ID, NUM_RESERVED, PAD_ID, RESERVED_TOKENS, UNK_ID};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box in page pixels, serialized as `[x0, y0, x1, y1]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[i64; 4]", into = "[i64; 4]")]
pub struct BBox {
    pub x0: i64,
    pub y0: i64,
    pub x1: i64,
    pub y1: i64,
}

impl From<[i64; 4]> for BBox {
    fn from([x0, y0, x1, y1]: [i64; 4]) -> Self {
        BBox { x0, y0, x1, y1 }
    }
}

impl From<BBox> for [i64; 4] {
    fn from(b: BBox) -> Self {
        [b.x0, b.y0, b.x1, b.y1]
    }
}

impl BBox {
    pub fn new(x0: i64, y0: i64, x1: i64, y1: i64) -> Self {
        BBox { x0, y0, x1, y1 }
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x0 + self.x1) as f64 / 2.0, (self.y0 + self.y1) as f64 / 2.0)
    }

    pub fn width(&self) -> i64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> i64 {
        self.y1 - self.y0
    }

    /// Smallest box containing both.
    pub fn union(&self, other: &BBox) -> BBox {
        BBox {
            x0: self.x0.min(other.x0),
            y0: self.y0.min(other.y0),
            x1: self.x1.max(other.x1),
            y1: self.y1.max(other.y1),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Token {
    pub text: String,
    pub bbox: BBox,
    /// Position in OCR reading order.
    pub index: usize,
}

/// Labeled span of tokens, `end` inclusive.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Entity {
    pub label: String,
    pub start: usize,
    pub end: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Document {
    pub id: String,
    pub page_width: u32,
    pub page_height: u32,
    pub tokens: Vec<Token>,
    pub image: GrayImage,
    /// Image location relative to the dataset file.
    pub image_path: String,
    pub entities: Vec<Entity>,
}

impl Document {
    fn schema(&self, field: impl Into<String>, msg: impl Into<String>) -> Error {
        Error::Schema {
            doc: self.id.clone(),
            field: field.into(),
            msg: msg.into(),
        }
    }

    /// Checks every structural invariant, reporting the first failing field.
    pub fn validate(&self) -> Result<()> {
        if self.page_width == 0 || self.page_height == 0 {
            return Err(self.schema("page_width", "page dimensions must be positive"));
        }
        if self.image.width != self.page_width as usize || self.image.height != self.page_height as usize {
            return Err(self.schema(
                "image",
                format!(
                    "raster is {}x{}, page is {}x{}",
                    self.image.width, self.image.height, self.page_width, self.page_height
                ),
            ));
        }
        let (pw, ph) = (self.page_width as i64, self.page_height as i64);
        for (i, t) in self.tokens.iter().enumerate() {
            if t.index != i {
                return Err(self.schema(format!("tokens[{i}].index"), "indices must be contiguous from 0"));
            }
            let b = t.bbox;
            if b.x0 > b.x1 || b.y0 > b.y1 {
                return Err(self.schema(format!("tokens[{i}].box"), format!("inverted box {:?}", <[i64; 4]>::from(b))));
            }
            if b.x0 < 0 || b.y0 < 0 || b.x1 > pw || b.y1 > ph {
                return Err(self.schema(format!("tokens[{i}].box"), "box lies outside the page"));
            }
        }
        let mut order: Vec<usize> = (0..self.entities.len()).collect();
        for (i, e) in self.entities.iter().enumerate() {
            if e.start > e.end {
                return Err(self.schema(format!("entities[{i}]"), format!("start {} after end {}", e.start, e.end)));
            }
            if e.end >= self.tokens.len() {
                return Err(self.schema(format!("entities[{i}].end"), format!("{} is past the last token", e.end)));
            }
        }
        order.sort_by_key(|&i| (self.entities[i].start, self.entities[i].end));
        for w in order.windows(2) {
            let (a, b) = (&self.entities[w[0]], &self.entities[w[1]]);
            if b.start <= a.end {
                return Err(self.schema(
                    format!("entities[{}]", w[1]),
                    format!("overlaps entities[{}] over tokens {}..={}", w[0], b.start, a.end.min(b.end)),
                ));
            }
        }
        Ok(())
    }

    /// Drops tokens beyond `max_tokens` together with any entity touching them.
    pub fn truncated(&self, max_tokens: usize) -> Document {
        if self.tokens.len() <= max_tokens {
            return self.clone();
        }
        let mut doc = self.clone();
        doc.tokens.truncate(max_tokens);
        doc.entities.retain(|e| e.end < max_tokens);
        doc
    }

    pub fn token_centers(&self) -> Vec<(f64, f64)> {
        self.tokens.iter().map(|t| t.bbox.center()).collect()
    }
}
