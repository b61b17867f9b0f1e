//! Synthetic key-value forms.
//!
//! Each page has a header band, a stack of rows with a key phrase in the left
//! column and a value phrase in the right column, and a footer of unlabeled
//! noise words. A fraction of the rows are decoys: they reuse the key and
//! value word pools and the same geometry but are labeled with the fourth
//! ("other") label, so only the raster can tell them apart. With
//! `label_intensity` on, each token is drawn as a rectangle whose gray level
//! depends on its label; `separator_lines` draws rules between rows.

use std::collections::HashSet;

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{BBox, Document, Entity, GrayImage, Token};
use crate::error::{Error, Result};
use crate::rng::{hash_str, rng_from};

const CHAR_W: i64 = 6;
const TOKEN_H: i64 = 10;
const WORD_GAP: i64 = 4;
const MAX_SYLLABLES: i64 = 3;
const MAX_PHRASE: usize = 3;
const ROW_PITCH_MAX: i64 = 30;
const FIRST_ROW_MAX: i64 = 40;
const BACKGROUND: f32 = 1.0;
const NEUTRAL_INK: f32 = 0.4;
const NOISE_INK: f32 = 0.85;
const RULE_INK: f32 = 0.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticFormSpec {
    pub seed: u64,
    pub num_documents: usize,
    /// Index of the first generated document; disjoint ranges give disjoint splits.
    pub first_index: usize,
    pub id_prefix: String,
    pub page_width: u32,
    pub page_height: u32,
    /// Roles in order: header, key, value, other.
    pub labels: Vec<String>,
    /// Distinct words shared by all pools.
    pub vocab_size: usize,
    pub min_rows: usize,
    pub max_rows: usize,
    /// Probability that a key-value row is labeled "other" instead.
    pub decoy_rate: f64,
    pub max_noise_tokens: usize,
    pub label_intensity: bool,
    pub separator_lines: bool,
}

impl Default for SyntheticFormSpec {
    fn default() -> Self {
        SyntheticFormSpec {
            seed: 0,
            num_documents: 200,
            first_index: 0,
            id_prefix: "synth".into(),
            page_width: 256,
            page_height: 256,
            labels: ["header", "question", "answer", "other"].map(String::from).to_vec(),
            vocab_size: 240,
            min_rows: 3,
            max_rows: 6,
            decoy_rate: 0.3,
            max_noise_tokens: 2,
            label_intensity: true,
            separator_lines: true,
        }
    }
}

/// Word pools by role.
struct Lexicon {
    header: Vec<String>,
    key: Vec<String>,
    value: Vec<String>,
    noise: Vec<String>,
}

fn lexicon(spec: &SyntheticFormSpec) -> Lexicon {
    const CONSONANTS: &[u8] = b"bcdfghjklmnprstvz";
    const VOWELS: &[u8] = b"aeiou";
    let mut rng = rng_from(&[spec.seed, hash_str("lexicon")]);
    let mut seen = HashSet::new();
    let mut words = Vec::with_capacity(spec.vocab_size);
    while words.len() < spec.vocab_size {
        let syllables = rng.random_range(1..=MAX_SYLLABLES);
        let mut w = String::new();
        for _ in 0..syllables {
            w.push(*CONSONANTS.choose(&mut rng).unwrap() as char);
            w.push(*VOWELS.choose(&mut rng).unwrap() as char);
        }
        if seen.insert(w.clone()) {
            words.push(w);
        }
    }
    let n = words.len();
    let cut = |f: f64| ((n as f64 * f).round() as usize).clamp(1, n);
    let (h, k, v) = (cut(0.1), cut(0.45), cut(0.8));
    Lexicon {
        header: words[..h].to_vec(),
        key: words[h..k].to_vec(),
        value: words[k..v].to_vec(),
        noise: words[v..].to_vec(),
    }
}

fn check(spec: &SyntheticFormSpec) -> Result<()> {
    let bad = |msg: String| Err(Error::Data(format!("synthetic spec: {msg}")));
    if spec.labels.len() != 4 || spec.labels.iter().collect::<HashSet<_>>().len() != 4 {
        return bad("labels must be four distinct names (header, key, value, other roles)".into());
    }
    if spec.vocab_size < 40 {
        return bad(format!("vocab_size {} is below the minimum of 40", spec.vocab_size));
    }
    if spec.min_rows == 0 || spec.min_rows > spec.max_rows {
        return bad(format!("row range {}..={} is empty", spec.min_rows, spec.max_rows));
    }
    if !(0.0..=1.0).contains(&spec.decoy_rate) {
        return bad(format!("decoy_rate {} outside [0, 1]", spec.decoy_rate));
    }
    // phrases are clipped at their column edge, but each column must fit one long word
    let need_w = 4 * (2 * MAX_SYLLABLES * CHAR_W) + 16;
    let need_h = FIRST_ROW_MAX + spec.max_rows as i64 * ROW_PITCH_MAX + 4 + TOKEN_H;
    if (spec.page_width as i64) < need_w || (spec.page_height as i64) < need_h {
        return bad(format!(
            "page {}x{} cannot hold {} rows (needs at least {need_w}x{need_h})",
            spec.page_width, spec.page_height, spec.max_rows
        ));
    }
    Ok(())
}

struct Builder<'a> {
    spec: &'a SyntheticFormSpec,
    tokens: Vec<Token>,
    inks: Vec<f32>,
    entities: Vec<Entity>,
}

impl Builder<'_> {
    /// Lays out words left to right from `x`, stopping at `limit`.
    fn phrase(&mut self, rng: &mut ChaCha8Rng, pool: &[String], x: i64, y: i64, limit: i64, role: usize) {
        let count = rng.random_range(1..=MAX_PHRASE);
        let start = self.tokens.len();
        let mut x = x;
        for k in 0..count {
            let text = pool.choose(rng).unwrap().clone();
            let w = text.len() as i64 * CHAR_W;
            if k > 0 && x + w > limit {
                break;
            }
            let index = self.tokens.len();
            self.tokens.push(Token {
                text,
                bbox: BBox::new(x, y, x + w, y + TOKEN_H),
                index,
            });
            self.inks.push(if self.spec.label_intensity { 0.1 + 0.2 * role as f32 } else { NEUTRAL_INK });
            x += w + WORD_GAP;
        }
        self.entities.push(Entity {
            label: self.spec.labels[role].clone(),
            start,
            end: self.tokens.len() - 1,
        });
    }

    /// A single unlabeled word.
    fn phrase_noise(&mut self, rng: &mut ChaCha8Rng, pool: &[String], x: i64, y: i64, limit: i64) {
        let text = pool.choose(rng).unwrap().clone();
        let w = (text.len() as i64 * CHAR_W).min(limit - x).max(CHAR_W);
        let index = self.tokens.len();
        self.tokens.push(Token {
            text,
            bbox: BBox::new(x, y, x + w, y + TOKEN_H),
            index,
        });
        self.inks.push(if self.spec.label_intensity { NOISE_INK } else { NEUTRAL_INK });
    }
}

fn generate_one(spec: &SyntheticFormSpec, lex: &Lexicon, index: usize) -> Document {
    let mut rng = rng_from(&[spec.seed, hash_str("document"), index as u64]);
    let (pw, ph) = (spec.page_width as i64, spec.page_height as i64);
    let mut b = Builder {
        spec,
        tokens: Vec::new(),
        inks: Vec::new(),
        entities: Vec::new(),
    };
    let margin = 8 + rng.random_range(0..8);
    let value_col = pw * 45 / 100 + rng.random_range(0..16);
    let pitch = 24 + rng.random_range(0..=ROW_PITCH_MAX - 24);
    let header_x = pw / 3 + rng.random_range(-12..12);
    let header_y = 6 + rng.random_range(0..4);
    b.phrase(&mut rng, &lex.header, header_x, header_y, pw - margin, 0);

    let first_row = 30 + rng.random_range(0..=FIRST_ROW_MAX - 30);
    let rows = rng.random_range(spec.min_rows..=spec.max_rows);
    let mut rule_ys = vec![first_row - (first_row - 16) / 2];
    for r in 0..rows {
        let y = first_row + r as i64 * pitch + rng.random_range(0..3);
        let decoy = rng.random_bool(spec.decoy_rate);
        let (key_role, value_role) = if decoy { (3, 3) } else { (1, 2) };
        let kx = margin + rng.random_range(0..4);
        b.phrase(&mut rng, &lex.key, kx, y, value_col - WORD_GAP, key_role);
        let vx = value_col + rng.random_range(0..6);
        b.phrase(&mut rng, &lex.value, vx, y, pw - margin, value_role);
        rule_ys.push(y + TOKEN_H + (pitch - TOKEN_H) / 2);
    }

    let footer_y = first_row + rows as i64 * pitch + 4;
    let noise = rng.random_range(0..=spec.max_noise_tokens);
    let slot = (pw - 2 * margin) / spec.max_noise_tokens.max(1) as i64;
    for k in 0..noise {
        let x = margin + k as i64 * slot + rng.random_range(0..8);
        b.phrase_noise(&mut rng, &lex.noise, x, footer_y.min(ph - TOKEN_H), x + slot - WORD_GAP);
    }

    let mut image = GrayImage::filled(pw as usize, ph as usize, BACKGROUND);
    if spec.separator_lines {
        for &y in &rule_ys {
            image.fill_rect(4, y, pw - 4, y + 1, RULE_INK);
        }
    }
    for (t, &ink) in b.tokens.iter().zip(&b.inks) {
        image.fill_rect(t.bbox.x0, t.bbox.y0, t.bbox.x1, t.bbox.y1, ink);
    }
    let id = format!("{}-{index:05}", spec.id_prefix);
    Document {
        image_path: format!("images/{id}.pgm"),
        id,
        page_width: spec.page_width,
        page_height: spec.page_height,
        tokens: b.tokens,
        image,
        entities: b.entities,
    }
}

/// Generates `spec.num_documents` forms; a pure function of the spec.
pub fn generate_synthetic_corpus(spec: &SyntheticFormSpec) -> Result<Vec<Document>> {
    check(spec)?;
    if spec.num_documents == 0 {
        return Ok(Vec::new());
    }
    let lex = lexicon(spec);
    let docs: Vec<Document> = (spec.first_index..spec.first_index + spec.num_documents)
        .map(|i| generate_one(spec, &lex, i))
        .collect();
    for d in &docs {
        d.validate()?;
    }
    Ok(docs)
}
