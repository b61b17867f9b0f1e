//! Word-level vocabulary with four reserved ids.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::Document;

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const MASK_ID: u32 = 2;
pub const GLOBAL_ID: u32 = 3;
pub const NUM_RESERVED: usize = 4;
pub const RESERVED_TOKENS: [&str; NUM_RESERVED] = ["[PAD]", "[UNK]", "[MASK]", "[GLOBAL]"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "VocabFile", into = "VocabFile")]
pub struct Vocabulary {
    tokens: Vec<String>,
    lowercase: bool,
    index: HashMap<String, u32>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VocabFile {
    lowercase: bool,
    tokens: Vec<String>,
}

impl From<VocabFile> for Vocabulary {
    fn from(f: VocabFile) -> Self {
        Vocabulary::from_tokens(f.tokens, f.lowercase)
    }
}

impl From<Vocabulary> for VocabFile {
    fn from(v: Vocabulary) -> Self {
        VocabFile {
            lowercase: v.lowercase,
            tokens: v.tokens,
        }
    }
}

impl Vocabulary {
    /// `tokens` lists every entry in id order, reserved ones included.
    fn from_tokens(tokens: Vec<String>, lowercase: bool) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        Vocabulary {
            tokens,
            lowercase,
            index,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn lowercase(&self) -> bool {
        self.lowercase
    }

    fn normalize<'a>(&self, word: &'a str) -> std::borrow::Cow<'a, str> {
        if self.lowercase {
            word.to_lowercase().into()
        } else {
            word.into()
        }
    }

    pub fn id(&self, word: &str) -> u32 {
        let key = self.normalize(word);
        match self.index.get(key.as_ref()) {
            Some(&id) if id as usize >= NUM_RESERVED => id,
            _ => UNK_ID,
        }
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn encode(&self, doc: &Document) -> Vec<u32> {
        doc.tokens.iter().map(|t| self.id(&t.text)).collect()
    }
}

/// Keeps the most frequent words, ties broken lexicographically, until the
/// vocabulary (reserved ids included) holds `max_size` entries.
pub fn build_vocab<'a>(corpus: impl IntoIterator<Item = &'a str>, max_size: usize, lowercase: bool) -> Vocabulary {
    let mut counts: HashMap<String, usize> = HashMap::new();
    for word in corpus {
        let w = if lowercase { word.to_lowercase() } else { word.to_string() };
        if RESERVED_TOKENS.contains(&w.as_str()) {
            continue;
        }
        *counts.entry(w).or_default() += 1;
    }
    let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let mut tokens: Vec<String> = RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
    tokens.extend(ranked.into_iter().take(max_size.saturating_sub(NUM_RESERVED)).map(|(w, _)| w));
    Vocabulary::from_tokens(tokens, lowercase)
}
