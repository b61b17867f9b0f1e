//! BIOES tag indices: `0` is Outside, `1 + 4 * label + {B, I, E, S}`.

use serde::{Deserialize, Serialize};

use crate::data::Entity;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const OUTSIDE: usize = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Position {
    Begin = 0,
    Inside = 1,
    End = 2,
    Single = 3,
}

pub fn tag_index(label: usize, pos: Position) -> usize {
    1 + 4 * label + pos as usize
}

/// Inverse of [`tag_index`]; `None` for Outside.
pub fn split_tag(tag: usize) -> Option<(usize, Position)> {
    if tag == OUTSIDE {
        return None;
    }
    let pos = match (tag - 1) % 4 {
        0 => Position::Begin,
        1 => Position::Inside,
        2 => Position::End,
        _ => Position::Single,
    };
    Some(((tag - 1) / 4, pos))
}

/// A predicted or gold span, end inclusive.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EntityPrediction {
    pub label: String,
    pub start: usize,
    pub end: usize,
}

impl From<&Entity> for EntityPrediction {
    fn from(e: &Entity) -> Self {
        EntityPrediction {
            label: e.label.clone(),
            start: e.start,
            end: e.end,
        }
    }
}

/// Gold tag per token. Spans must not overlap and every label must be known.
pub fn encode_tags(entities: &[Entity], num_tokens: usize, labels: &[String]) -> Result<Vec<usize>> {
    let mut tags = vec![OUTSIDE; num_tokens];
    for e in entities {
        let l = labels
            .iter()
            .position(|x| *x == e.label)
            .ok_or_else(|| Error::Data(format!("entity label `{}` is not in the model's label set {labels:?}", e.label)))?;
        if e.start > e.end || e.end >= num_tokens {
            return Err(Error::Data(format!("span {}..={} outside {num_tokens} tokens", e.start, e.end)));
        }
        if tags[e.start..=e.end].iter().any(|&t| t != OUTSIDE) {
            return Err(Error::Data(format!("span {}..={} overlaps another entity", e.start, e.end)));
        }
        if e.start == e.end {
            tags[e.start] = tag_index(l, Position::Single);
        } else {
            tags[e.start] = tag_index(l, Position::Begin);
            for t in &mut tags[e.start + 1..e.end] {
                *t = tag_index(l, Position::Inside);
            }
            tags[e.end] = tag_index(l, Position::End);
        }
    }
    Ok(tags)
}

/// Keeps `B I* E` runs of one label and `S`; drops every other fragment.
pub fn decode_tags(tags: &[usize], labels: &[String]) -> Vec<EntityPrediction> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < tags.len() {
        match split_tag(tags[i]) {
            Some((l, Position::Single)) => {
                out.push(EntityPrediction {
                    label: labels[l].clone(),
                    start: i,
                    end: i,
                });
                i += 1;
            }
            Some((l, Position::Begin)) => {
                let mut j = i + 1;
                while j < tags.len() && tags[j] == tag_index(l, Position::Inside) {
                    j += 1;
                }
                if j < tags.len() && tags[j] == tag_index(l, Position::End) {
                    out.push(EntityPrediction {
                        label: labels[l].clone(),
                        start: i,
                        end: j,
                    });
                    j += 1;
                }
                i = j;
            }
            _ => i += 1,
        }
    }
    out
}

/// Row-wise argmax of `[n, tags]` logits. Ties go to the lower index.
pub fn argmax_tags(logits: &Tensor) -> Vec<usize> {
    let c = logits.last_dim();
    logits
        .data()
        .chunks(c)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (j, &v)| if v > best.1 { (j, v) } else { best })
                .0
        })
        .collect()
}

pub fn decode_bioes(logits: &Tensor, labels: &[String]) -> Vec<EntityPrediction> {
    decode_tags(&argmax_tags(logits), labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn labels() -> Vec<String> {
        vec!["q".into(), "a".into()]
    }

    fn ent(label: &str, start: usize, end: usize) -> EntityPrediction {
        EntityPrediction {
            label: label.into(),
            start,
            end,
        }
    }

    const BQ: usize = 1;
    const IQ: usize = 2;
    const EQ: usize = 3;
    const SA: usize = 8;

    #[test]
    fn tag_layout() {
        assert_eq!(tag_index(0, Position::Begin), BQ);
        assert_eq!(tag_index(1, Position::Single), SA);
        assert_eq!(split_tag(SA), Some((1, Position::Single)));
        assert_eq!(split_tag(OUTSIDE), None);
    }

    #[test]
    fn well_formed_span() {
        assert_eq!(decode_tags(&[BQ, IQ, EQ, OUTSIDE], &labels()), vec![ent("q", 0, 2)]);
    }

    #[test]
    fn inside_without_begin_is_dropped() {
        assert!(decode_tags(&[IQ, EQ], &labels()).is_empty());
    }

    #[test]
    fn singles() {
        assert_eq!(decode_tags(&[SA, OUTSIDE, SA], &labels()), vec![ent("a", 0, 0), ent("a", 2, 2)]);
    }

    #[test]
    fn label_switch_and_dangling_begin_are_dropped() {
        let ea = tag_index(1, Position::End);
        assert!(decode_tags(&[BQ, IQ, ea], &labels()).is_empty());
        assert!(decode_tags(&[BQ, IQ, OUTSIDE], &labels()).is_empty());
        // a fragment does not swallow the entity that follows it
        assert_eq!(decode_tags(&[BQ, SA], &labels()), vec![ent("a", 1, 1)]);
        assert_eq!(decode_tags(&[BQ, BQ, EQ], &labels()), vec![ent("q", 1, 2)]);
    }

    #[test]
    fn argmax_breaks_ties_low() {
        let t = Tensor::from_slice(&[0.5, 0.5, 0.1, 0.0, 2.0, 2.0], &[2, 3]).unwrap();
        assert_eq!(argmax_tags(&t), vec![0, 1]);
    }

    #[test]
    fn unknown_label_is_an_error() {
        let e = Entity {
            label: "zzz".into(),
            start: 0,
            end: 0,
        };
        assert!(encode_tags(&[e], 3, &labels()).is_err());
    }

    fn spans() -> impl Strategy<Value = (usize, Vec<Entity>)> {
        (1usize..40, proptest::collection::vec((0usize..3, 1usize..5, 0usize..2), 0..10)).prop_map(|(n, parts)| {
            let mut ents = Vec::new();
            let mut cursor = 0;
            for (gap, len, label) in parts {
                let start = cursor + gap;
                let end = start + len - 1;
                if end >= n {
                    break;
                }
                ents.push(Entity {
                    label: ["q", "a"][label].into(),
                    start,
                    end,
                });
                cursor = end + 1;
            }
            (n, ents)
        })
    }

    proptest! {
        #[test]
        fn decode_inverts_encode((n, ents) in spans()) {
            let tags = encode_tags(&ents, n, &labels()).unwrap();
            let decoded = decode_tags(&tags, &labels());
            let gold: Vec<EntityPrediction> = ents.iter().map(EntityPrediction::from).collect();
            prop_assert_eq!(decoded, gold);
        }
    }
}
