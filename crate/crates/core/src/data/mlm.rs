//! Masked-language-model position sampling with 80/10/10 replacement.

use rand::Rng;

use super::vocab::{GLOBAL_ID, MASK_ID, NUM_RESERVED, PAD_ID};
use crate::error::{Error, Result};
use crate::rng::rng_from;

pub const DEFAULT_MLM_RATE: f64 = 0.15;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Replacement {
    Mask,
    Random(u32),
    Keep,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MlmPlan {
    pub positions: Vec<usize>,
    pub replacements: Vec<Replacement>,
    pub original_ids: Vec<u32>,
}

impl MlmPlan {
    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    /// Input ids with the plan's replacements applied.
    pub fn apply(&self, ids: &[u32]) -> Vec<u32> {
        let mut out = ids.to_vec();
        for (&p, r) in self.positions.iter().zip(&self.replacements) {
            match *r {
                Replacement::Mask => out[p] = MASK_ID,
                Replacement::Random(id) => out[p] = id,
                Replacement::Keep => {}
            }
        }
        out
    }
}

/// Selects each non-PAD, non-GLOBAL token with probability `rate`. Selected
/// tokens become MASK (80%), a uniformly drawn non-reserved id (10%) or stay
/// unchanged (10%).
pub fn sample_mlm(ids: &[u32], vocab_size: usize, rate: f64, seed: u64) -> Result<MlmPlan> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::invalid("sample_mlm", format!("rate {rate} outside [0, 1]")));
    }
    let mut rng = rng_from(&[seed, 0x6d6c6d]);
    let mut plan = MlmPlan::default();
    for (pos, &id) in ids.iter().enumerate() {
        // draw both numbers for every token so the stream never depends on the outcome
        let pick: f64 = rng.random();
        let kind: f64 = rng.random();
        let random_id = if vocab_size > NUM_RESERVED {
            rng.random_range(NUM_RESERVED as u32..vocab_size as u32)
        } else {
            id
        };
        if id == PAD_ID || id == GLOBAL_ID || pick >= rate {
            continue;
        }
        let replacement = if kind < 0.8 {
            Replacement::Mask
        } else if kind < 0.9 {
            Replacement::Random(random_id)
        } else {
            Replacement::Keep
        };
        plan.positions.push(pos);
        plan.replacements.push(replacement);
        plan.original_ids.push(id);
    }
    Ok(plan)
}
