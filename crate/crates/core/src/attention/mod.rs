//! Rich Attention over an ETC local/global sparsity pattern.
//!
//! Scores add to the usual `q . k` two spatial terms per page axis: the
//! log-likelihood of the observed token order under a learned probability,
//! and a Gaussian penalty on the log pixel distance around a learned mean.

mod layer;
mod rich;

pub use layer::{AttentionOutput, RichAttentionLayer};
pub use rich::{distance_term, order_term, rich_score, RichHeadScalars, P_CLAMP};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EtcConfig {
    pub local_radius: usize,
    pub num_global: usize,
    pub num_heads: usize,
    pub hidden: usize,
}

impl EtcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.local_radius == 0 || self.num_global == 0 || self.num_heads == 0 {
            return Err(Error::Config("local radius, global count and heads must be positive".into()));
        }
        if self.hidden % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "hidden {} is not divisible by {} heads",
                self.hidden, self.num_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.num_heads
    }
}

/// `1` when `xi < xj`, else `0`.
pub fn order_indicator(xi: f64, xj: f64) -> f64 {
    if xi < xj {
        1.0
    } else {
        0.0
    }
}

/// `ln(1 + |xi - xj|)`.
pub fn log_distance(xi: f64, xj: f64) -> f64 {
    (xi - xj).abs().ln_1p()
}

/// Box centers in page pixels for every sequence position. The first
/// `num_global` positions are global tokens and carry `(0, 0)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenGeometry {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    pub num_global: usize,
}

impl TokenGeometry {
    /// Prepends `num_global` zero positions to the token centers.
    pub fn with_globals(centers: &[(f64, f64)], num_global: usize) -> Self {
        let mut xs = vec![0.0; num_global];
        let mut ys = vec![0.0; num_global];
        xs.extend(centers.iter().map(|c| c.0));
        ys.extend(centers.iter().map(|c| c.1));
        TokenGeometry { xs, ys, num_global }
    }

    pub fn len(&self) -> usize {
        self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }

    pub fn is_global(&self, i: usize) -> bool {
        i < self.num_global
    }

    pub(crate) fn axis(&self, a: usize) -> &[f64] {
        if a == 0 {
            &self.xs
        } else {
            &self.ys
        }
    }
}

/// Dense boolean pattern plus per-row key lists.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EtcMask {
    pub n: usize,
    allowed: Vec<bool>,
    rows: Vec<Vec<usize>>,
}

impl EtcMask {
    /// Global rows see everything; local row `i` sees the globals and
    /// `[i - k, i + k]` restricted to local positions.
    pub fn new(n: usize, num_global: usize, radius: usize) -> Result<Self> {
        if n < num_global {
            return Err(Error::invalid("etc_mask", format!("{n} positions cannot hold {num_global} globals")));
        }
        let rows = (0..n)
            .map(|i| {
                if i < num_global {
                    (0..n).collect()
                } else {
                    let lo = i.saturating_sub(radius).max(num_global);
                    let hi = (i + radius).min(n - 1);
                    (0..num_global).chain(lo..=hi).collect()
                }
            })
            .collect();
        Ok(Self::from_rows(n, rows))
    }

    /// Arbitrary pattern; every row must allow at least one key.
    pub fn from_rows(n: usize, rows: Vec<Vec<usize>>) -> Self {
        let mut allowed = vec![false; n * n];
        for (i, r) in rows.iter().enumerate() {
            for &j in r {
                allowed[i * n + j] = true;
            }
        }
        EtcMask { n, allowed, rows }
    }

    pub fn allowed(&self) -> &[bool] {
        &self.allowed
    }

    pub fn is_allowed(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.rows[i]
    }

    pub fn num_allowed(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }
}
