//! Entity-level precision, recall and F1 with exact span and label match.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::tagging::EntityPrediction;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AverageMode {
    #[default]
    Micro,
    Macro,
}

impl FromStr for AverageMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "micro" => Ok(AverageMode::Micro),
            "macro" => Ok(AverageMode::Macro),
            other => Err(Error::Config(format!("unknown averaging mode `{other}` (micro | macro)"))),
        }
    }
}

impl fmt::Display for AverageMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AverageMode::Micro => "micro",
            AverageMode::Macro => "macro",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub correct: usize,
    pub predicted: usize,
    pub gold: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mode: AverageMode,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub documents: usize,
    pub per_label: BTreeMap<String, LabelMetrics>,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn f1_score(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

fn label_metrics(correct: usize, predicted: usize, gold: usize) -> LabelMetrics {
    let (p, r) = (ratio(correct, predicted), ratio(correct, gold));
    LabelMetrics {
        precision: p,
        recall: r,
        f1: f1_score(p, r),
        correct,
        predicted,
        gold,
    }
}

/// Scores per-document predictions against gold. Duplicate spans count once.
/// Macro averaging runs over labels seen in either gold or predictions.
pub fn entity_prf(
    predicted: &[Vec<EntityPrediction>],
    gold: &[Vec<EntityPrediction>],
    mode: AverageMode,
) -> Result<MetricsReport> {
    if predicted.len() != gold.len() {
        return Err(Error::invalid(
            "entity_prf",
            format!("{} predicted documents but {} gold", predicted.len(), gold.len()),
        ));
    }
    let mut counts: BTreeMap<String, [usize; 3]> = BTreeMap::new();
    for (p, g) in predicted.iter().zip(gold) {
        let p: BTreeSet<&EntityPrediction> = p.iter().collect();
        let g: BTreeSet<&EntityPrediction> = g.iter().collect();
        for e in &p {
            let c = counts.entry(e.label.clone()).or_default();
            c[1] += 1;
            if g.contains(e) {
                c[0] += 1;
            }
        }
        for e in &g {
            counts.entry(e.label.clone()).or_default()[2] += 1;
        }
    }
    let per_label: BTreeMap<String, LabelMetrics> = counts
        .iter()
        .map(|(l, c)| (l.clone(), label_metrics(c[0], c[1], c[2])))
        .collect();
    let (precision, recall, f1) = match mode {
        AverageMode::Micro => {
            let sum = |k: usize| counts.values().map(|c| c[k]).sum::<usize>();
            let m = label_metrics(sum(0), sum(1), sum(2));
            (m.precision, m.recall, m.f1)
        }
        AverageMode::Macro => {
            let k = per_label.len().max(1) as f64;
            let avg = |f: fn(&LabelMetrics) -> f64| per_label.values().map(f).sum::<f64>() / k;
            (avg(|m| m.precision), avg(|m| m.recall), avg(|m| m.f1))
        }
    };
    Ok(MetricsReport {
        mode,
        precision,
        recall,
        f1,
        documents: gold.len(),
        per_label,
    })
}
