//! Corrupted graph views: edge dropping plus whole-vector feature dropping.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{DocGraph, LAYOUT_DIM};
use crate::error::{Error, Result};
use crate::rng::{hash_str, rng_from};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorruptionConfig {
    pub edge_drop: f64,
    pub layout_drop: f64,
    pub image_drop: f64,
    pub text_drop: f64,
    /// The second view drops features at `1 - rate` instead of `rate`.
    pub decoupled: bool,
    pub seed: u64,
}

impl Default for CorruptionConfig {
    fn default() -> Self {
        CorruptionConfig {
            edge_drop: 0.3,
            layout_drop: 0.8,
            image_drop: 0.8,
            text_drop: 0.8,
            decoupled: true,
            seed: 0,
        }
    }
}

impl CorruptionConfig {
    /// No corruption at all.
    pub fn none() -> Self {
        CorruptionConfig {
            edge_drop: 0.0,
            layout_drop: 0.0,
            image_drop: 0.0,
            text_drop: 0.0,
            decoupled: false,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.edge_drop) {
            return Err(Error::Config(format!("edge_drop {} outside [0, 1)", self.edge_drop)));
        }
        for (name, r) in [
            ("layout_drop", self.layout_drop),
            ("image_drop", self.image_drop),
            ("text_drop", self.text_drop),
        ] {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::Config(format!("{name} {r} outside [0, 1]")));
            }
        }
        Ok(())
    }

    /// Feature drop rates `(layout, image, text)` for view 0 or 1.
    fn rates(&self, view: usize) -> [f64; 3] {
        let r = [self.layout_drop, self.image_drop, self.text_drop];
        if view == 1 && self.decoupled {
            r.map(|p| 1.0 - p)
        } else {
            r
        }
    }
}

/// A corrupted copy of a [`DocGraph`]. Nodes are never removed, so node `i`
/// of the view is node `i` of the parent.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct GraphView {
    /// Surviving edges as indices into the parent's edge list, ascending.
    pub kept_edges: Vec<usize>,
    /// Per surviving edge.
    pub layout_kept: Vec<bool>,
    pub image_kept: Vec<bool>,
    /// Per node.
    pub text_kept: Vec<bool>,
}

impl GraphView {
    /// The parent graph with nothing dropped.
    pub fn identity(graph: &DocGraph) -> Self {
        let e = graph.num_edges();
        GraphView {
            kept_edges: (0..e).collect(),
            layout_kept: vec![true; e],
            image_kept: vec![true; e],
            text_kept: vec![true; graph.num_nodes],
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.text_kept.len()
    }

    pub fn edges(&self, graph: &DocGraph) -> Vec<(usize, usize)> {
        self.kept_edges.iter().map(|&e| graph.edges[e]).collect()
    }

    /// Layout features of surviving edges in one direction, dropped ones zeroed.
    pub fn layout(&self, graph: &DocGraph, reverse: bool) -> Vec<[f64; LAYOUT_DIM]> {
        let src = if reverse { &graph.layout_reverse } else { &graph.layout };
        self.kept_edges
            .iter()
            .zip(&self.layout_kept)
            .map(|(&e, &keep)| if keep { src[e] } else { [0.0; LAYOUT_DIM] })
            .collect()
    }

    /// 1.0 for kept, 0.0 for dropped; handy as row multipliers.
    pub fn image_factors(&self) -> Vec<f64> {
        self.image_kept.iter().map(|&k| f64::from(u8::from(k))).collect()
    }

    pub fn text_factors(&self) -> Vec<f64> {
        self.text_kept.iter().map(|&k| f64::from(u8::from(k))).collect()
    }
}

fn sample_view(graph: &DocGraph, cfg: &CorruptionConfig, doc_id: &str, view: usize) -> GraphView {
    let mut rng = rng_from(&[cfg.seed, hash_str(doc_id), view as u64]);
    let [p_layout, p_image, p_text] = cfg.rates(view);
    let mut v = GraphView {
        kept_edges: Vec::new(),
        layout_kept: Vec::new(),
        image_kept: Vec::new(),
        text_kept: Vec::with_capacity(graph.num_nodes),
    };
    for e in 0..graph.num_edges() {
        // fixed number of draws per edge keeps streams aligned across configs
        let (ue, ul, ui): (f64, f64, f64) = (rng.random(), rng.random(), rng.random());
        if ue < cfg.edge_drop {
            continue;
        }
        v.kept_edges.push(e);
        v.layout_kept.push(ul >= p_layout);
        v.image_kept.push(ui >= p_image);
    }
    for _ in 0..graph.num_nodes {
        let u: f64 = rng.random();
        v.text_kept.push(u >= p_text);
    }
    v
}

/// Two independently corrupted views of `graph`, seeded by `(cfg.seed, doc_id)`.
pub fn corrupt_pair(graph: &DocGraph, cfg: &CorruptionConfig, doc_id: &str) -> Result<(GraphView, GraphView)> {
    cfg.validate()?;
    Ok((sample_view(graph, cfg, doc_id, 0), sample_view(graph, cfg, doc_id, 1)))
}
