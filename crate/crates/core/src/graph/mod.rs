//! Token graphs: K-nearest-neighbour edges over box centers, per-edge layout
//! features, and corrupted views for contrastive pre-training.

mod corrupt;

pub use corrupt::{corrupt_pair, CorruptionConfig, GraphView};

use serde::Serialize;

use crate::data::Token;
use crate::error::{Error, Result};

pub const LAYOUT_DIM: usize = 8;
pub const DEFAULT_NEIGHBORS: usize = 8;

/// Undirected token graph. Edge `e` joins `edges[e].0 < edges[e].1`; its
/// layout features are stored once per direction.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DocGraph {
    pub num_nodes: usize,
    pub edges: Vec<(usize, usize)>,
    /// Features read from the smaller endpoint towards the larger.
    pub layout: Vec<[f64; LAYOUT_DIM]>,
    /// Features read from the larger endpoint back towards the smaller.
    pub layout_reverse: Vec<[f64; LAYOUT_DIM]>,
}

impl DocGraph {
    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.num_nodes];
        for &(i, j) in &self.edges {
            deg[i] += 1;
            deg[j] += 1;
        }
        deg
    }
}

/// `[dcx/W, dcy/H, ln(1 + dist), w_i/W, h_i/H, w_j/W, h_j/H, (j - i)/n]`,
/// with deltas taken as center(j) - center(i).
pub fn layout_edge_features(
    ti: &Token,
    tj: &Token,
    page_w: u32,
    page_h: u32,
    num_tokens: usize,
) -> Result<[f64; LAYOUT_DIM]> {
    if page_w == 0 || page_h == 0 {
        return Err(Error::invalid("layout_edge_features", "page dimensions must be positive"));
    }
    let (w, h) = (page_w as f64, page_h as f64);
    let (xi, yi) = ti.bbox.center();
    let (xj, yj) = tj.bbox.center();
    let (dx, dy) = (xj - xi, yj - yi);
    Ok([
        dx / w,
        dy / h,
        (1.0 + dx.hypot(dy)).ln(),
        ti.bbox.width() as f64 / w,
        ti.bbox.height() as f64 / h,
        tj.bbox.width() as f64 / w,
        tj.bbox.height() as f64 / h,
        (tj.index as f64 - ti.index as f64) / num_tokens.max(1) as f64,
    ])
}

/// The `k` nearest other tokens of `i` by center distance, nearer first,
/// equal distances resolved towards the smaller index.
pub fn nearest_neighbors(centers: &[(f64, f64)], i: usize, k: usize) -> Vec<usize> {
    let (xi, yi) = centers[i];
    let mut cand: Vec<(f64, usize)> = centers
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != i)
        .map(|(j, &(x, y))| ((x - xi).powi(2) + (y - yi).powi(2), j))
        .collect();
    cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    cand.into_iter().take(k).map(|(_, j)| j).collect()
}

/// Every token proposes edges to its `k` nearest neighbours; proposals are
/// merged into undirected edges sorted by `(i, j)`.
pub fn build_graph(tokens: &[Token], k: usize, page_w: u32, page_h: u32) -> Result<DocGraph> {
    if k == 0 {
        return Err(Error::invalid("build_graph", "K must be at least 1"));
    }
    if tokens.is_empty() {
        return Err(Error::invalid("build_graph", "document has no tokens"));
    }
    let centers: Vec<(f64, f64)> = tokens.iter().map(|t| t.bbox.center()).collect();
    let mut edges: Vec<(usize, usize)> = (0..tokens.len())
        .flat_map(|i| nearest_neighbors(&centers, i, k).into_iter().map(move |j| (i.min(j), i.max(j))))
        .collect();
    edges.sort_unstable();
    edges.dedup();
    let n = tokens.len();
    let mut layout = Vec::with_capacity(edges.len());
    let mut layout_reverse = Vec::with_capacity(edges.len());
    for &(i, j) in &edges {
        layout.push(layout_edge_features(&tokens[i], &tokens[j], page_w, page_h, n)?);
        layout_reverse.push(layout_edge_features(&tokens[j], &tokens[i], page_w, page_h, n)?);
    }
    Ok(DocGraph {
        num_nodes: n,
        edges,
        layout,
        layout_reverse,
    })
}
